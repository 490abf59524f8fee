"""Pipeline configuration and its INI-style text form."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .losses import DiscriminativeParams
from .neural import TrainConfig
from .skeleton import MeanShiftConfig


@dataclass
class RigConfig:
    rounds: int = 10
    band: float = 0.05


@dataclass
class PipelineConfig:
    seed: int = 0
    sigma: float = 0.04
    n_samples: int = 16384
    band: float = 0.05
    symmetry_threshold: float = 0.02
    voxel_resolution: int = 128
    edge_samples: int = 16
    edge_eps: float = 1e-4
    occlusion_radius: float = 0.08
    bone_samples: int = 32
    out: str = "out"
    meanshift: MeanShiftConfig = field(default_factory=MeanShiftConfig)
    discriminative: DiscriminativeParams = field(default_factory=DiscriminativeParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    rig: RigConfig = field(default_factory=RigConfig)

    def train_config(self) -> TrainConfig:
        """Training settings with the shared pipeline values applied."""
        return dataclasses.replace(self.train, seed=self.seed, sigma=self.sigma, band=self.band,
                                   symmetry_threshold=self.symmetry_threshold)


_SECTIONS = ("meanshift", "discriminative", "train", "rig")
# set once under [pipeline] and copied into the training settings
_SHARED = ("seed", "sigma", "band", "symmetry_threshold")


def _fmt(v: Any) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, default: Any) -> Any:
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(type(d)(x) for d, x in zip(default, text.split(",")))
    return text.strip()


def _scalars(obj) -> dict:
    skip = _SECTIONS + (_SHARED if isinstance(obj, TrainConfig) else ())
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.name not in skip}


def dumps(cfg: PipelineConfig) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["pipeline"] = {k: _fmt(v) for k, v in _scalars(cfg).items()}
    for sec in _SECTIONS:
        cp[sec] = {k: _fmt(v) for k, v in _scalars(getattr(cfg, sec)).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _update(obj, items) -> Any:
    known = _scalars(obj)
    changes = {}
    for k, v in items:
        if k not in known:
            raise ValueError(f"unknown config key {k!r}")
        changes[k] = _parse(v, known[k])
    return dataclasses.replace(obj, **changes)


def loads(text: str, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    cfg = base or PipelineConfig()
    for sec in cp.sections():
        if sec == "pipeline":
            cfg = _update(cfg, cp.items(sec))
        elif sec in _SECTIONS:
            cfg = dataclasses.replace(cfg, **{sec: _update(getattr(cfg, sec), cp.items(sec))})
        else:
            raise ValueError(f"unknown config section [{sec}]")
    return cfg


def load(path: Union[str, Path]) -> PipelineConfig:
    return loads(Path(path).read_text())
