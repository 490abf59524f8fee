import dataclasses
import json

import numpy as np
import pytest

from skelfield import io
from skelfield.cli import main
from skelfield.config import PipelineConfig, dumps
from skelfield.metrics import skeleton_metrics
from skelfield.rig import Pose
from skelfield.pipeline import EvaluationError, PipelineError, evaluate, format_table, run_pipeline
from skelfield.skeleton import canonical_form
from skelfield.synth import SynthShapeSpec, synth

FAST = dataclasses.replace(PipelineConfig(), voxel_resolution=32)
TINY_TRAIN = dict(steps=3, batch_size=64, pool_size=256, channels=4, hidden=16, n_blocks=2, warmup=0)


def fast_trained():
    # a barely trained decoder sits near 0.5 everywhere: seed below that so extraction has input
    return dataclasses.replace(FAST, train=dataclasses.replace(FAST.train, **TINY_TRAIN),
                               meanshift=dataclasses.replace(FAST.meanshift, seed_threshold=0.3, n_seeds=1024))


@pytest.fixture(scope="module")
def table():
    return synth(SynthShapeSpec("table"), 0)


def write_shape(path, mesh, skel):
    path.mkdir(parents=True, exist_ok=True)
    io.write_obj(mesh, path / "mesh.obj")
    io.write_skeleton(skel, path / "skeleton.json")
    return path


# -- pipeline ---------------------------------------------------------------------------

def test_oracle_pipeline_recovers_table(table, tmp_path):
    mesh, truth = table
    res = run_pipeline(FAST, mesh, truth, out_dir=tmp_path, name="table")
    assert res.report["n_joints"] == 5
    assert res.report["metrics"]["cd_j2j"] < 0.5 * FAST.sigma
    assert canonical_form(res.skeleton) == canonical_form(truth)
    for f in ("mesh.obj", "skeleton.json", "rig.json", "report.json"):
        assert (tmp_path / f).exists()
    assert not (tmp_path / "checkpoint.skfw").exists()
    res.rig.validate()


def test_outputs_return_to_input_coordinates(table):
    mesh, truth = table
    moved = mesh.transformed(lambda v: 3.0 * v + [1.0, -2.0, 0.5])
    moved_truth = truth.transformed(lambda p: 3.0 * p + [1.0, -2.0, 0.5])
    a = run_pipeline(FAST, mesh, truth)
    b = run_pipeline(FAST, moved, moved_truth)
    np.testing.assert_allclose(b.skeleton.positions, 3.0 * a.skeleton.positions + [1.0, -2.0, 0.5], atol=1e-9)
    assert b.report["metrics"] == pytest.approx(a.report["metrics"], abs=1e-9)


def test_truth_against_itself_is_zero(table):
    assert skeleton_metrics(table[1], table[1]) == {"cd_j2j": 0.0, "cd_j2b": 0.0, "cd_b2b": 0.0}


def test_stage_errors_name_the_stage(table):
    with pytest.raises(PipelineError) as info:
        run_pipeline(FAST, table[0], None, oracle=True)
    assert info.value.stage == "fields"
    with pytest.raises(PipelineError) as info:
        run_pipeline(FAST, table[0], None, oracle=False)
    assert info.value.stage == "train"


def test_trained_pipeline_writes_checkpoint_and_trace(table, tmp_path):
    res = run_pipeline(fast_trained(), table[0], table[1], oracle=False, out_dir=tmp_path)
    assert res.report["mode"] == "trained"
    assert len(io.read_trace(tmp_path / "trace.csv")) == 3
    assert set(io.read_checkpoint(tmp_path / "checkpoint.skfw")) == set(res.model.state_dict())
    assert res.report["final_loss"] == res.trace[-1]["total"]


def test_trained_pipeline_is_byte_deterministic(table, tmp_path):
    cfg = fast_trained()
    for d in ("a", "b"):
        run_pipeline(cfg, table[0], table[1], oracle=False, out_dir=tmp_path / d)
    for f in ("report.json", "checkpoint.skfw", "trace.csv", "rig.json", "skeleton.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


# -- evaluation -------------------------------------------------------------------------

def _skeleton_dir(path, skels):
    path.mkdir(parents=True, exist_ok=True)
    for name, s in skels.items():
        io.write_skeleton(s, path / f"{name}.json")
    return path


def test_evaluate_identical_dirs_is_zero(tmp_path):
    skels = {f: synth(SynthShapeSpec(f), 1)[1] for f in ("table", "lamp")}
    a, b = _skeleton_dir(tmp_path / "a", skels), _skeleton_dir(tmp_path / "b", skels)
    report = evaluate(a, b)
    assert report["mean"] == {"cd_j2j": 0.0, "cd_j2b": 0.0, "cd_b2b": 0.0}
    assert list(report["shapes"]) == ["lamp", "table"]


def test_evaluate_offset_shape_contributes_linearly(tmp_path):
    skels = {f: synth(SynthShapeSpec(f), 2)[1] for f in ("chair", "cross", "table", "lamp")}
    moved = dict(skels, cross=skels["cross"].transformed(lambda p: p + [0.01, 0, 0]))
    report = evaluate(_skeleton_dir(tmp_path / "p", moved), _skeleton_dir(tmp_path / "t", skels))
    assert report["mean"]["cd_j2j"] == pytest.approx(0.01 / 4, abs=1e-12)


def test_evaluate_matches_per_shape_recomputation(tmp_path):
    rng = np.random.default_rng(0)
    truth = {f"s{i}": synth(SynthShapeSpec("chair"), i)[1] for i in range(3)}
    pred = {k: s.transformed(lambda p: p + rng.normal(scale=0.01, size=p.shape)) for k, s in truth.items()}
    report = evaluate(_skeleton_dir(tmp_path / "p", pred), _skeleton_dir(tmp_path / "t", truth))
    for key in ("cd_j2j", "cd_j2b", "cd_b2b"):
        per = [skeleton_metrics(io.read_skeleton(tmp_path / "p" / f"{k}.json"),
                                io.read_skeleton(tmp_path / "t" / f"{k}.json"))[key] for k in sorted(truth)]
        assert report["mean"][key] == pytest.approx(sum(per) / 3, rel=1e-12)
    assert "mean" in format_table(report).splitlines()[-1]


def test_evaluate_reports_unmatched_names(tmp_path):
    s = synth(SynthShapeSpec("table"), 0)[1]
    a = _skeleton_dir(tmp_path / "a", {"x": s, "y": s})
    b = _skeleton_dir(tmp_path / "b", {"x": s, "z": s})
    with pytest.raises(EvaluationError, match="y, z"):
        evaluate(a, b)


def test_evaluate_accepts_pipeline_output_dirs(table, tmp_path):
    run_pipeline(FAST, table[0], table[1], out_dir=tmp_path / "pred" / "table")
    _skeleton_dir(tmp_path / "truth", {"table": table[1]})
    report = evaluate(tmp_path / "pred", tmp_path / "truth")
    assert report["shapes"]["table"]["cd_j2j"] < 0.5 * FAST.sigma


# -- command line -----------------------------------------------------------------------

@pytest.fixture()
def fast_config(tmp_path):
    path = tmp_path / "fast.ini"
    path.write_text(dumps(fast_trained()))
    return str(path)


def test_cli_end_to_end(tmp_path, fast_config, capsys):
    shape = tmp_path / "table"
    assert main(["synth", "table", "--out", str(shape), "--seed", "0"]) == 0
    assert main(["voxelize", str(shape), "--resolution", "16", "--out", str(tmp_path / "vox")]) == 0
    assert io.read_occgrid(tmp_path / "vox" / "grid.occ").resolution == 16
    assert main(["fields", str(shape), "--samples", "64", "--out", str(tmp_path / "f")]) == 0
    rows = json.loads((tmp_path / "f" / "targets.json").read_text())
    assert len(rows) == 64 and set(rows[0]) == {"joint", "root", "bone", "instance", "p"}
    assert main(["--config", fast_config, "pipeline", str(shape), "--oracle", "--out", str(tmp_path / "run")]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["n_joints"] == 5 and report["name"] == "table"
    assert main(["extract", str(shape), "--config", fast_config, "--out", str(tmp_path / "ex")]) == 0
    assert main(["rig", str(shape / "mesh.obj"), str(shape / "skeleton.json"), "--out", str(tmp_path / "rig")]) == 0
    io.write_clip([Pose.identity(5)], tmp_path / "clip.json")
    assert main(["pose", str(tmp_path / "rig" / "rig.json"), str(tmp_path / "clip.json"),
                 "--out", str(tmp_path / "frames")]) == 0
    frame = io.read_obj(tmp_path / "frames" / "frame_0000.obj")
    np.testing.assert_allclose(frame.vertices, io.read_obj(shape / "mesh.obj").vertices, atol=1e-6)
    assert main(["eval", str(tmp_path / "run"), str(shape), "--out", str(tmp_path / "ev")]) == 2
    (tmp_path / "pred").mkdir()
    (tmp_path / "truth").mkdir()
    (tmp_path / "pred" / "table.json").write_bytes((tmp_path / "run" / "skeleton.json").read_bytes())
    (tmp_path / "truth" / "table.json").write_bytes((shape / "skeleton.json").read_bytes())
    assert main(["eval", str(tmp_path / "pred"), str(tmp_path / "truth"), "--out", str(tmp_path / "ev")]) == 0
    assert "cd_j2j" in json.loads((tmp_path / "ev" / "eval.json").read_text())["mean"]


def test_cli_train_and_checkpoint_mode(tmp_path, fast_config):
    shape = tmp_path / "lamp"
    assert main(["synth", "lamp", "--out", str(shape)]) == 0
    assert main(["train", str(shape), "--config", fast_config, "--out", str(tmp_path / "model")]) == 0
    ckpt = tmp_path / "model" / "checkpoint.skfw"
    assert len(io.read_trace(tmp_path / "model" / "trace.csv")) == 3
    code = main(["pipeline", str(shape), "--config", fast_config, "--checkpoint", str(ckpt),
                 "--out", str(tmp_path / "run")])
    assert code == 0
    assert json.loads((tmp_path / "run" / "report.json").read_text())["mode"] == "trained"


def test_cli_dump_defaults_round_trips(capsys):
    assert main(["--dump-defaults"]) == 0
    text = capsys.readouterr().out
    assert "[pipeline]" in text and "[train]" in text
    from skelfield.config import loads
    assert loads(text) == PipelineConfig()


def test_cli_validation_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["voxelize", str(tmp_path / "missing.obj")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[pipeline]\nnope = 1\n")
    assert main(["--config", str(bad), "synth", "table", "--out", str(tmp_path / "s")]) == 2
    assert "unknown config key" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["pipeline", "x", "--oracle", "--train"])


def test_cli_numerical_failure_exits_3(tmp_path):
    shape = tmp_path / "table"
    main(["synth", "table", "--out", str(shape)])
    cfg = fast_trained()
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, lr=1e6, steps=20))
    (tmp_path / "blowup.ini").write_text(dumps(cfg))
    code = main(["train", str(shape), "--config", str(tmp_path / "blowup.ini"), "--out", str(tmp_path / "m")])
    assert code == 3
