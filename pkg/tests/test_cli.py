import csv
import json

import numpy.testing as npt
import pytest

from jointvit.cli import (EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, RunLockedError, cmd_export,
                          cmd_gradcheck, cmd_synth, locked_dir, main)
from jointvit.config import RunConfig, load_config
from jointvit.model import checkpoint_load, init_model
from jointvit.model import ViTConfig


def run_doc(root, iterations=2):
    kinds = [("blobs-image", 4), ("blobs-image", 3), ("blobs-video", 3), ("frame-order", 2)]
    return {
        "model": {"image_size": [8, 8], "patch": 4, "dim": 16, "depth": 3, "heads": 2, "mlp_hidden": 32},
        "datasets": [f"d{i}/manifest.json" for i in range(4)],
        "augment": {"size": 8},
        "regime": {"mode": "all", "reference": True, "lr_scale": 100},
        "weighter": {"kind": "dwa", "window": 2},
        "schedule": {"iterations": iterations, "seed": 5},
        "io": {"output_dir": "out"},
        "synth": [{"kind": k, "root": f"d{i}", "classes": c, "samples": 8, "dims": [8, 8], "frames": 3,
                   "seed": i} for i, (k, c) in enumerate(kinds)],
    }


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(run_doc(tmp_path)))
    assert main(["synth", str(path)]) == EXIT_OK
    return path


def test_config_round_trip(tmp_path):
    cfg = RunConfig.from_dict(run_doc(tmp_path), tmp_path)
    again = RunConfig.from_dict(json.loads(cfg.dumps()))
    assert again == cfg
    assert again.dumps() == cfg.dumps()


def test_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"schedule": {"seed": 1, "iterations": 3}}))
    assert load_config(path, env={}).schedule.seed == 1
    assert load_config(path, env={"IVF_SEED": "7"}).schedule.seed == 7
    cfg = load_config(path, ["schedule.seed=9", "weighter.kind=dtp"], env={"IVF_SEED": "7"})
    assert (cfg.schedule.seed, cfg.schedule.iterations, cfg.weighter.kind) == (9, 3, "dtp")
    assert load_config(None, env={}).schedule == RunConfig().schedule


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"weighter": {"kind": "nope"}}))
    assert main(["train", str(bad)]) == EXIT_CONFIG
    bad.write_text(json.dumps({"surprise": {}}))
    assert main(["train", str(bad)]) == EXIT_CONFIG
    bad.write_text("{not json")
    assert main(["train", str(bad)]) == EXIT_CONFIG
    assert main(["train", str(tmp_path / "missing.json")]) == EXIT_IO
    assert "error" in capsys.readouterr().err


def test_synth_is_deterministic(tmp_path):
    doc = run_doc(tmp_path)
    a = cmd_synth(RunConfig.from_dict(doc, tmp_path / "a"))
    b = cmd_synth(RunConfig.from_dict(doc, tmp_path / "b"))
    for pa, pb in zip(a, b):
        fa = sorted(p for p in pa.parent.rglob("*") if p.is_file())
        fb = sorted(p for p in pb.parent.rglob("*") if p.is_file())
        assert [p.read_bytes() for p in fa] == [p.read_bytes() for p in fb]
        assert (pa.parent / "train").is_dir() and (pa.parent / "val").is_dir()


def test_train_writes_outputs(config_file, tmp_path):
    assert main(["train", str(config_file), "--iterations", "2"]) == EXIT_OK
    out = tmp_path / "out"
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 8
    assert [json.loads(line)["dataset"] for line in lines] == [0, 1, 2, 3] * 2
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["schedule"]["iterations"] == 2 and resolved["model"]["dataset_heads"] == [4, 3, 3, 2]
    assert RunConfig.from_dict(resolved).schedule.seed == 5
    evals = [json.loads(line) for line in (out / "eval.jsonl").read_text().splitlines()]
    assert {(e["dataset"], e["split"]) for e in evals} == {(i, s) for i in range(4) for s in ("train", "val")}
    assert not (out / ".lock").exists()
    m = checkpoint_load(out / "model.ivck")
    assert m.config.dataset_heads == [4, 3, 3, 2]


def test_zero_iterations_checkpoint_is_init(config_file, tmp_path):
    assert main(["train", str(config_file), "--iterations", "0", "--seed", "3"]) == EXIT_OK
    m = checkpoint_load(tmp_path / "out" / "model.ivck")
    ref = init_model(m.config, seed=3)
    for k, v in ref.params.items():
        npt.assert_array_equal(m.params[k].data, v.data)
    assert (tmp_path / "out" / "metrics.jsonl").read_text() == ""


def test_eval_command(config_file, tmp_path, capsys):
    assert main(["train", str(config_file), "--iterations", "1"]) == EXIT_OK
    capsys.readouterr()
    ck, man = tmp_path / "out" / "model.ivck", tmp_path / "d3" / "manifest.json"
    assert main(["eval", str(ck), str(man), "--head", "3"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert 0 <= res["top1"] <= 1 and res["top5"] == 1.0
    assert main(["eval", str(ck), str(man), "--head", "0"]) == EXIT_CONFIG


def test_lock_blocks_second_run(tmp_path):
    with locked_dir(tmp_path / "o"):
        with pytest.raises(RunLockedError):
            with locked_dir(tmp_path / "o"):
                pass
    with locked_dir(tmp_path / "o"):
        pass


def test_locked_output_dir_exits_io(config_file, tmp_path):
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / ".lock").write_text("1")
    assert main(["train", str(config_file), "--iterations", "0"]) == EXIT_IO


def test_export(tmp_path):
    recs = [{"iteration": it, "dataset": d, "loss": 1.0 / (it + d + 3), "w": 1.0, "top1": 0.5, "top5": 1.0}
            for it in range(3) for d in range(4)]
    src = tmp_path / "m.jsonl"
    src.write_text("".join(json.dumps(r) + "\n" for r in recs))
    paths = cmd_export(src, tmp_path / "csv")
    assert [p.name for p in paths] == [f"dataset_{i}.csv" for i in range(4)]
    for d, p in enumerate(paths):
        rows = list(csv.DictReader(open(p)))
        want = [r for r in recs if r["dataset"] == d]
        assert [int(r["iteration"]) for r in rows] == [r["iteration"] for r in want]
        assert [float(r["loss"]) for r in rows] == [r["loss"] for r in want]


def test_export_empty_and_malformed(tmp_path):
    src = tmp_path / "m.jsonl"
    src.write_text("")
    paths = cmd_export(src, tmp_path / "csv", num_datasets=2)
    assert [p.read_text().strip() for p in paths] == ["iteration,loss,w,top1,top5"] * 2
    src.write_text('{"iteration": 0, "dataset": 0, "loss": 1, "w": 1, "top1": 0, "top5": 0}\n{oops\n')
    with pytest.raises(ValueError, match=":2:"):
        cmd_export(src, tmp_path / "csv")
    assert main(["export", str(src), str(tmp_path / "csv")]) == EXIT_IO


def test_gradcheck_sabotage_is_detected(capsys):
    err, report = cmd_gradcheck(shift=False, sabotage=True)
    assert err > 1e-2
    assert main(["gradcheck", "--no-shift", "--sabotage"]) == EXIT_NUMERIC
    out = json.loads(capsys.readouterr().out)
    assert out["sabotage"] and out["max_rel_error"] > 1e-2


def test_model_config_round_trip():
    cfg = ViTConfig(image_size=(8, 8), patch=4, dim=16, heads=2, dataset_heads=[3, 2])
    assert ViTConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
