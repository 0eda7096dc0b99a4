import json

import numpy as np
import pytest
import yaml

from litformer.cli import main
from litformer.data import read_manifest
from litformer.objectives import PSNR_CAP
from litformer.training import load_checkpoint

TINY = {
    "seed": 0,
    "data": {"n_volumes": 1, "shape": [8, 16, 16], "depth_factor": 2, "noise_sigma_hu": 25},
    "model": {"base_channels": 4, "levels": 3, "heads_in": [1, 2, 4], "heads_th": 2, "r": 2},
    "train": {"epochs": 2, "steps_per_epoch": 2, "warmup_epochs": 0.5, "batch_size": 2,
              "patch": [2, 8, 8], "max_patches": 2, "checkpoint_every": 2},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def lines_of(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


def test_simulate_is_reproducible(tmp_path, config, capsys):
    for name in ("a", "b"):
        assert main(["simulate", "--config", config, "--seed", "7", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in files and len(files) == 3
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert json.loads(capsys.readouterr().out.splitlines()[0])["seed"] == 7


def test_train_eval_cycle(tmp_path, config, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", config, "--out", str(run), "--deterministic"]) == 0
    out = capsys.readouterr().out
    records = [r for r in lines_of(out) if "step" in r and "lr" in r]
    assert [r["step"] for r in records] == [0, 1, 2, 3]
    assert all(np.isfinite(r["losses"]["total"]) for r in records)
    assert (run / "checkpoint.litckpt").exists() and (run / "checkpoint.litckpt.yaml").exists()
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 4
    assert yaml.safe_load((run / "config.yaml").read_text())["model"]["base_channels"] == 4

    assert main(["eval", "--config", config, "--checkpoint", str(run / "checkpoint.litckpt"),
                 "--out", str(run)]) == 0
    got = lines_of(capsys.readouterr().out)
    methods = [g["method"] for g in got]
    assert methods.count("model") == 3 and methods.count("trilinear") == 3
    hist = [g for g in got if "histogram" in g]
    assert len(hist[0]["histogram"]["edges"]) == 81
    assert (run / "metrics.jsonl").read_text().count("\n") == 6


def test_resume_appends_and_matches(tmp_path, config, capsys):
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", "--config", config, "--out", str(full), "--deterministic"]) == 0
    assert main(["train", "--config", config, "--out", str(part), "--deterministic", "--steps", "2"]) == 0
    assert main(["train", "--config", config, "--out", str(part), "--deterministic",
                 "--checkpoint", str(part / "checkpoint.litckpt")]) == 0
    capsys.readouterr()
    a, meta_a = load_checkpoint(full / "checkpoint.litckpt")
    b, meta_b = load_checkpoint(part / "checkpoint.litckpt")
    assert meta_a == meta_b
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    steps = [json.loads(l)["step"] for l in (part / "train_log.jsonl").read_text().splitlines()]
    assert steps == [0, 1, 2, 3]


def test_train_is_deterministic(tmp_path, config, capsys):
    for name in ("a", "b"):
        assert main(["train", "--config", config, "--out", str(tmp_path / name), "--deterministic"]) == 0
    capsys.readouterr()
    ckpt = "checkpoint.litckpt"
    assert (tmp_path / "a" / ckpt).read_bytes() == (tmp_path / "b" / ckpt).read_bytes()

    def strip(p):
        recs = [json.loads(l) for l in p.read_text().splitlines()]
        for r in recs:
            r.pop("wall")
        return recs

    assert strip(tmp_path / "a" / "train_log.jsonl") == strip(tmp_path / "b" / "train_log.jsonl")


def test_eval_ground_truth_and_determinism(tmp_path, config, capsys):
    data = tmp_path / "data"
    assert main(["simulate", "--config", config, "--out", str(data)]) == 0
    manifest = data / "manifest.json"
    doc = json.loads(manifest.read_text())
    for p in doc["pairs"]:
        p["ldr"] = p["ndr"]
    self_manifest = data / "self.json"
    self_manifest.write_text(json.dumps(doc))
    # r = 1 makes the trilinear baseline the identity, so the target is compared with itself.
    cfg = dict(TINY, model=dict(TINY["model"], r=1))
    path = tmp_path / "r1.yaml"
    path.write_text(yaml.safe_dump(cfg))
    capsys.readouterr()
    assert main(["eval", "--config", str(path), "--manifest", str(self_manifest)]) == 0
    mean = [g for g in lines_of(capsys.readouterr().out) if g.get("id") == "mean"][0]
    assert mean["psnr"] == PSNR_CAP and mean["rmse"] == 0.0
    assert mean["ssim2d"] == pytest.approx(1.0, abs=1e-9)
    assert mean["ssim3d"] == pytest.approx(1.0, abs=1e-9)

    outs = []
    for _ in range(2):
        assert main(["eval", "--config", config, "--manifest", str(manifest)]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]


def test_gradcheck_exits_zero(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path), "--per-tensor", "2"]) == 0
    out = capsys.readouterr().out
    assert "max rel err" in out and "PASS" in out
    doc = json.loads((tmp_path / "gradcheck.json").read_text())
    assert doc["passed"] and doc["max_rel_error"] < 1e-4


def test_analyze_reports_rows_and_status(tmp_path, capsys):
    code = main(["analyze", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert "LIT-Former" in out and "(2+1)DUnet" in out and "Parms. [M]" in out
    checks = json.loads((tmp_path / "checks.json").read_text())
    assert code == (0 if all(c["passed"] for c in checks) else 1)
    params = [c for c in checks if "params within" in c["claim"]]
    assert len(params) == 2 and all(c["passed"] for c in params)
    assert (tmp_path / "complexity_LIT-Former.json").exists()


def test_bad_inputs_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model:\n  widths: 3\n")
    assert main(["simulate", "--config", str(bad)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.litckpt")]) == 2
    assert "ConfigError" in capsys.readouterr().err
