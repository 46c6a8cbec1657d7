import json
from pathlib import Path

import numpy as np
import pytest

from refvid import curation as cu
from refvid.cli import main
from refvid.config import RunConfig, load_config
from refvid.errors import DivergenceError
from tiny import tiny_config


def write_config(path, cfg):
    path.write_text(json.dumps(cfg.to_dict()))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = write_config(root / "config.json", tiny_config())
    assert main(["synth", "--config", conf, "--out", str(root / "data")]) == 0
    return root, conf


def run_json(argv, capsys):
    code = main(argv)
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 else None)


def test_synth_is_byte_identical_on_rerun(workspace, tmp_path):
    root, conf = workspace
    assert main(["synth", "--config", conf, "--out", str(tmp_path / "again")]) == 0
    for a in sorted((root / "data").rglob("*")):
        rel = a.relative_to(root / "data")
        b = tmp_path / "again" / rel
        if a.is_file() and a.name != "run.json":
            assert a.read_bytes() == b.read_bytes(), rel
    assert len(list((root / "data" / "manifests").glob("*.json"))) == 3


def test_synth_summary_counts(workspace, capsys, tmp_path):
    _, conf = workspace
    code, info = run_json(["synth", "--config", conf, "--out", str(tmp_path / "d")], capsys)
    assert code == 0 and info["written"] == 3 and len(info["clip_ids"]) == 3


def test_unsatisfiable_filter_exit_2(tmp_path, capsys):
    cfg = tiny_config().with_overrides(data={"aesthetic_min": 2.0, "n_clips": 2})
    conf = write_config(tmp_path / "c.json", cfg)
    code = main(["synth", "--config", conf, "--out", str(tmp_path / "d")])
    # an aesthetic score never exceeds 1, so every shot is rejected and the run stops with a config error
    assert code == 2 and "filters reject" in capsys.readouterr().err


def test_unknown_config_field_exit_2(tmp_path, capsys):
    d = tiny_config().to_dict()
    d["train"]["learning_rate"] = 1.0
    (tmp_path / "c.json").write_text(json.dumps(d))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert "train.learning_rate" in capsys.readouterr().err


def test_missing_inputs_exit_2(workspace, tmp_path, capsys):
    root, conf = workspace
    cfg = tiny_config(aligner_init="pretrained")
    c2 = write_config(tmp_path / "c.json", cfg)
    assert main(["train", "--config", c2, "--data", str(root / "data"), "--out", str(tmp_path / "t")]) == 2
    assert "aligner-ckpt" in capsys.readouterr().err
    assert main(["train", "--config", conf, "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "t")]) == 2


def test_divergence_exit_3(workspace, tmp_path):
    root, _ = workspace
    cfg = tiny_config(divergence_factor=1e-9, divergence_patience=2)
    conf = write_config(tmp_path / "c.json", cfg)
    assert main(["train", "--config", conf, "--data", str(root / "data"), "--out", str(tmp_path / "t")]) == 3
    assert DivergenceError.exit_code == 3


@pytest.fixture(scope="module")
def trained(workspace):
    root, conf = workspace
    assert main(["align-pretrain", "--config", conf, "--data", str(root / "data"), "--out", str(root / "al")]) == 0
    cfg = tiny_config(aligner_init="pretrained")
    c2 = write_config(root / "pre.json", cfg)
    assert main(["train", "--config", c2, "--data", str(root / "data"), "--aligner-ckpt", str(root / "al" / "aligner.ckpt"),
                 "--out", str(root / "run")]) == 0
    return root, c2


def test_pretrain_writes_loss_log(trained):
    root, _ = trained
    lines = (root / "al" / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss_mse,loss_cos,loss_total,lr" and len(lines) == 21
    rec = json.loads((root / "al" / "run.json").read_text())
    assert rec["command"] == "align-pretrain" and rec["steps"] == 20


def test_train_outputs(trained):
    root, _ = trained
    run = root / "run"
    assert (run / "final.ckpt").exists() and (run / "metrics.csv").exists()
    rec = json.loads((run / "run.json").read_text())
    assert rec["steps"] == 6 and rec["config"]["train"]["aligner_init"] == "pretrained"


def test_integrity_error_exit_4(trained, tmp_path):
    root, _ = trained
    raw = bytearray((root / "run" / "final.ckpt").read_bytes())
    raw[-10] ^= 0x55
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    manifest = sorted((root / "data" / "manifests").glob("*.json"))[0]
    assert main(["sample", "--checkpoint", str(tmp_path / "bad.ckpt"), "--manifest", str(manifest),
                 "--out", str(tmp_path / "s")]) == 4


def test_sample_deterministic_and_in_range(trained, tmp_path, capsys):
    root, _ = trained
    manifest = sorted((root / "data" / "manifests").glob("*.json"))[0]
    args = ["sample", "--checkpoint", str(root / "run" / "final.ckpt"), "--manifest", str(manifest), "--seed", "5"]
    code, info = run_json(args + ["--out", str(tmp_path / "a")], capsys)
    assert code == 0 and info["seed"] == 5 and info["guidance"] == 3.0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = cu.read_video(tmp_path / "a" / "frames"), cu.read_video(tmp_path / "b" / "frames")
    assert np.array_equal(a, b) and a.shape[0] == tiny_config().model.frames
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_sample_config_mismatch(trained, tmp_path):
    root, _ = trained
    other = write_config(tmp_path / "o.json", tiny_config().with_overrides(model={"width": 48}))
    manifest = sorted((root / "data" / "manifests").glob("*.json"))[0]
    assert main(["sample", "--config", other, "--checkpoint", str(root / "run" / "final.ckpt"),
                 "--manifest", str(manifest), "--out", str(tmp_path / "s")]) == 2


def test_eval_against_itself(trained, tmp_path, capsys):
    root, _ = trained
    base = ["eval", "--checkpoint", str(root / "run" / "final.ckpt"), "--data", str(root / "data"), "--n-clips", "2"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    capsys.readouterr()
    code, summary = run_json(base + ["--out", str(tmp_path / "b"), "--baseline", str(tmp_path / "a" / "report.json")],
                             capsys)
    assert code == 0 and summary["mean_delta"] == 0.0 and summary["n_clips"] == 2
    rep = json.loads((tmp_path / "b" / "report.json").read_text())
    assert all(v == 0.0 for v in rep["baseline"]["deltas"].values())
    first = json.loads((tmp_path / "a" / "report.json").read_text())
    assert first["clips"] == rep["clips"] and first["baseline"] is None


def test_ablation_flags_map_to_config(workspace, tmp_path):
    root, conf = workspace
    assert main(["train", "--config", conf, "--data", str(root / "data"), "--visual-feats", "mllm-vision",
                 "--text-encoder", "teacher-only", "--steps", "2", "--out", str(tmp_path / "t")]) == 0
    rec = json.loads((tmp_path / "t" / "run.json").read_text())
    assert rec["config"]["model"]["visual_feats"] == "mllm-vision"
    assert rec["config"]["model"]["text_encoder"] == "teacher-only"
    assert rec["steps"] == 2


def test_desk_config_file_matches_preset():
    path = Path(__file__).parent.parent / "configs" / "desk.json"
    assert load_config(path) == RunConfig.desk()


def test_ablation_config_file_is_desk_with_default_betas():
    path = Path(__file__).parent.parent / "configs" / "ablation.json"
    expected = RunConfig.desk().with_overrides(model={"beta_min": 1e-3, "beta_max": 0.2},
                                               train={"steps": 4000, "cycle_steps": 4000, "checkpoint_every": 0})
    assert load_config(path) == expected
