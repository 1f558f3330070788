import json
import subprocess
import sys

import numpy as np
import pytest

from ivfuse.cli import build_parser, main
from ivfuse.imaging import Image, read_image, write_image

TINY_MODEL = dict(patch=4, embed_dim=16, encoder_depth=2, decoder_depth=1, heads=2, mlp_ratio=2.0)


def tiny_config(root, data):
    return {
        "model": TINY_MODEL,
        "plans": {
            "mae": {"total_steps": 3, "batch": 2, "crop": 16},
            "decoder": {"total_steps": 4, "batch": 2, "crop": 16},
            "cfm": {"total_steps": 4, "align_steps": 2, "crop": 16},
            "mfm": {"total_steps": 3, "align_steps": 1, "crop": 16},
        },
        "paths": {"data_root": str(data), "checkpoint_dir": str(root / "ck"), "output_dir": str(root / "out")},
        "ablation": {"steps": 4, "align_steps": 2, "seeds": [0, 1], "probe_pairs": 2},
    }


def run_pipeline(root):
    data = root / "data"
    assert main(["synth", "--n", "6", "--size", "16", "--seed", "2", "--out", str(data), "--n-test", "2",
                 "--patch", "4"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(tiny_config(root, data)))
    c = ["--config", str(cfg)]
    assert main(["pretrain", "--stage", "mae", *c]) == 0
    assert main(["pretrain", "--stage", "decoder", *c]) == 0
    assert main(["train", "--target", "cfm", *c]) == 0
    assert main(["train", "--target", "mfm", *c]) == 0
    assert main(["fuse", "--checkpoint", str(root / "ck" / "fusion"), "--vi", str(data / "vi"),
                 "--ir", str(data / "ir"), "--out", str(root / "fused")]) == 0
    assert main(["eval", "--vi", str(data / "vi"), "--ir", str(data / "ir"), "--fused", str(root / "fused"),
                 "--out-report", str(root / "report"), "--method", "tiny"]) == 0
    return c


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return root, run_pipeline(root)


def test_pipeline_artifacts(pipeline):
    root, _ = pipeline
    for stage in ("mae", "decoder", "cfm", "fusion"):
        assert (root / "ck" / stage / "manifest.json").is_file()
    logs = root / "out" / "logs"
    for name in ("pretrain_mae", "pretrain_decoder", "train_cfm", "train_mfm"):
        assert (logs / f"{name}.jsonl").is_file()
    assert len((logs / "train_cfm.jsonl").read_text().splitlines()) == 4
    assert (root / "out" / "config.train-cfm.json").is_file()
    summary = json.loads((root / "out" / "train_mfm_summary.json").read_text())
    assert summary["test_fusion"] > 0
    assert (root / "out" / "train_mfm_curve.png").is_file()
    assert sorted(p.name for p in (root / "fused").iterdir()) == [f"{k:04d}.png" for k in range(6)]
    rep = json.loads((root / "report.json").read_text())
    assert rep["metadata"]["method"] == "tiny" and len(rep["rows"]) == 6
    assert (root / "report.csv").is_file() and (root / "report.png").is_file()


def test_frozen_flags_in_checkpoints(pipeline):
    root, _ = pipeline
    frozen = lambda s: json.loads((root / "ck" / s / "manifest.json").read_text())["frozen"]  # noqa: E731
    assert frozen("decoder") == {"encoder": True, "decoder": True, "cfm": False, "mfm": False, "ffn": False}
    assert all(frozen("fusion").values())


def test_fuse_single_pair_keeps_dims(pipeline, tmp_path):
    root, _ = pipeline
    rng = np.random.default_rng(0)
    write_image(tmp_path / "v.png", Image(rng.uniform(size=(12, 20))))
    write_image(tmp_path / "i.png", Image(rng.uniform(size=(12, 20))))
    assert main(["fuse", "--checkpoint", str(root / "ck" / "fusion"), "--vi", str(tmp_path / "v.png"),
                 "--ir", str(tmp_path / "i.png"), "--out", str(tmp_path / "o" / "f.png")]) == 0
    assert read_image(tmp_path / "o" / "f.png").shape == (12, 20)


def test_fuse_colour(pipeline, tmp_path):
    root, _ = pipeline
    rng = np.random.default_rng(1)
    write_image(tmp_path / "v.png", Image(rng.uniform(size=(8, 8, 3)), colorspace="rgb"))
    write_image(tmp_path / "i.png", Image(rng.uniform(size=(8, 8))))
    assert main(["fuse", "--checkpoint", str(root / "ck" / "fusion"), "--vi", str(tmp_path / "v.png"),
                 "--ir", str(tmp_path / "i.png"), "--out", str(tmp_path / "f.png"), "--color", "ycbcr-reattach"]) == 0
    assert read_image(tmp_path / "f.png").colorspace == "rgb"


def test_hierarchical_and_resume(pipeline):
    root, c = pipeline
    assert main(["train", "--hierarchical", *c]) == 0
    recs = [json.loads(x) for x in (root / "out" / "logs" / "train_hierarchical.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == list(range(7))
    assert main(["pretrain", "--stage", "decoder", "--resume", *c]) == 0
    steps = [json.loads(x)["step"] for x in (root / "out" / "logs" / "pretrain_decoder.jsonl").read_text().splitlines()]
    assert steps == list(range(8))


def test_ablate_two_stage(pipeline):
    root, c = pipeline
    assert main(["ablate", "--study", "two-stage", *c]) == 0
    out = root / "out" / "ablate" / "two-stage"
    summary = json.loads((out / "two_stage_summary.json").read_text())
    assert len(summary["seeds"]) == 2
    assert (out / "two_stage_curves_seed0.png").is_file()


def test_ablate_feature_probe(pipeline):
    root, c = pipeline
    assert main(["ablate", "--study", "feature-probe", *c]) == 0
    out = root / "out" / "ablate" / "feature-probe"
    assert sorted(p.name for p in out.glob("probe_max_layer*.png")) == [f"probe_max_layer{k}.png" for k in range(3)]


# -- exit codes -------------------------------------------------------------------------------

def test_missing_prerequisite_exit_3(tmp_path):
    data = tmp_path / "data"
    main(["synth", "--n", "2", "--size", "16", "--out", str(data), "--n-test", "0", "--patch", "4"])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(tiny_config(tmp_path, data)))
    assert main(["pretrain", "--stage", "decoder", "--config", str(cfg)]) == 3
    assert main(["train", "--target", "mfm", "--config", str(cfg)]) == 3
    assert main(["ablate", "--study", "hierarchy", "--config", str(cfg)]) == 3
    assert main(["fuse", "--checkpoint", str(tmp_path / "none"), "--vi", "a", "--ir", "b", "--out", "c"]) == 3


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"patch": "8"}}))
    assert main(["pretrain", "--stage", "mae", "--config", str(bad)]) == 2
    assert "model.patch" in capsys.readouterr().err
    assert main(["pretrain", "--stage", "mae", "--bogus"]) == 2
    assert main(["train"]) == 2
    assert main(["synth", "--size", "10", "--out", str(tmp_path / "d")]) == 2


def test_data_mismatch_exit_4(pipeline, tmp_path):
    root, _ = pipeline
    for sub in ("vi", "ir"):
        (tmp_path / sub).mkdir()
    write_image(tmp_path / "vi" / "a.png", Image(np.zeros((8, 8))))
    write_image(tmp_path / "ir" / "b.png", Image(np.zeros((8, 8))))
    assert main(["fuse", "--checkpoint", str(root / "ck" / "fusion"), "--vi", str(tmp_path / "vi"),
                 "--ir", str(tmp_path / "ir"), "--out", str(tmp_path / "f")]) == 4
    (tmp_path / "fu").mkdir()
    assert main(["eval", "--vi", str(tmp_path / "vi"), "--ir", str(tmp_path / "ir"), "--fused", str(tmp_path / "fu"),
                 "--out-report", str(tmp_path / "r")]) == 4
    write_image(tmp_path / "v.png", Image(np.zeros((8, 8))))
    write_image(tmp_path / "i.png", Image(np.zeros((8, 12))))
    assert main(["fuse", "--checkpoint", str(root / "ck" / "fusion"), "--vi", str(tmp_path / "v.png"),
                 "--ir", str(tmp_path / "i.png"), "--out", str(tmp_path / "x.png")]) == 4


def test_help_shows_defaults(capsys):
    assert main(["synth", "--help"]) == 0
    out = capsys.readouterr().out
    assert "(default: 200)" in out and "(default: 20)" in out
    for cmd in ("pretrain", "train", "fuse", "eval", "ablate"):
        assert main([cmd, "--help"]) == 0


def test_parser_lists_all_commands():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"synth", "pretrain", "train", "fuse", "eval", "ablate"}


def test_synth_rerun_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--n", "3", "--size", "16", "--seed", "4", "--n-test", "1", "--out", str(tmp_path / d)]) == 0
    for sub in ("vi", "ir"):
        for f in (tmp_path / "a" / sub).iterdir():
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ivfuse.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "ablate" in res.stdout
