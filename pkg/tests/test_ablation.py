import json

import pytest
import torch

from ivfuse.ablation import build_base, feature_probe_study, hierarchy_study, two_stage_study
from ivfuse.config import from_dict

TINY = dict(patch=4, embed_dim=16, encoder_depth=2, decoder_depth=1, heads=2, mlp_ratio=2.0)


@pytest.fixture(scope="module")
def setup(small_corpus):
    cfg = from_dict({
        "model": TINY,
        "plans": {
            "decoder": {"total_steps": 5, "batch": 2, "crop": 16, "lr": 3e-3},
            "cfm": {"total_steps": 4, "align_steps": 2, "crop": 16, "batch": 2, "lr": 2e-3},
            "mfm": {"total_steps": 3, "align_steps": 1, "crop": 16, "batch": 2, "lr": 2e-3},
        },
        "ablation": {"steps": 6, "align_steps": 3, "seeds": [0, 1], "probe_pairs": 3},
    })
    base, logs = build_base(cfg, small_corpus.split("train"))
    return cfg, base, logs


def test_build_base(setup):
    _, base, logs = setup
    assert base.is_frozen("encoder") and base.is_frozen("decoder")
    assert len(logs["decoder"].records) == 5 and "mae" not in logs


def test_two_stage_rows_and_switch(setup, small_corpus, tmp_path):
    cfg, base, _ = setup
    before = {k: v.clone() for k, v in base.state_dict().items()}
    res = two_stage_study(small_corpus.split("train"), small_corpus.split("test"), base, cfg, out=tmp_path)
    assert len(res.rows) == 2 * 2 * cfg.ablation.steps
    two = [r for r in res.rows if r["seed"] == 0 and r["variant"] == "two-stage"]
    assert [r["stage"] for r in two] == ["align"] * 3 + ["fusion"] * 3
    assert all(r["stage"] == "fusion" for r in res.rows if r["variant"] == "direct")
    s0 = res.summary["seeds"][0]
    assert s0["align_at_switch"] == two[3]["align"]
    assert s0["align_drop"] == pytest.approx(1 - two[3]["align"] / two[0]["align"])
    assert res.summary["wins"] == sum(s["two_stage_wins"] for s in res.summary["seeds"])
    assert all(torch.equal(before[k], v) for k, v in base.state_dict().items())
    assert (tmp_path / "two_stage_curves_seed1.csv").is_file()
    assert json.loads((tmp_path / "two_stage_summary.json").read_text())["steps"] == 6


def test_two_stage_same_fresh_layer_per_seed(setup, small_corpus):
    cfg, base, _ = setup
    a = two_stage_study(small_corpus.split("train"), small_corpus.split("test"), base, cfg, seeds=[0])
    b = two_stage_study(small_corpus.split("train"), small_corpus.split("test"), base, cfg, seeds=[0])
    assert a.rows == b.rows
    two = [r for r in a.rows if r["variant"] == "two-stage"]
    direct = [r for r in a.rows if r["variant"] == "direct"]
    # both variants start from the same fresh fusion layer, so step 0 sees the same output
    assert two[0]["fusion"] == direct[0]["fusion"]


def test_hierarchy_frozen_cfm_bit_identical(setup, small_corpus, tmp_path):
    cfg, base, _ = setup
    res = hierarchy_study(small_corpus.split("train"), small_corpus.split("test"), base, cfg, seeds=[0], out=tmp_path)
    s = res.summary["seeds"][0]
    assert s["frozen"]["cfm_bit_identical"] and s["frozen"]["cfm_checked_steps"] == 3
    assert not s["active"]["cfm_bit_identical"]
    assert s["frozen"]["mfm_vs_cfm_mean_abs_diff"] > 0
    assert len(res.rows) == 2 * (4 + 3)
    assert (tmp_path / "hierarchy_images_seed0.png").is_file()


def test_feature_probe_outputs(setup, small_corpus, tmp_path):
    cfg, base, _ = setup
    res = feature_probe_study(small_corpus, base, cfg, out=tmp_path)
    assert res.summary["pairs"] == 3 and len(res.rows) == 3
    for mode in ("mean", "max"):
        assert len(list(tmp_path.glob(f"probe_{mode}_layer*.png"))) == TINY["encoder_depth"] + 1
    assert (tmp_path / "probe_max_compare.png").is_file()
    assert all(r["pixel_max_lap"] >= 0 for r in res.rows)
