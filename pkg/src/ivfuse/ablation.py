"""Ablation studies on a decoder-pretrained base network.

* two-stage: 25 alignment + 25 fusion steps vs 50 direct fusion steps
* hierarchy: CFM frozen vs CFM kept active while the MFM trains
* feature-probe: pixel-domain vs feature-domain max fusion, plus a layer
  sweep of mean/max feature fusion

Each study returns a :class:`StudyResult`; when given an output directory it
also writes CSV/JSON tables, PNG images and figures there.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import RunConfig
from .data import PairSet
from .imaging import Image, max_fuse, write_image
from .losses import fusion_components, loss_fusion_total
from .model import FusionNet, probe_feature_fusion, probe_layer_sweep, reseed_fusion_layer
from .training import eval_pairs, fusion_loss_on, guided_train, hierarchical_train, pretrain_decoder, pretrain_encoder_mae

log = logging.getLogger(__name__)

FUSION_SEED_OFFSET = 1000


@dataclass
class StudyResult:
    name: str
    summary: dict
    rows: list[dict] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)


def _write_csv(path, rows, columns) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return Path(path)


def _write_json(path, obj) -> Path:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return Path(path)


def build_base(cfg: RunConfig, train: PairSet) -> tuple[FusionNet, dict]:
    """Fresh network, optional MAE pretraining, then frozen-encoder decoder
    pretraining. Returns the network (encoder and decoder frozen) and logs."""
    net = FusionNet(cfg.model, seed=cfg.seed, fusion_init=cfg.fusion_init)
    logs = {}
    if cfg.plans["mae"].total_steps:
        net, logs["mae"] = pretrain_encoder_mae(train, net, cfg.plan("mae"))
    net.freeze("encoder")
    net, logs["decoder"] = pretrain_decoder(train, net, cfg.plan("decoder"))
    net.freeze("decoder")
    return net, logs


def _fresh_copy(base: FusionNet, seed: int, scheme: str) -> FusionNet:
    net = copy.deepcopy(base)
    reseed_fusion_layer(net, FUSION_SEED_OFFSET + seed, scheme)
    return net


def _pair_images(data: PairSet, k: int = 0) -> tuple[Image, Image]:
    v, i = data.load(data.records[k])
    return Image(v), Image(i)


@torch.no_grad()
def _fused_image(net, v: Image, i: Image, path="full") -> Image:
    dtype = next(net.parameters()).dtype
    tv = torch.as_tensor(v.gray, dtype=dtype)[None, None]
    ti = torch.as_tensor(i.gray, dtype=dtype)[None, None]
    out = net(tv, ti, path).clamp(0.0, 1.0)
    return Image(out[0, 0].double().numpy())


# ---------------------------------------------------------------------------

def two_stage_study(train: PairSet, test: PairSet, base: FusionNet, cfg: RunConfig,
                    seeds=None, target: str = "cfm", out=None) -> StudyResult:
    """Two-stage (align then fuse) vs direct fusion training from the same
    fresh fusion layer, one pair of runs per seed.

    ``align_drop`` is 1 - align(at switch) / align(step 0), where the value at
    the switch is the alignment loss measured at step ``align_steps``, i.e.
    after every alignment update.
    """
    ab = cfg.ablation
    seeds = list(ab.seeds if seeds is None else seeds)
    path = "cfm" if target == "cfm" else "full"
    variants = {"two-stage": ab.align_steps, "direct": 0}
    rows, per_seed, nets = [], [], {}
    for seed in seeds:
        res = {"seed": seed}
        for name, align in variants.items():
            net = _fresh_copy(base, seed, cfg.fusion_init)
            if target == "mfm":
                net.freeze("cfm")
            plan = cfg.plan(target, total_steps=ab.steps, align_steps=align, seed=seed)
            net, tlog = guided_train(train, net, plan, cfg.loss)
            for r in tlog.records:
                rows.append({"seed": seed, "variant": name, **{k: r[k] for k in ("step", "stage", "loss", "align", "fusion")}})
            res[f"{name}_test_fusion"] = fusion_loss_on(test, net, path, cfg.loss)
            res[f"{name}_train_fusion"] = tlog.records[-1]["fusion"]
            if align:
                a = tlog.losses("align")
                res["align_start"] = a[0]
                res["align_at_switch"] = a[align] if align < len(a) else a[-1]
                res["align_drop"] = 1.0 - res["align_at_switch"] / a[0]
            nets[(seed, name)] = net
        res["two_stage_wins"] = res["two-stage_test_fusion"] < res["direct_test_fusion"]
        per_seed.append(res)
        log.info("two-stage seed %d: %s", seed, res)
    summary = {
        "target": target,
        "steps": ab.steps,
        "align_steps": ab.align_steps,
        "mean_baseline_test_fusion": fusion_loss_on(test, base, mean=True, weights=cfg.loss),
        "wins": int(sum(r["two_stage_wins"] for r in per_seed)),
        "seeds": per_seed,
    }
    result = StudyResult("two-stage", summary, rows)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["seed", "variant", "step", "stage", "loss", "align", "fusion"]
        for seed in seeds:
            seed_rows = [r for r in rows if r["seed"] == seed]
            result.files.append(_write_csv(out / f"two_stage_curves_seed{seed}.csv", seed_rows, cols))
            series = {n: [(r["step"], r["fusion"]) for r in seed_rows if r["variant"] == n] for n in variants}
            result.files.append(plotting.loss_curves(
                series, out / f"two_stage_curves_seed{seed}.png", f"seed {seed}", marks=[ab.align_steps]))
            v, i = _pair_images(test)
            imgs = [v, i] + [_fused_image(nets[(seed, n)], v, i, path) for n in variants]
            result.files.append(plotting.image_grid(
                imgs, ["visible", "infrared", *variants], out / f"two_stage_images_seed{seed}.png"))
        result.files.append(_write_json(out / "two_stage_summary.json", summary))
    return result


def hierarchy_study(train: PairSet, test: PairSet, base: FusionNet, cfg: RunConfig,
                    seeds=None, out=None) -> StudyResult:
    """Hierarchical training with the CFM frozen during the MFM phase vs kept
    active. For the frozen variant, CFM arrays are compared bit for bit with
    their end-of-CFM-phase snapshot after every MFM step."""
    seeds = list(cfg.ablation.seeds[:3] if seeds is None else seeds)
    mean_base = fusion_loss_on(test, base, mean=True, weights=cfg.loss)
    rows, per_seed, nets = [], [], {}
    for seed in seeds:
        res = {"seed": seed}
        for name, freeze in (("frozen", True), ("active", False)):
            net = _fresh_copy(base, seed, cfg.fusion_init)
            snap, checks = {}, []
            log_every = cfg.plans["mfm"].log_every

            def on_step(phase, t, n, snap=snap, checks=checks):
                if phase == "cfm" and t == cfg.plans["cfm"].total_steps - 1:
                    snap.update(n.group_state("cfm"))
                elif phase == "mfm" and (t % log_every == 0 or t == cfg.plans["mfm"].total_steps - 1):
                    now = n.group_state("cfm")
                    checks.append(all(torch.equal(snap[k], now[k]) for k in snap))

            net, tlog = hierarchical_train(
                train, net, cfg.plan("cfm", seed=seed), cfg.plan("mfm", seed=seed), cfg.loss, on_step, freeze_cfm=freeze)
            for r in tlog.records:
                rows.append({"seed": seed, "variant": name, **{k: r[k] for k in ("step", "phase", "stage", "loss", "align", "fusion")}})
            v, i = eval_pairs(test, net)
            with torch.no_grad():
                full = torch.cat([net(v[k:k + 1], i[k:k + 1]) for k in range(v.shape[0])])
                cfm_only = torch.cat([net(v[k:k + 1], i[k:k + 1], "cfm") for k in range(v.shape[0])])
            res[name] = {
                "test_fusion": fusion_loss_on(test, net, "full", cfg.loss),
                "cfm_only_test_fusion": fusion_loss_on(test, net, "cfm", cfg.loss),
                "mfm_vs_cfm_mean_abs_diff": float((full - cfm_only).abs().mean()),
                "cfm_bit_identical_steps": int(sum(checks)),
                "cfm_checked_steps": len(checks),
                "cfm_bit_identical": bool(checks) and all(checks),
            }
            nets[(seed, name)] = net
        res["below_mean_baseline"] = res["frozen"]["test_fusion"] <= mean_base
        per_seed.append(res)
        log.info("hierarchy seed %d: %s", seed, res)
    frozen = [r["frozen"]["test_fusion"] for r in per_seed]
    summary = {
        "mean_baseline_test_fusion": mean_base,
        "median_frozen_test_fusion": float(np.median(frozen)),
        "median_active_test_fusion": float(np.median([r["active"]["test_fusion"] for r in per_seed])),
        "seeds": per_seed,
    }
    result = StudyResult("hierarchy", summary, rows)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["seed", "variant", "step", "phase", "stage", "loss", "align", "fusion"]
        result.files.append(_write_csv(out / "hierarchy_curves.csv", rows, cols))
        for seed in seeds:
            series = {n: [(r["step"], r["fusion"]) for r in rows if r["seed"] == seed and r["variant"] == n]
                      for n in ("frozen", "active")}
            result.files.append(plotting.loss_curves(
                series, out / f"hierarchy_curves_seed{seed}.png", f"seed {seed}",
                marks=[cfg.plans["cfm"].total_steps]))
            v, i = _pair_images(test)
            imgs = [v, i, _fused_image(nets[(seed, "frozen")], v, i, "cfm")]
            imgs += [_fused_image(nets[(seed, n)], v, i) for n in ("frozen", "active")]
            result.files.append(plotting.image_grid(
                imgs, ["visible", "infrared", "CFM only", "CFM frozen", "CFM active"],
                out / f"hierarchy_images_seed{seed}.png"))
        result.files.append(_write_json(out / "hierarchy_summary.json", summary))
    return result


def _lap_against_sources(f: Image, v: Image, i: Image) -> float:
    t = [torch.as_tensor(x.to_range("unit").gray)[None, None] for x in (f, v, i)]
    return float(fusion_components(*t)["lap"])


def _total_against_sources(f: Image, v: Image, i: Image, weights) -> float:
    t = [torch.as_tensor(x.to_range("unit").gray)[None, None] for x in (f, v, i)]
    return float(loss_fusion_total(*t, weights)[0])


def feature_probe_study(pairs: PairSet, net: FusionNet, cfg: RunConfig, n_pairs: int | None = None,
                        out=None) -> StudyResult:
    """Pixel-domain max vs feature-domain max (after the full encoder), scored
    by the Laplacian term against the sources, plus a layer sweep of mean and
    max feature fusion on the first pair."""
    n = min(len(pairs), n_pairs or cfg.ablation.probe_pairs)
    depth = net.cfg.encoder_depth
    rows = []
    for rec in pairs.records[:n]:
        v, i = Image(pairs.load(rec)[0]), Image(pairs.load(rec)[1])
        pix = max_fuse(v, i)
        feat = probe_feature_fusion(v, i, net, depth, "max")
        mean = probe_feature_fusion(v, i, net, depth, "mean")
        rows.append({
            "name": rec.stem,
            "pixel_max_lap": _lap_against_sources(pix, v, i),
            "feature_max_lap": _lap_against_sources(feat, v, i),
            "feature_mean_lap": _lap_against_sources(mean, v, i),
            "pixel_max_total": _total_against_sources(pix, v, i, cfg.loss),
            "feature_max_total": _total_against_sources(feat, v, i, cfg.loss),
            "feature_max_mean_intensity": float(feat.gray.mean()),
            "pixel_max_mean_intensity": float(pix.gray.mean()),
        })
    med = {k: float(np.median([r[k] for r in rows])) for k in rows[0] if k != "name"}
    summary = {
        "pairs": n,
        "layer": depth,
        "medians": med,
        "feature_max_lap_lower": med["feature_max_lap"] < med["pixel_max_lap"],
    }
    result = StudyResult("feature-probe", summary, rows)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        result.files.append(_write_csv(out / "probe_pairs.csv", rows, list(rows[0])))
        v, i = (Image(a) for a in pairs.load(pairs.records[0]))
        for mode in ("mean", "max"):
            sweep = probe_layer_sweep(v, i, net, mode)
            for k, img in enumerate(sweep):
                p = out / f"probe_{mode}_layer{k}.png"
                write_image(p, img)
                result.files.append(p)
            result.files.append(plotting.image_grid(
                sweep, [f"{mode} @ layer {k}" for k in range(len(sweep))], out / f"probe_{mode}_sweep.png"))
        result.files.append(plotting.image_grid(
            [v, i, max_fuse(v, i), probe_feature_fusion(v, i, net, depth, "max")],
            ["visible", "infrared", "pixel max", "feature max"], out / "probe_max_compare.png"))
        result.files.append(_write_json(out / "probe_summary.json", summary))
    return result
