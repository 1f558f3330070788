"""Command-line entry point.

Checkpoints live under ``paths.checkpoint_dir`` in one directory per stage:

    mae/      encoder after masked-autoencoder pretraining (or just initialised)
    decoder/  encoder + decoder, both frozen
    cfm/      after guided CFM training, CFM frozen
    fusion/   after guided MFM training or the full hierarchical schedule

Logs (JSON lines) and the resolved config echo go to ``paths.output_dir``.

Exit codes: 0 ok, 2 config error, 3 missing prerequisite artifact,
4 data mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import ablation, plotting
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import RunConfig, load_config
from .data import PairRecord, scan_pairs, synth_pairs
from .errors import ConfigError, DataError, FusionError, ImageIOError, MissingArtifact, ShapeError, WeightImportError
from .imaging import center_crop, luma, read_image, write_image
from .metrics import evaluate
from .model import FusionNet, fuse_images
from .training import TrainLog, fusion_loss_on, guided_train, hierarchical_train, pretrain_decoder, pretrain_encoder_mae

log = logging.getLogger("ivfuse")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# helpers

def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if getattr(args, "data", None):
        cfg = replace(cfg, paths=replace(cfg.paths, data_root=args.data))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ckpt(cfg: RunConfig, stage: str) -> Path:
    return Path(cfg.paths.checkpoint_dir) / stage


def _require(cfg: RunConfig, stage: str, frozen=()) -> FusionNet:
    path = _ckpt(cfg, stage)
    if not (path / "manifest.json").is_file():
        raise MissingArtifact(f"missing prerequisite checkpoint: {path}")
    net = load_checkpoint(path)
    if net.cfg != cfg.model:
        raise ConfigError(f"checkpoint {path} was built with a different model config")
    loose = [g for g in frozen if not net.is_frozen(g)]
    if loose:
        raise MissingArtifact(f"checkpoint {path} has unfrozen prerequisite groups: {', '.join(loose)}")
    return net


def _splits(cfg: RunConfig):
    pairs = scan_pairs(cfg.paths.data_root)
    train, test = pairs.split("train"), pairs.split("test")
    if not len(train):
        raise DataError(f"no training pairs under {cfg.paths.data_root}")
    return train, (test if len(test) else train)


def _write_log(tlog: TrainLog, path: Path, append=False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tlog.write_jsonl(path, append=append)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    pairs = synth_pairs(args.n, args.size, args.seed, args.out, n_test=args.n_test, glare=args.glare,
                        patch=args.patch)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    cfg.write(out / f"config.pretrain-{args.stage}.json")
    log_path = out / "logs" / f"pretrain_{args.stage}.jsonl"
    start = 0
    if args.stage == "mae":
        if args.resume:
            net = _require(cfg, "mae")
            start = _next_step(log_path)
        else:
            net = FusionNet(cfg.model, seed=cfg.seed, fusion_init=cfg.fusion_init)
        plan = cfg.plan("mae")
        if plan.total_steps:
            train, _ = _splits(cfg)
            net, tlog = pretrain_encoder_mae(train, net, replace(plan, seed=plan.seed + start), start_step=start)
        else:
            tlog = TrainLog()
        net.freeze("encoder")
        save_checkpoint(net, _ckpt(cfg, "mae"), extra={"stage": "mae", "steps": start + plan.total_steps})
    else:
        if args.resume:
            net = _require(cfg, "decoder", frozen=("encoder",))
            start = _next_step(log_path)
        else:
            net = _require(cfg, "mae")
            net.freeze("encoder")
        plan = cfg.plan("decoder")
        train, _ = _splits(cfg)
        net, tlog = pretrain_decoder(train, net, replace(plan, seed=plan.seed + start), start_step=start)
        net.freeze("decoder")
        save_checkpoint(net, _ckpt(cfg, "decoder"), extra={"stage": "decoder", "steps": start + plan.total_steps})
    _write_log(tlog, log_path, append=args.resume)
    print(f"{args.stage}: {len(tlog.records)} log records, checkpoint {_ckpt(cfg, args.stage)}")
    return EXIT_OK


def _next_step(log_path: Path) -> int:
    if not log_path.is_file():
        raise MissingArtifact(f"cannot resume without a log at {log_path}")
    recs = TrainLog.read_jsonl(log_path).records
    return recs[-1]["step"] + 1 if recs else 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    tag = "hierarchical" if args.hierarchical else args.target
    cfg.write(out / f"config.train-{tag}.json")
    train, test = _splits(cfg)
    if args.hierarchical:
        net = _require(cfg, "decoder", frozen=("encoder", "decoder"))
        net, tlog = hierarchical_train(train, net, cfg.plan("cfm"), cfg.plan("mfm"), cfg.loss)
        dest, path = "fusion", "full"
    elif args.target == "cfm":
        net = _require(cfg, "decoder", frozen=("encoder", "decoder"))
        net, tlog = guided_train(train, net, cfg.plan("cfm"), cfg.loss)
        net.freeze("cfm")
        dest, path = "cfm", "cfm"
    else:
        net = _require(cfg, "cfm", frozen=("encoder", "decoder", "cfm"))
        net, tlog = guided_train(train, net, cfg.plan("mfm"), cfg.loss)
        dest, path = "fusion", "full"
    if dest == "fusion":
        net.freeze("mfm", "ffn")
    save_checkpoint(net, _ckpt(cfg, dest), extra={"stage": tag})
    _write_log(tlog, out / "logs" / f"train_{tag}.jsonl")
    summary = {
        "stage": tag,
        "test_fusion": fusion_loss_on(test, net, path, cfg.loss),
        "mean_baseline_test_fusion": fusion_loss_on(test, net, mean=True, weights=cfg.loss),
    }
    (out / f"train_{tag}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    series = {tag: [(r["step"], r["fusion"]) for r in tlog.records]}
    plotting.loss_curves(series, out / f"train_{tag}_curve.png", tag)
    print(json.dumps(summary))
    return EXIT_OK


def _match_inputs(vi: Path, ir: Path) -> list[PairRecord]:
    if vi.is_file() and ir.is_file():
        return [PairRecord(vi.stem, vi, ir)]
    if vi.is_dir() and ir.is_dir():
        vs = {p.stem: p for p in vi.glob("*.png")}
        irs = {p.stem: p for p in ir.glob("*.png")}
        unmatched = sorted(vs.keys() ^ irs.keys())
        if unmatched or not vs:
            raise DataError(f"unmatched stems: {', '.join(unmatched) or '(no images found)'}")
        return [PairRecord(s, vs[s], irs[s]) for s in sorted(vs)]
    for p in (vi, ir):
        if not p.exists():
            raise ImageIOError(f"no such file or directory: {p}")
    raise DataError("--vi and --ir must both be files or both be directories")


def cmd_fuse(args) -> int:
    ckpt = Path(args.checkpoint)
    read_manifest(ckpt)
    net = load_checkpoint(ckpt)
    recs = _match_inputs(Path(args.vi), Path(args.ir))
    batch = Path(args.vi).is_dir()
    out = Path(args.out)
    (out if batch else out.parent).mkdir(parents=True, exist_ok=True)
    color = "ycbcr" if args.color == "ycbcr-reattach" else "gray"
    for rec in recs:
        v, i = read_image(rec.path_v), read_image(rec.path_i)
        if v.shape != i.shape:
            raise DataError(f"{rec.stem}: visible {v.shape} and infrared {i.shape} differ")
        v, i = center_crop(v, net.cfg.patch), center_crop(luma(i), net.cfg.patch)
        fused = fuse_images(v, i, net, color=color)
        write_image(out / f"{rec.stem}.png" if batch else out, fused)
    print(f"fused {len(recs)} pair(s) into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate(args.vi, args.ir, args.fused, method=args.method)
    pc, pj = report.write(args.out_report)
    plotting.metric_bars({args.method or "fused": report.aggregate}, Path(args.out_report).with_suffix(".png"))
    print(json.dumps(report.aggregate))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg) / "ablate" / args.study
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    base = _require(cfg, "decoder", frozen=("encoder", "decoder"))
    train, test = _splits(cfg)
    if args.study == "two-stage":
        res = ablation.two_stage_study(train, test, base, cfg, out=out)
    elif args.study == "hierarchy":
        res = ablation.hierarchy_study(train, test, base, cfg, out=out)
    else:
        pairs = scan_pairs(cfg.paths.data_root)
        res = ablation.feature_probe_study(pairs, base, cfg, out=out)
    print(f"{res.name}: {len(res.files)} files in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="ivfuse", description="Infrared/visible image fusion.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", default=None, help="JSON run config, merged over the preset")
        sp.add_argument("--preset", default="desk", choices=["desk", "default"], help="base settings")
        sp.add_argument("--data", default=None, help="override paths.data_root")
        return sp

    s = sub.add_parser("synth", help="generate a synthetic pair corpus", formatter_class=fmt)
    s.add_argument("--n", type=int, default=200, help="number of pairs")
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--out", default="data", help="output root (vi/ and ir/ are created)")
    s.add_argument("--n-test", type=int, default=20, help="pairs tagged as held-out test")
    s.add_argument("--glare", action="store_true", help="add an overexposed patch to each visible image")
    s.add_argument("--patch", type=int, default=8, help="size must be a multiple of this")
    s.set_defaults(func=cmd_synth)

    s = with_config(sub.add_parser("pretrain", help="MAE or decoder pretraining", formatter_class=fmt))
    s.add_argument("--stage", required=True, choices=["mae", "decoder"], help="which stage to run")
    s.add_argument("--resume", action="store_true", help="continue from this stage's checkpoint and log")
    s.set_defaults(func=cmd_pretrain)

    s = with_config(sub.add_parser("train", help="guided fusion-layer training", formatter_class=fmt))
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--hierarchical", action="store_true", help="CFM, freeze, then MFM")
    g.add_argument("--target", choices=["cfm", "mfm"], help="train a single module")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fuse", help="fuse image pairs with a checkpoint", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="checkpoint directory")
    s.add_argument("--vi", required=True, help="visible PNG or directory")
    s.add_argument("--ir", required=True, help="infrared PNG or directory")
    s.add_argument("--out", required=True, help="output PNG (single pair) or directory (batch)")
    s.add_argument("--color", default="gray", choices=["gray", "ycbcr-reattach"], help="output colour handling")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("eval", help="score fused images", formatter_class=fmt)
    s.add_argument("--vi", required=True, help="visible directory")
    s.add_argument("--ir", required=True, help="infrared directory")
    s.add_argument("--fused", required=True, help="fused directory")
    s.add_argument("--out-report", required=True, help="report path stem; .csv, .json and .png are written")
    s.add_argument("--method", default="", help="method tag stored in the report")
    s.set_defaults(func=cmd_eval)

    s = with_config(sub.add_parser("ablate", help="ablation studies", formatter_class=fmt))
    s.add_argument("--study", required=True, choices=["two-stage", "hierarchy", "feature-probe"], help="study")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        code, msg = EXIT_CONFIG, exc
    except (MissingArtifact, WeightImportError) as exc:
        code, msg = EXIT_MISSING, exc
    except (DataError, ImageIOError) as exc:
        code, msg = EXIT_DATA, exc
    except FusionError as exc:
        code, msg = EXIT_CONFIG, exc
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
