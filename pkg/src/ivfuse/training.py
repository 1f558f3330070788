"""Training regimes: masked-autoencoder pretraining, decoder pretraining,
two-stage guided training of a fusion module, and the hierarchical
CFM-then-MFM schedule.

Every loop is seeded from its plan: batch order, crops, masks and any torch
randomness are reproducible, and only the target groups are handed to the
optimizer, so frozen groups never change.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch

from .data import PairSet, batch_stream
from .errors import ConfigError, DataError
from .imaging import patchify_t
from .losses import LossWeights, loss_align, loss_decoder, loss_fusion_total, masked_patch_l1
from .model import FusionNet, random_mask

log = logging.getLogger(__name__)

Target = Literal["encoder_mae", "decoder", "cfm", "mfm"]

TRAINABLE = {
    "encoder_mae": ("encoder", "decoder"),
    "decoder": ("decoder",),
    "cfm": ("cfm",),
    "mfm": ("mfm", "ffn"),
}


@dataclass
class TrainPlan:
    target: Target = "cfm"
    total_steps: int = 100
    align_steps: int = 20
    lr: float = 1e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    batch: int = 4
    seed: int = 0
    optimizer: Literal["adamw"] = "adamw"
    log_every: int = 1
    crop: int | None = None
    random_crop: bool = True

    def __post_init__(self):
        if self.target not in TRAINABLE:
            raise ConfigError(f"unknown training target {self.target!r}")
        if not 0 <= self.align_steps <= self.total_steps:
            raise ConfigError(f"need 0 <= align_steps ({self.align_steps}) <= total_steps ({self.total_steps})")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.batch < 1 or self.lr <= 0 or self.log_every < 1:
            raise ConfigError("batch, lr and log_every must be positive")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    checkpoint: str | None = None

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("step index must increase")
        self.records.append(record)

    def losses(self, key: str = "loss") -> list[float]:
        return [r[key] for r in self.records]

    def stages(self) -> list[str]:
        return [r["stage"] for r in self.records]

    def extend(self, other: "TrainLog", offset: int = 0, **tags) -> None:
        for r in other.records:
            self.append({**r, "step": r["step"] + offset, **tags})

    def write_jsonl(self, path, append: bool = False, timing: bool = False) -> None:
        """One JSON object per record. Wall time is left out unless ``timing``,
        so logs of identical runs are byte-identical."""
        with open(path, "a" if append else "w") as fh:
            for r in self.records:
                if not timing:
                    r = {k: v for k, v in r.items() if k != "wall_time"}
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out


def make_optimizer(params, plan: TrainPlan) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        params, lr=plan.lr, betas=plan.betas, weight_decay=plan.weight_decay, foreach=False
    )


def _prepare(net: FusionNet, plan: TrainPlan, data: PairSet, extra=()):
    if not len(data):
        raise DataError("training corpus is empty")
    groups = TRAINABLE[plan.target] + tuple(extra)
    for name in groups:
        net.unfreeze(name)
    params = [p for name in groups for p in net.group(name).parameters()]
    torch.manual_seed(plan.seed)
    crop = plan.crop or min(data.load(data.records[0])[0].shape)
    stream = batch_stream(data, plan.batch, plan.seed, crop, random_crop=plan.random_crop, patch=net.cfg.patch)
    return make_optimizer(params, plan), stream


def _tensor(a, net):
    return torch.as_tensor(a, dtype=next(net.parameters()).dtype)


def _record(step, stage, loss, start, **extra):
    rec = {"step": step, "stage": stage, "loss": float(loss), "wall_time": round(time.perf_counter() - start, 6)}
    rec.update({k: float(v) for k, v in extra.items()})
    return rec


def _run(net, plan, data, step_fn, start_step=0, on_step=None, extra=()) -> TrainLog:
    opt, stream = _prepare(net, plan, data, extra)
    tlog = TrainLog()
    start = time.perf_counter()
    net.train()
    for t in range(plan.total_steps):
        _, v, i = next(stream)
        stage, loss, extra = step_fn(t, _tensor(v, net), _tensor(i, net))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if t % plan.log_every == 0 or t == plan.total_steps - 1:
            tlog.append(_record(start_step + t, stage, loss.item(), start, **extra))
        if on_step is not None:
            on_step(t, net)
    net.eval()
    return tlog


# ---------------------------------------------------------------------------

def mae_step(net: FusionNet, x: torch.Tensor, mask_ratio: float, rng: np.random.Generator):
    """Masked reconstruction loss for a batch of (B, 1, H, W) images."""
    pix, grid = patchify_t(x, net.cfg.patch)
    b, n = pix.shape[:2]
    plans = [random_mask(n, mask_ratio, int(rng.integers(2**31))) for _ in range(b)]
    keep = torch.as_tensor(np.stack([p.kept_indices for p in plans]))
    flags = torch.as_tensor(np.stack([p.mask_flags for p in plans]))
    tokens, _ = net.encoder(x, keep_idx=keep)
    if net.cfg.use_cls:
        tokens = tokens[:, 1:]
    full = net.decoder.fill_masked(tokens, keep, n)
    out = net.decoder(full, grid)
    pred, _ = patchify_t(out, net.cfg.patch)
    return masked_patch_l1(pred, pix, flags)


def pretrain_encoder_mae(data: PairSet, net: FusionNet, plan: TrainPlan, start_step: int = 0):
    """Masked-autoencoder pretraining of encoder and decoder on both modalities.

    Loss is mean |.| over masked patches; with ``mask_ratio == 0`` it is the
    plain full-image autoencoding loss.
    """
    if plan.target != "encoder_mae":
        raise ConfigError("pretrain_encoder_mae needs target='encoder_mae'")
    rng = np.random.default_rng([plan.seed, 1])

    def step(t, v, i):
        return "mae", mae_step(net, torch.cat([v, i]), net.cfg.mask_ratio, rng), {}

    return net, _run(net, plan, data, step, start_step)


def pretrain_decoder(data: PairSet, net: FusionNet, plan: TrainPlan, start_step: int = 0):
    """Train the decoder to reconstruct images from frozen encoder features."""
    if plan.target != "decoder":
        raise ConfigError("pretrain_decoder needs target='decoder'")
    if not net.is_frozen("encoder"):
        raise ConfigError("the encoder must be frozen before decoder pretraining")

    def step(t, v, i):
        x = torch.cat([v, i])
        return "recon", loss_decoder(net.reconstruct(x), x), {}

    return net, _run(net, plan, data, step, start_step)


def guided_train(
    data: PairSet,
    net: FusionNet,
    plan: TrainPlan,
    weights: LossWeights = LossWeights(),
    start_step: int = 0,
    on_step: Callable | None = None,
    cfm_active: bool = False,
):
    """Two-stage training of the CFM or the MFM (+FFN).

    Steps ``t < align_steps`` pull the module's output features towards the
    mean of the two encodings; later steps minimise the fusion loss of the
    decoded image. For ``target='cfm'`` the CFM output is decoded directly.
    Every record carries the decoded fusion loss and its components, also
    during alignment, so the two stages can be plotted on one axis.

    ``cfm_active=True`` (MFM target only) keeps the CFM trainable alongside
    the MFM instead of requiring it frozen.
    """
    if plan.target not in ("cfm", "mfm"):
        raise ConfigError("guided_train needs target 'cfm' or 'mfm'")
    if cfm_active and plan.target != "mfm":
        raise ConfigError("cfm_active only applies to target 'mfm'")
    required = ["encoder", "decoder"] + (["cfm"] if plan.target == "mfm" and not cfm_active else [])
    loose = [g for g in required if not net.is_frozen(g)]
    if loose:
        raise ConfigError(f"groups must be frozen before guided training: {', '.join(loose)}")
    path = "cfm" if plan.target == "cfm" else "full"

    def step(t, v, i):
        with torch.no_grad():
            phi_v, grid = net.encode(v)
            phi_i, _ = net.encode(i)
        fused = net.fuse(phi_i, phi_v, path)
        align = t < plan.align_steps
        if align:
            loss = loss_align(fused, phi_i, phi_v)
            with torch.no_grad():
                total, comp = loss_fusion_total(net.decode(fused, grid), v, i, weights)
            extra = {"align": loss.item()}
        else:
            total, comp = loss_fusion_total(net.decode(fused, grid), v, i, weights)
            loss = total
            with torch.no_grad():
                extra = {"align": loss_align(fused, phi_i, phi_v).item()}
        extra.update(fusion=total.item(), int=comp["int"].item(), grad=comp["grad"].item(), lap=comp["lap"].item())
        return ("align" if align else "fusion"), loss, extra

    also = ("cfm",) if cfm_active else ()
    return net, _run(net, plan, data, step, start_step, on_step, also)


def hierarchical_train(
    data: PairSet,
    net: FusionNet,
    cfm_plan: TrainPlan,
    mfm_plan: TrainPlan,
    weights: LossWeights = LossWeights(),
    on_step: Callable | None = None,
    freeze_cfm: bool = True,
):
    """Guided CFM training, then freeze the CFM, then guided MFM training.

    Records are merged with continuous step numbering and a ``phase`` tag.
    ``on_step(phase, t, net)`` is called after every optimizer step. With
    ``freeze_cfm=False`` the CFM keeps training during the MFM phase.
    """
    for g in ("encoder", "decoder"):
        if not net.is_frozen(g):
            raise ConfigError(f"{g} must be pretrained and frozen before hierarchical training")
    merged = TrainLog()
    cb = (lambda phase: (lambda t, n: on_step(phase, t, n))) if on_step else (lambda phase: None)
    _, log_cfm = guided_train(data, net, cfm_plan, weights, on_step=cb("cfm"))
    merged.extend(log_cfm, phase="cfm")
    net.set_frozen("cfm", freeze_cfm)
    _, log_mfm = guided_train(
        data, net, mfm_plan, weights, start_step=cfm_plan.total_steps, on_step=cb("mfm"), cfm_active=not freeze_cfm
    )
    merged.extend(log_mfm, phase="mfm")
    return net, merged


# ---------------------------------------------------------------------------
# evaluation helpers shared by the CLI, ablations and acceptance suite

def eval_pairs(data: PairSet, net: FusionNet, crop: int | None = None):
    """Stacked (v, i) tensors of every record, centre-cropped."""
    vs, irs = [], []
    for rec in data.records:
        v, i = data.load(rec)
        c = crop or min(v.shape)
        top, left = (v.shape[0] - c) // 2, (v.shape[1] - c) // 2
        vs.append(v[top:top + c, left:left + c])
        irs.append(i[top:top + c, left:left + c])
    return _tensor(np.stack(vs)[:, None], net), _tensor(np.stack(irs)[:, None], net)


@torch.no_grad()
def fusion_loss_on(data: PairSet, net: FusionNet, path="full", weights: LossWeights = LossWeights(), mean=False) -> float:
    """Mean fusion loss of decoded outputs over a pair set (per-pair average)."""
    v, i = eval_pairs(data, net)
    vals = []
    for k in range(v.shape[0]):
        vk, ik = v[k:k + 1], i[k:k + 1]
        f = net.mean_fusion(vk, ik) if mean else net(vk, ik, path)
        vals.append(loss_fusion_total(f, vk, ik, weights)[0].item())
    return float(np.mean(vals))


@torch.no_grad()
def reconstruction_psnr(data: PairSet, net: FusionNet, modality: Literal["vi", "ir", "both"] = "vi") -> list[float]:
    """Per-image PSNR (dB, unit peak) of clamped decode(encode(x))."""
    v, i = eval_pairs(data, net)
    x = {"vi": v, "ir": i, "both": torch.cat([v, i])}[modality]
    out = []
    for k in range(x.shape[0]):
        y = net.reconstruct(x[k:k + 1]).clamp(0.0, 1.0)
        mse = ((y - x[k:k + 1]) ** 2).mean().item()
        out.append(10.0 * np.log10(1.0 / max(mse, 1e-10)))
    return out
