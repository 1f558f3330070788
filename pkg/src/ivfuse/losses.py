"""Training objectives.

All losses take torch tensors in unit range and reduce by the mean over
elements, so gradient scales do not depend on image size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError
from .imaging import laplacian_t, sobel_t


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # gradient term
    beta: float = 2.0  # laplacian term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self}")


def _same_shape(*xs):
    first = xs[0].shape
    for x in xs[1:]:
        if x.shape != first:
            raise ShapeError(f"shape mismatch: {tuple(first)} vs {tuple(x.shape)}")


def loss_decoder(recon: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error."""
    _same_shape(recon, original)
    return (recon - original).abs().mean()


def fusion_components(f, v, i) -> dict[str, torch.Tensor]:
    """Intensity, Sobel-gradient and Laplacian terms of the fusion loss.

    Each term compares the fused image (or its operator response) with the
    element-wise maximum of the two sources' values.
    """
    _same_shape(f, v, i)
    l_int = (f - torch.maximum(v, i)).abs().mean()
    l_grad = (sobel_t(f) - torch.maximum(sobel_t(v), sobel_t(i))).abs().mean()
    l_lap = (laplacian_t(f) - torch.maximum(laplacian_t(v), laplacian_t(i))).abs().mean()
    return {"int": l_int, "grad": l_grad, "lap": l_lap}


def loss_fusion_total(f, v, i, w: LossWeights = LossWeights()):
    """Return ``(total, components)`` with total = int + alpha*grad + beta*lap."""
    c = fusion_components(f, v, i)
    total = c["int"] + w.alpha * c["grad"] + w.beta * c["lap"]
    return total, c


def loss_align(phi_out, phi_i, phi_v) -> torch.Tensor:
    """MSE between fused features and the mean of the two source features."""
    _same_shape(phi_out, phi_i, phi_v)
    return ((phi_out - 0.5 * (phi_i + phi_v)) ** 2).mean()


def masked_patch_l1(pred_tokens, target_tokens, mask_flags) -> torch.Tensor:
    """Mean |pred - target| over masked patches only.

    ``mask_flags`` is (B, n) with 1 at masked positions. With nothing masked
    the loss falls back to the full-image mean.
    """
    _same_shape(pred_tokens, target_tokens)
    err = (pred_tokens - target_tokens).abs().mean(dim=-1)
    m = mask_flags.to(err)
    if m.sum() == 0:
        return err.mean()
    return (err * m).sum() / m.sum()
