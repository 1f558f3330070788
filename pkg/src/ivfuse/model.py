"""The fusion network.

A ViT encoder shared by both modalities, a two-part fusion layer (a
comparative module built from symmetric cross-attention and a merging module
guided by the comparative output), a two-layer feed-forward residual, and a
shallow ViT decoder that maps tokens back to pixels.

Tensors inside the network are ``(batch, tokens, dim)``; the public helpers at
the bottom of the file speak :class:`~ivfuse.imaging.Image`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericalError, ShapeError
from .imaging import GridShape, Image, convert_colorspace, grid_for, luma, patchify_t, unpatchify_t

GROUPS = ("encoder", "cfm", "mfm", "ffn", "decoder")


@dataclass
class ModelConfig:
    patch: int = 8
    embed_dim: int = 128
    encoder_depth: int = 4
    decoder_depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    use_cls: bool = False
    mask_ratio: float = 0.75

    def __post_init__(self):
        problems = []
        if self.embed_dim % self.heads:
            problems.append(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            problems.append("embed_dim must be divisible by 4 for 2-D sin-cos positions")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            problems.append("encoder_depth and decoder_depth must be >= 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            problems.append(f"mask_ratio {self.mask_ratio} outside [0, 1)")
        if self.patch < 1:
            problems.append("patch must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        """MAE-large sized encoder (24 blocks, 1024 wide, 16-pixel patches)."""
        base = dict(patch=16, embed_dim=1024, encoder_depth=24, heads=16)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (n, d) or (B, n, d); CLS first when has_cls
    grid: GridShape
    has_cls: bool = False

    def __post_init__(self):
        n = self.tokens.shape[-2] - int(self.has_cls)
        if n != self.grid.n:
            raise ShapeError(f"{n} spatial tokens do not match grid {self.grid}")
        if not torch.isfinite(self.tokens).all():
            raise NumericalError("token sequence contains non-finite entries")


@dataclass
class MaskPlan:
    kept_indices: np.ndarray
    mask_flags: np.ndarray  # 1 = masked

    @property
    def n(self) -> int:
        return len(self.mask_flags)


def random_mask(n: int, mask_ratio: float, seed: int) -> MaskPlan:
    """Uniformly choose ``round((1 - mask_ratio) * n)`` tokens to keep."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio {mask_ratio} outside [0, 1)")
    n_keep = int(round((1.0 - mask_ratio) * n))
    perm = np.random.default_rng(seed).permutation(n)
    kept = np.sort(perm[:n_keep])
    flags = np.ones(n, dtype=np.int64)
    flags[kept] = 0
    return MaskPlan(kept, flags)


def sincos_pos_embed(grid: GridShape, dim: int) -> torch.Tensor:
    """Fixed 2-D sine-cosine position table, (rows*cols, dim), row-major."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def axis(pos):
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rr, cc = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    table = np.concatenate([axis(rr.ravel()), axis(cc.ravel())], axis=1)
    return torch.from_numpy(table)


# ---------------------------------------------------------------------------
# building blocks

class Attention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v/o maps.

    Self-attention when called with one source, cross-attention otherwise.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, xq, xkv=None, return_weights=False):
        if xkv is None:
            xkv = xq
        if xq.shape[-1] != xkv.shape[-1] or xq.shape[0] != xkv.shape[0]:
            raise ShapeError(f"query {tuple(xq.shape)} and key/value {tuple(xkv.shape)} do not match")
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(xq.shape)
        out = self.o(out)
        return (out, weights) if return_weights else out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: t += MHA(LN t); t += MLP(LN t)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, t):
        if not torch.isfinite(t).all():
            raise NumericalError("non-finite input to transformer block")
        t = t + self.attn(self.norm1(t))
        return t + self.mlp(self.norm2(t))


class CrossBlock(nn.Module):
    """Pre-norm cross-attention with a residual on the query stream."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)

    def attend(self, q, kv):
        return self.attn(self.norm_q(q), self.norm_kv(kv))

    def forward(self, q, kv):
        return q + self.attend(q, kv)


# ---------------------------------------------------------------------------
# network parts

class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d)) if cfg.use_cls else None
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, x, keep_idx=None, depth=None):
        """Encode (B, 1, H, W) images.

        ``keep_idx`` (B, k) restricts the sequence to kept tokens (masked
        pretraining); ``depth`` stops after that many blocks.
        """
        depth = len(self.blocks) if depth is None else depth
        pix, grid = patchify_t(x, self.cfg.patch)
        t = self.patch_embed(pix) + sincos_pos_embed(grid, self.cfg.embed_dim).to(pix)
        if keep_idx is not None:
            t = torch.gather(t, 1, keep_idx[..., None].expand(-1, -1, t.shape[-1]))
        if self.cls_token is not None:
            t = torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], dim=1)
        for blk in self.blocks[:depth]:
            t = blk(t)
        return self.norm(t), grid


class CFM(nn.Module):
    """Comparative fusion: one cross-attention block applied in both
    directions (weights tied, so the two branches are symmetric), the branch
    outputs averaged, then an MLP residual."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cross = CrossBlock(d, cfg.heads)
        self.norm = nn.LayerNorm(d)
        self.mlp = Mlp(d, int(d * cfg.mlp_ratio))

    def forward(self, phi_i, phi_v):
        _check_pair(phi_i, phi_v)
        a = self.cross(phi_i, phi_v)
        b = self.cross(phi_v, phi_i)
        phi_d = 0.5 * (a + b)
        return phi_d + self.mlp(self.norm(phi_d))


class MFM(nn.Module):
    """Merging fusion: the comparative output queries each modality; a
    per-token softmax over cosine similarities decides how much of each
    attention read-out is added back."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cross_v = CrossBlock(d, cfg.heads)
        self.cross_i = CrossBlock(d, cfg.heads)

    @staticmethod
    def gates(phi_i, phi_v, phi_d):
        sim = torch.stack(
            [F.cosine_similarity(phi_d, phi_v, dim=-1), F.cosine_similarity(phi_d, phi_i, dim=-1)],
            dim=-1,
        )
        g = torch.softmax(sim, dim=-1)
        return g[..., 0:1], g[..., 1:2]

    def forward(self, phi_i, phi_v, phi_d):
        _check_pair(phi_i, phi_v)
        _check_pair(phi_d, phi_v)
        g_v, g_i = self.gates(phi_i, phi_v, phi_d)
        a_v = self.cross_v.attend(phi_d, phi_v)
        a_i = self.cross_i.attend(phi_d, phi_i)
        return phi_d + g_v * a_v + g_i * a_i


class FFN(nn.Module):
    """Two fully connected layers with a GELU between them."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mlp = Mlp(cfg.embed_dim, int(cfg.embed_dim * cfg.mlp_ratio))

    def forward(self, x):
        return self.mlp(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth))
        self.norm = nn.LayerNorm(d)
        self.pred = nn.Linear(d, cfg.patch * cfg.patch)

    def forward(self, t, grid: GridShape, has_cls: bool = False):
        """Tokens (B, n[+1], d) -> raw (unclamped) pixels (B, 1, H, W)."""
        if has_cls:
            t = t[:, 1:]
        if t.shape[1] != grid.n:
            raise ShapeError(f"{t.shape[1]} tokens for grid {grid}")
        t = t + sincos_pos_embed(grid, self.cfg.embed_dim).to(t)
        for blk in self.blocks:
            t = blk(t)
        return unpatchify_t(self.pred(self.norm(t)), grid)

    def fill_masked(self, kept_tokens, keep_idx, n):
        """Scatter encoded kept tokens into a full grid of mask tokens."""
        b, _, d = kept_tokens.shape
        full = self.mask_token.to(kept_tokens).expand(b, n, d).clone()
        return full.scatter(1, keep_idx[..., None].expand(-1, -1, d), kept_tokens)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# full model

class FusionNet(nn.Module):
    """Encoder + CFM + MFM + FFN + decoder, with per-group freezing."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, fusion_init: str = "xavier"):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(self.cfg)
            self.cfm = CFM(self.cfg)
            self.mfm = MFM(self.cfg)
            self.ffn = FFN(self.cfg)
            self.decoder = Decoder(self.cfg)
            self.apply(_init_weights)
            if self.encoder.cls_token is not None:
                nn.init.trunc_normal_(self.encoder.cls_token, std=0.02)
            nn.init.trunc_normal_(self.decoder.mask_token, std=0.02)
            # patch projection at unit gain so pixel content is not swamped
            # by the position table
            nn.init.xavier_uniform_(self.encoder.patch_embed.weight)
            init_fusion_layer(self, fusion_init)
        self.frozen: set[str] = set()

    # -- groups --------------------------------------------------------------
    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise ConfigError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def set_frozen(self, name: str, frozen: bool = True) -> None:
        for p in self.group(name).parameters():
            p.requires_grad_(not frozen)
        (self.frozen.add if frozen else self.frozen.discard)(name)

    def freeze(self, *names: str) -> None:
        for name in names:
            self.set_frozen(name, True)

    def unfreeze(self, *names: str) -> None:
        for name in names:
            self.set_frozen(name, False)

    def is_frozen(self, name: str) -> bool:
        return name in self.frozen

    def group_state(self, name: str) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.group(name).state_dict().items()}

    # -- forward paths ---------------------------------------------------------
    def encode(self, x, depth=None):
        tokens, grid = self.encoder(x, depth=depth)
        return tokens, grid

    def fuse(self, phi_i, phi_v, path: Literal["full", "cfm"] = "full"):
        """Fused tokens. ``path='cfm'`` bypasses the merging module and FFN."""
        phi_d = self.cfm(phi_i, phi_v)
        if path == "cfm":
            return phi_d
        phi_m = self.mfm(phi_i, phi_v, phi_d)
        return phi_m + self.ffn(phi_m)

    def fuse_all(self, phi_i, phi_v):
        """Intermediate features (phi_d, phi_m, phi_f) of the full path."""
        phi_d = self.cfm(phi_i, phi_v)
        phi_m = self.mfm(phi_i, phi_v, phi_d)
        return phi_d, phi_m, phi_m + self.ffn(phi_m)

    def decode(self, t, grid):
        return self.decoder(t, grid, has_cls=self.cfg.use_cls)

    def forward(self, v, i, path: Literal["full", "cfm"] = "full"):
        """Raw fused luminance (B, 1, H, W) from visible-Y and infrared batches."""
        phi_v, grid = self.encode(v)
        phi_i, _ = self.encode(i)
        return self.decode(self.fuse(phi_i, phi_v, path), grid)

    def mean_fusion(self, v, i):
        """Decode of the element-wise mean of the two feature sequences."""
        phi_v, grid = self.encode(v)
        phi_i, _ = self.encode(i)
        return self.decode(0.5 * (phi_v + phi_i), grid)

    def reconstruct(self, x):
        t, grid = self.encode(x)
        return self.decode(t, grid)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def init_fusion_layer(net: FusionNet, scheme: str = "xavier") -> None:
    """(Re)initialise CFM, MFM and FFN weights.

    ``xavier``: uniform Glorot weights, zero biases, unit LayerNorms; the
    fresh layer's output lands well away from the feature mean.
    ``identity``: truncated-normal weights with zeroed attention output
    projections, so the cross-attention blocks start as identities.
    ``mean``: see :func:`set_mean_passthrough`.
    """
    if scheme not in ("xavier", "identity", "mean"):
        raise ConfigError(f"unknown fusion init {scheme!r}")
    for group in (net.cfm, net.mfm, net.ffn):
        group.apply(_init_weights)
        if scheme == "xavier":
            for m in group.modules():
                if isinstance(m, nn.Linear):
                    nn.init.xavier_uniform_(m.weight)
    if scheme == "identity":
        with torch.no_grad():
            for cross in (net.cfm.cross, net.mfm.cross_v, net.mfm.cross_i):
                cross.attn.o.weight.zero_()
                cross.attn.o.bias.zero_()
    elif scheme == "mean":
        set_mean_passthrough(net)


def reseed_fusion_layer(net: FusionNet, seed: int, scheme: str = "xavier") -> None:
    """Fresh CFM/MFM/FFN weights drawn from ``seed``; the global RNG is untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        init_fusion_layer(net, scheme)


def set_mean_passthrough(net: FusionNet) -> None:
    """Zero the output layers of CFM, MFM and FFN so the fusion layer returns
    exactly the mean of its two inputs."""
    layers = [
        net.cfm.cross.attn.o, net.cfm.mlp.fc2,
        net.mfm.cross_v.attn.o, net.mfm.cross_i.attn.o,
        net.ffn.mlp.fc2,
    ]
    with torch.no_grad():
        for lin in layers:
            lin.weight.zero_()
            lin.bias.zero_()


# ---------------------------------------------------------------------------
# Image-level API

def image_tensor(img: Image, dtype=torch.float32) -> torch.Tensor:
    """Gray Image -> (1, 1, H, W) tensor in unit range."""
    plane = img.to_range("unit").gray
    return torch.as_tensor(np.ascontiguousarray(plane), dtype=dtype)[None, None]


def tensor_image(x: torch.Tensor, range="unit") -> Image:
    plane = x.detach().to(torch.float64).reshape(x.shape[-2], x.shape[-1]).cpu().numpy()
    return Image(plane, "unit", "gray").to_range(range)


def _dtype(net):
    return next(net.parameters()).dtype


def encode(img: Image, net: FusionNet) -> TokenSequence:
    with torch.no_grad():
        t, grid = net.encode(image_tensor(img, _dtype(net)))
    return TokenSequence(t[0], grid, net.cfg.use_cls)


def decode(phi: TokenSequence, net: FusionNet, range="unit") -> Image:
    tokens = phi.tokens if phi.tokens.dim() == 3 else phi.tokens[None]
    with torch.no_grad():
        x = net.decoder(tokens, phi.grid, has_cls=phi.has_cls)
    return tensor_image(x.clamp(0.0, 1.0), range)


def fuse_features(phi_i: TokenSequence, phi_v: TokenSequence, net: FusionNet) -> TokenSequence:
    with torch.no_grad():
        out = net.fuse(_batched(phi_i), _batched(phi_v))
    return TokenSequence(out.reshape(phi_i.tokens.shape), phi_i.grid, phi_i.has_cls)


def _batched(phi: TokenSequence):
    return phi.tokens if phi.tokens.dim() == 3 else phi.tokens[None]


def fuse_images(v: Image, i: Image, net: FusionNet, color: Literal["gray", "ycbcr"] = "gray") -> Image:
    """Fuse a registered visible/infrared pair.

    Only the luminance of the visible image enters the network. In ``ycbcr``
    mode the visible chroma is re-attached to the fused luminance and the
    result returned as ycbcr; ``write_image`` converts it to rgb.
    """
    if v.shape != i.shape:
        raise ShapeError(f"pair shapes differ: {v.shape} vs {i.shape}")
    y = luma(v).to_range("unit")
    ir = luma(i).to_range("unit")
    dtype = _dtype(net)
    with torch.no_grad():
        fused = net(image_tensor(y, dtype), image_tensor(ir, dtype)).clamp(0.0, 1.0)
    fy = tensor_image(fused)
    if color == "gray" or v.colorspace == "gray":
        return fy.to_range(v.range)
    ycc = convert_colorspace(v.to_range("unit"), "ycbcr") if v.colorspace == "rgb" else v.to_range("unit")
    data = ycc.data.copy()
    data[:, :, 0] = fy.gray
    return Image(data, "unit", "ycbcr").to_range(v.range)


def probe_feature_fusion(
    v: Image, i: Image, net: FusionNet, layer: int, mode: Literal["mean", "max"] = "mean"
) -> Image:
    """Combine the two modalities' tokens after ``layer`` encoder blocks by
    element-wise mean or max, then decode. ``layer=0`` combines the embedded
    patches before any block."""
    if not 0 <= layer <= net.cfg.encoder_depth:
        raise ConfigError(f"layer {layer} outside [0, {net.cfg.encoder_depth}]")
    if mode not in ("mean", "max"):
        raise ConfigError(f"unknown probe mode {mode!r}")
    dtype = _dtype(net)
    with torch.no_grad():
        tv, grid = net.encode(image_tensor(luma(v), dtype), depth=layer)
        ti, _ = net.encode(image_tensor(luma(i), dtype), depth=layer)
        t = 0.5 * (tv + ti) if mode == "mean" else torch.maximum(tv, ti)
        x = net.decode(t, grid).clamp(0.0, 1.0)
    return tensor_image(x)


def probe_layer_sweep(v: Image, i: Image, net: FusionNet, mode="mean") -> list[Image]:
    return [probe_feature_fusion(v, i, net, k, mode) for k in range(net.cfg.encoder_depth + 1)]
