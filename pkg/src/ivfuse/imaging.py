"""Pixel-domain primitives: the Image container, colour conversion,
differential operators, patch reshaping, PNG I/O and pixel-max fusion.

The differential operators have a torch implementation (used by the losses,
so gradients flow) and thin ndarray/Image wrappers on top of it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import (
    FormatError,
    ImageIOError,
    InvalidChannelCount,
    InvalidConversion,
    ShapeError,
)

Range = Literal["unit", "byte"]
Colorspace = Literal["gray", "rgb", "ycbcr"]

RANGE_MAX = {"unit": 1.0, "byte": 255.0}

# BT.601 full-range (JPEG) RGB -> YCbCr, chroma offset of half the range.
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.t().contiguous()
LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class Image:
    """H x W x C raster with a declared value range and colour space.

    Values are clamped into the declared range on construction. 2-D input is
    promoted to a single channel.
    """

    data: np.ndarray
    range: Range = "unit"
    colorspace: Colorspace = "gray"

    def __post_init__(self):
        if self.range not in RANGE_MAX:
            raise ValueError(f"unknown range {self.range!r}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise InvalidChannelCount(f"expected H x W x {{1,3}}, got {data.shape}")
        if (data.shape[2] == 1) != (self.colorspace == "gray"):
            raise InvalidChannelCount(
                f"{self.colorspace} image cannot have {data.shape[2]} channel(s)"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        self.data = np.clip(data, 0.0, RANGE_MAX[self.range])

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def gray(self) -> np.ndarray:
        """The 2-D plane of a single-channel image."""
        if self.channels != 1:
            raise InvalidChannelCount("image is not single-channel")
        return self.data[:, :, 0]

    def to_range(self, target: Range) -> "Image":
        if target == self.range:
            return self
        scale = RANGE_MAX[target] / RANGE_MAX[self.range]
        return Image(self.data * scale, target, self.colorspace)

    def channel(self, k: int) -> "Image":
        return Image(self.data[:, :, k], self.range, "gray")


@dataclass(frozen=True)
class GridShape:
    rows: int
    cols: int
    patch: int

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def height(self) -> int:
        return self.rows * self.patch

    @property
    def width(self) -> int:
        return self.cols * self.patch


# ---------------------------------------------------------------------------
# colour

def convert_colorspace(img: Image, target: Colorspace) -> Image:
    """Convert between rgb and ycbcr (BT.601 full range), or rgb to gray.

    Chroma channels are offset by half of the declared range, so neutral
    grey has Cb = Cr = 0.5 in unit range.
    """
    pair = (img.colorspace, target)
    scale = RANGE_MAX[img.range]
    offset = np.array([0.0, 0.5, 0.5]) * scale
    if pair == ("rgb", "ycbcr"):
        out = img.data @ RGB_TO_YCBCR.T + offset
    elif pair == ("ycbcr", "rgb"):
        out = (img.data - offset) @ YCBCR_TO_RGB.T
    elif pair == ("rgb", "gray"):
        out = img.data @ RGB_TO_YCBCR[0]
    else:
        raise InvalidConversion(f"unsupported conversion {pair[0]} -> {pair[1]}")
    return Image(out, img.range, target)


def luma(img: Image) -> Image:
    """Y plane of an rgb image; gray images pass through."""
    if img.colorspace == "gray":
        return img
    if img.colorspace == "ycbcr":
        return img.channel(0)
    return convert_colorspace(img, "gray")


# ---------------------------------------------------------------------------
# differential operators (torch)

def _conv3x3(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Correlate (B, 1, H, W) with a 3x3 kernel under replicate padding."""
    k = kernel.to(dtype=x.dtype, device=x.device).view(1, 1, 3, 3)
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    shape = x.shape
    if x.dim() == 2:
        return x[None, None], shape
    if x.dim() == 3:
        return x[:, None], shape
    if x.dim() == 4 and x.shape[1] == 1:
        return x, shape
    raise InvalidChannelCount(f"expected a single-channel tensor, got shape {tuple(shape)}")


def safe_sqrt(s: torch.Tensor) -> torch.Tensor:
    """sqrt with a zero (not NaN) gradient at s == 0."""
    positive = s > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, s, torch.ones_like(s))), torch.zeros_like(s))


def sobel_xy(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    xb, shape = _as_batch(x)
    return _conv3x3(xb, SOBEL_X).reshape(shape), _conv3x3(xb, SOBEL_Y).reshape(shape)


def sobel_t(x: torch.Tensor) -> torch.Tensor:
    """Sobel gradient magnitude of a 2-D, (B, H, W) or (B, 1, H, W) tensor."""
    gx, gy = sobel_xy(x)
    return safe_sqrt(gx * gx + gy * gy)


def laplacian_t(x: torch.Tensor) -> torch.Tensor:
    """Absolute 4-neighbour Laplacian, same shapes as :func:`sobel_t`."""
    xb, shape = _as_batch(x)
    return _conv3x3(xb, LAPLACIAN).abs().reshape(shape)


def _require_gray(img: Image) -> np.ndarray:
    if img.channels != 1:
        raise InvalidChannelCount(f"operator needs a single-channel image, got {img.channels}")
    return img.gray


def _result_image(plane: np.ndarray, like: Image) -> Image:
    # Operator magnitudes can exceed the source range, so skip the clamp.
    img = object.__new__(Image)
    img.data = plane[:, :, None].astype(np.float64)
    img.range = like.range
    img.colorspace = "gray"
    return img


def sobel_magnitude(img: Image) -> Image:
    """|grad img| with 3x3 Sobel kernels and replicate padding.

    The result keeps the raw magnitude values (up to 4*sqrt(2) times the input
    range) and is not clamped.
    """
    plane = _require_gray(img)
    out = sobel_t(torch.from_numpy(plane)).numpy()
    return _result_image(out, img)


def laplacian_magnitude(img: Image) -> Image:
    plane = _require_gray(img)
    out = laplacian_t(torch.from_numpy(plane)).numpy()
    return _result_image(out, img)


# ---------------------------------------------------------------------------
# patches

def grid_for(height: int, width: int, patch: int) -> GridShape:
    if patch <= 0 or height % patch or width % patch:
        raise ShapeError(f"{height}x{width} is not divisible by patch size {patch}")
    return GridShape(height // patch, width // patch, patch)


def patchify_t(x: torch.Tensor, patch: int) -> tuple[torch.Tensor, GridShape]:
    """(B, 1, H, W) -> (B, n, patch*patch), row-major over patches and pixels."""
    b, c, h, w = x.shape
    if c != 1:
        raise InvalidChannelCount("patchify expects single-channel input")
    grid = grid_for(h, w, patch)
    t = x.reshape(b, grid.rows, patch, grid.cols, patch).permute(0, 1, 3, 2, 4)
    return t.reshape(b, grid.n, patch * patch), grid


def unpatchify_t(tokens: torch.Tensor, grid: GridShape) -> torch.Tensor:
    b, n, dim = tokens.shape
    p = grid.patch
    if n != grid.n or dim != p * p:
        raise ShapeError(f"tokens {tuple(tokens.shape)} do not fit grid {grid}")
    t = tokens.reshape(b, grid.rows, grid.cols, p, p).permute(0, 1, 3, 2, 4)
    return t.reshape(b, 1, grid.height, grid.width)


def patchify(img: Image, patch: int) -> tuple[np.ndarray, GridShape]:
    plane = _require_gray(img)
    grid = grid_for(*plane.shape, patch)
    tokens = plane.reshape(grid.rows, patch, grid.cols, patch).transpose(0, 2, 1, 3)
    return tokens.reshape(grid.n, patch * patch).copy(), grid


def unpatchify(tokens: np.ndarray, grid: GridShape, range: Range = "unit") -> Image:
    tokens = np.asarray(tokens)
    p = grid.patch
    if tokens.shape != (grid.n, p * p):
        raise ShapeError(f"tokens {tokens.shape} do not fit grid {grid}")
    plane = tokens.reshape(grid.rows, grid.cols, p, p).transpose(0, 2, 1, 3)
    return Image(plane.reshape(grid.height, grid.width), range, "gray")


def center_crop(img: Image, patch: int) -> Image:
    """Crop to the largest patch-divisible size, centred."""
    h, w = img.shape
    nh, nw = (h // patch) * patch, (w // patch) * patch
    if nh == 0 or nw == 0:
        raise ShapeError(f"{h}x{w} image is smaller than patch size {patch}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return Image(img.data[top:top + nh, left:left + nw], img.range, img.colorspace)


def max_fuse(v: Image, i: Image) -> Image:
    """Pixel-wise maximum of two registered gray images."""
    if v.data.shape != i.data.shape:
        raise ShapeError(f"shape mismatch {v.data.shape} vs {i.data.shape}")
    if v.channels != 1:
        raise InvalidChannelCount("max_fuse expects gray images")
    if v.range != i.range:
        i = i.to_range(v.range)
    return Image(np.maximum(v.data, i.data), v.range, "gray")


# ---------------------------------------------------------------------------
# PNG I/O

def read_image(path, range: Range = "unit") -> Image:
    """Read an 8- or 16-bit gray or RGB PNG, normalised to ``range``."""
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"no such image: {path}")
    try:
        with PILImage.open(path) as pim:
            pim.load()
            mode = pim.mode
            if mode == "P":
                pim = pim.convert("RGB")
                mode = "RGB"
            elif mode in ("LA", "RGBA"):
                pim = pim.convert(mode[:-1] if mode == "LA" else "RGB")
                mode = pim.mode
            arr = np.array(pim)
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot decode {path}: {exc}") from exc

    if mode in ("L", "RGB"):
        peak = 255.0
    elif mode in ("I;16", "I;16B", "I;16L", "I"):
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
            raise FormatError(f"{path}: values outside the 16-bit range")
        peak = 65535.0
    else:
        raise FormatError(f"{path}: unsupported PNG mode {mode!r}")
    data = arr.astype(np.float64) / peak * RANGE_MAX[range]
    return Image(data, range, "rgb" if mode == "RGB" else "gray")


def write_image(path, img: Image, bits: int = 8) -> None:
    """Write ``img`` as PNG. Byte-range images round-trip losslessly at 8 bits."""
    path = Path(path)
    if not path.parent.is_dir():
        raise ImageIOError(f"parent directory does not exist: {path.parent}")
    if img.colorspace == "ycbcr":
        img = convert_colorspace(img, "rgb")
    unit = img.data / RANGE_MAX[img.range]
    if bits == 8:
        arr = np.round(unit * 255.0).astype(np.uint8)
    elif bits == 16:
        if img.channels != 1:
            raise FormatError("16-bit output is only supported for gray images")
        arr = np.round(unit * 65535.0).astype(np.uint16)
    else:
        raise FormatError(f"unsupported bit depth {bits}")
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    try:
        PILImage.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def image_io(path, mode: Literal["read", "write"], img: Image | None = None, **kwargs):
    if mode == "read":
        return read_image(path, **kwargs)
    if mode == "write":
        if img is None:
            raise ValueError("write mode needs an image")
        write_image(path, img, **kwargs)
        return None
    raise ValueError(f"unknown mode {mode!r}")
