"""Checkpoint directories.

Layout::

    ckpt/
      manifest.json        # config echo, group frozen flags, per-array entries
      arrays/<name>.bin    # raw little-endian data, one file per array

Arrays are written in the model's dtype (float32 unless the model was cast to
float64), so save -> load is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .errors import ImageIOError, MissingArtifact, WeightImportError
from .model import GROUPS, FusionNet, ModelConfig

FORMAT = "ivfuse-checkpoint/1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _group_of(name: str) -> str:
    return name.split(".", 1)[0]


def save_checkpoint(net: FusionNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    (path / "arrays").mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, tensor in net.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ImageIOError(f"{name}: unsupported dtype {dtype}")
        fname = f"{name}.bin"
        (path / "arrays" / fname).write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
        entries[name] = {"shape": list(arr.shape), "dtype": dtype, "group": _group_of(name), "file": fname}
    manifest = {
        "format": FORMAT,
        "config": net.cfg.to_dict(),
        "frozen": {g: net.is_frozen(g) for g in GROUPS},
        "arrays": entries,
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise MissingArtifact(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise WeightImportError([f"unknown checkpoint format {manifest.get('format')!r}"])
    return manifest


def _read_arrays(path: Path, manifest: dict, groups: set[str]) -> dict[str, np.ndarray]:
    out, problems = {}, []
    for name, entry in manifest["arrays"].items():
        if entry["group"] not in groups:
            continue
        f = path / "arrays" / entry["file"]
        if not f.is_file():
            problems.append(f"{name}: missing array file {entry['file']}")
            continue
        if entry["dtype"] not in _DTYPES:
            problems.append(f"{name}: unsupported dtype {entry['dtype']}")
            continue
        raw = np.frombuffer(f.read_bytes(), dtype=_DTYPES[entry["dtype"]])
        if raw.size != int(np.prod(entry["shape"])):
            problems.append(f"{name}: file holds {raw.size} values, manifest says shape {entry['shape']}")
            continue
        out[name] = raw.reshape(entry["shape"]).astype(entry["dtype"])
    if problems:
        raise WeightImportError(problems)
    return out


def import_weights(
    path, net: FusionNet, groups: Iterable[str] | None = None, freeze: bool = True
) -> FusionNet:
    """Copy the listed groups from a checkpoint into ``net``.

    Names and shapes must match exactly; every mismatch is reported in one
    :class:`WeightImportError`. Imported groups are frozen unless
    ``freeze=False``; other groups are left untouched. ``groups=[]`` is a
    no-op.
    """
    path = Path(path)
    manifest = read_manifest(path)
    groups = set(GROUPS if groups is None else groups)
    if not groups:
        return net
    unknown = groups - set(GROUPS)
    if unknown:
        raise WeightImportError([f"unknown group {g!r}" for g in sorted(unknown)])
    arrays = _read_arrays(path, manifest, groups)
    state = net.state_dict()
    problems = []
    for name, arr in arrays.items():
        if name not in state:
            problems.append(f"{name}: not present in the model")
        elif tuple(state[name].shape) != arr.shape:
            problems.append(f"{name}: checkpoint shape {list(arr.shape)} != model shape {list(state[name].shape)}")
    for name in state:
        if _group_of(name) in groups and name not in arrays:
            problems.append(f"{name}: missing from checkpoint")
    if problems:
        raise WeightImportError(problems)
    with torch.no_grad():
        for name, arr in arrays.items():
            state[name].copy_(torch.from_numpy(arr))
    for g in groups:
        net.set_frozen(g, freeze)
    return net


def load_checkpoint(path, groups: Iterable[str] | None = None, net: FusionNet | None = None) -> FusionNet:
    """Load a checkpoint, restoring its frozen flags.

    Without ``net`` a model is built from the config echo. With ``net`` the
    checkpoint config must match ``net.cfg``.
    """
    manifest = read_manifest(path)
    cfg = ModelConfig(**manifest["config"])
    if net is None:
        net = FusionNet(cfg)
        dtypes = {e["dtype"] for e in manifest["arrays"].values()}
        if dtypes == {"float64"}:
            net = net.double()
    elif net.cfg != cfg:
        diffs = [f"config {k}: checkpoint {v!r} != model {getattr(net.cfg, k)!r}"
                 for k, v in cfg.to_dict().items() if getattr(net.cfg, k) != v]
        raise WeightImportError(diffs)
    selected = list(GROUPS if groups is None else groups)
    import_weights(path, net, selected, freeze=False)
    for g in selected:
        net.set_frozen(g, bool(manifest["frozen"].get(g, False)))
    return net


def checkpoint(net_or_none, path, mode: str = "save", **kwargs):
    if mode == "save":
        return save_checkpoint(net_or_none, path, **kwargs)
    if mode == "load":
        return load_checkpoint(path, **kwargs)
    raise ValueError(f"unknown checkpoint mode {mode!r}")
