"""Named parameter bundles and the checkpoint container.

A checkpoint directory holds ``manifest.json`` (model spec, tensor names,
shapes, dtypes, CRC-32 per blob) and one little-endian float32 blob per
tensor under ``tensors/``.
"""

from __future__ import annotations

import json
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..dataset import ChecksumError
from .models import ModelSpec, build_model

CHECKPOINT_VERSION = 1


class ParameterSet:
    """Ordered ``name -> tensor`` map with a flatten/unflatten bijection."""

    def __init__(self, tensors):
        self.tensors = OrderedDict(tensors)

    @classmethod
    def from_module(cls, module: nn.Module, trainable_only: bool = True) -> "ParameterSet":
        return cls((n, p) for n, p in module.named_parameters() if p.requires_grad or not trainable_only)

    def __len__(self):
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    @property
    def size(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def flatten(self) -> torch.Tensor:
        if not self.tensors:
            return torch.zeros(0)
        return torch.cat([t.detach().reshape(-1) for t in self.tensors.values()])

    def unflatten(self, vec: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
        if vec.numel() != self.size:
            raise ValueError(f"vector has {vec.numel()} entries, expected {self.size}")
        out, start = OrderedDict(), 0
        for name, t in self.tensors.items():
            out[name] = vec[start : start + t.numel()].reshape(t.shape).to(t.dtype)
            start += t.numel()
        return out

    def flat_grad(self) -> torch.Tensor:
        return torch.cat(
            [
                (t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1)
                for t in self.tensors.values()
            ]
        )

    def load_flat(self, vec: torch.Tensor) -> None:
        with torch.no_grad():
            for name, value in self.unflatten(vec).items():
                self.tensors[name].copy_(value)

    def set_flat_grad(self, vec: torch.Tensor) -> None:
        for name, value in self.unflatten(vec).items():
            self.tensors[name].grad = value.clone()


def _write_tensors(tensors: dict, root: Path) -> list[dict]:
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(tensors.items()):
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        fname = f"tensors/{i:04d}.bin"
        (root / fname).write_bytes(raw)
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "file": fname, "crc32": zlib.crc32(raw)}
        )
    return entries


def _read_tensors(entries: list[dict], root: Path) -> "OrderedDict[str, torch.Tensor]":
    out = OrderedDict()
    for e in entries:
        path = root / e["file"]
        if not path.exists():
            raise FileNotFoundError(f"missing tensor blob {path}")
        raw = path.read_bytes()
        if zlib.crc32(raw) != e["crc32"]:
            raise ChecksumError(f"checksum mismatch for tensor {e['name']} ({e['file']})")
        shape = tuple(e["shape"])
        if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"tensor {e['name']}: blob size does not match shape {shape}")
        out[e["name"]] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    return out


def _optimizer_tensors(optimizer) -> tuple[dict, dict]:
    """Split an optimizer state dict into scalar metadata and named tensors."""
    state = optimizer.state_dict()
    tensors, meta = OrderedDict(), {"param_groups": state["param_groups"], "state": {}}
    for idx, s in state["state"].items():
        meta["state"][str(idx)] = {}
        for key, val in s.items():
            if isinstance(val, torch.Tensor) and val.numel() > 1 or key.startswith("exp_avg") or key == "momentum_buffer":
                tensors[f"optim/{idx}/{key}"] = val
                meta["state"][str(idx)][key] = "tensor"
            else:
                meta["state"][str(idx)][key] = float(val)
    return meta, tensors


def save_checkpoint(path, model: nn.Module, optimizer=None, extra: dict | None = None) -> None:
    """Write model (and optionally optimizer) state; tensors are stored as float32."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors = OrderedDict((k, v) for k, v in model.state_dict().items())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict() if hasattr(model, "spec") else None,
        "tensors": _write_tensors(tensors, root),
        "extra": extra or {},
    }
    if optimizer is not None:
        meta, opt_tensors = _optimizer_tensors(optimizer)
        meta["tensors"] = _write_tensors(opt_tensors, root / "optim")
        manifest["optimizer"] = meta
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, spec: ModelSpec | None = None, optimizer=None):
    """Return ``(model, manifest)``; restores ``optimizer`` state in place if given.

    Passing ``spec`` asserts the checkpoint was written for that spec.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint at {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    saved = ModelSpec.from_dict(manifest["spec"])
    if spec is not None and spec != saved:
        raise ValueError(f"checkpoint spec {saved} does not match requested {spec}")
    model = build_model(saved)
    state = _read_tensors(manifest["tensors"], root)
    expected = model.state_dict()
    for name, t in state.items():
        if name not in expected or tuple(expected[name].shape) != tuple(t.shape):
            raise ValueError(f"tensor {name} with shape {tuple(t.shape)} does not fit model {saved.kind}")
    model.load_state_dict(state, strict=True)
    if optimizer is not None:
        if "optimizer" not in manifest:
            raise ValueError("checkpoint has no optimizer state")
        meta = manifest["optimizer"]
        tensors = _read_tensors(meta["tensors"], root / "optim")
        restored = {"param_groups": meta["param_groups"], "state": {}}
        for idx, fields in meta["state"].items():
            s = {}
            for key, val in fields.items():
                s[key] = tensors[f"optim/{idx}/{key}"] if val == "tensor" else torch.tensor(val)
            restored["state"][int(idx)] = s
        optimizer.load_state_dict(restored)
    return model, manifest


def save_module_state(path, module: nn.Module) -> None:
    """Checkpoint a spec-less helper module (e.g. a distillation projection head)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"version": CHECKPOINT_VERSION, "tensors": _write_tensors(module.state_dict(), root)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_module_state(path, module: nn.Module) -> None:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    module.load_state_dict(_read_tensors(manifest["tensors"], root), strict=True)
