"""Portable checkpoint archives.

A checkpoint is an uncompressed zip with fixed member timestamps (so equal
models give equal bytes) holding ``checkpoint.json`` and one blob per tensor
under ``tensors/``. Every blob is row-major little-endian float32.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError
from .model import LsmConfig, LsmModel

FORMAT = "lsm-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    config: LsmConfig
    state: dict[str, torch.Tensor]
    optimizer_state: dict | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def model(self) -> LsmModel:
        model = LsmModel(self.config)
        model.load_state_dict(self.state, strict=True)
        return model.eval()

    @classmethod
    def from_model(cls, model: LsmModel, optimizer=None, metadata=None) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        opt_state = _optimizer_tensors(model, optimizer) if optimizer is not None else None
        return cls(model.config, state, opt_state, dict(metadata or {}))


def _optimizer_tensors(model, optimizer) -> dict:
    names = {id(p): n for n, p in model.named_parameters()}
    tensors, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            for key in ("exp_avg", "exp_avg_sq"):
                if key in st:
                    tensors[f"{name}.{key}"] = st[key].detach().clone()
            steps[name] = int(st["step"])
    return {"tensors": tensors, "steps": steps}


def _blob(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes()


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(ckpt: Checkpoint | LsmModel, path, *, optimizer=None, metadata=None) -> None:
    if isinstance(ckpt, LsmModel):
        ckpt = Checkpoint.from_model(ckpt, optimizer, metadata)
    entries = []
    blobs = {}
    for i, (name, t) in enumerate(ckpt.state.items()):
        member = f"tensors/{i:05d}.f32"
        entries.append({"name": name, "dtype": "f32le", "shape": list(t.shape), "file": member})
        blobs[member] = _blob(t)
    opt_entries = []
    opt_steps = None
    if ckpt.optimizer_state is not None:
        opt_steps = ckpt.optimizer_state["steps"]
        for i, (name, t) in enumerate(ckpt.optimizer_state["tensors"].items()):
            member = f"optimizer/{i:05d}.f32"
            opt_entries.append({"name": name, "dtype": "f32le", "shape": list(t.shape), "file": member})
            blobs[member] = _blob(t)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "tensors": entries,
        "optimizer": None if ckpt.optimizer_state is None else {"tensors": opt_entries, "steps": opt_steps},
        "metadata": ckpt.metadata,
    }
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_member("checkpoint.json"), json.dumps(header, indent=2, sort_keys=True))
        for member, data in blobs.items():
            zf.writestr(_member(member), data)


def _read_tensor(zf, entry) -> torch.Tensor:
    if entry.get("dtype") != "f32le":
        raise CheckpointError(f"unsupported dtype tag {entry.get('dtype')!r} for {entry.get('name')}")
    data = zf.read(entry["file"])
    shape = tuple(entry["shape"])
    if len(data) != 4 * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"tensor {entry['name']} holds {len(data)} bytes, shape {shape}")
    return torch.from_numpy(np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("checkpoint.json"))
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path} is not an LSM checkpoint")
            if header.get("version") != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
            config = LsmConfig.from_dict(header["config"])
            state = {e["name"]: _read_tensor(zf, e) for e in header["tensors"]}
            opt = None
            if header.get("optimizer"):
                opt = {
                    "tensors": {e["name"]: _read_tensor(zf, e) for e in header["optimizer"]["tensors"]},
                    "steps": header["optimizer"]["steps"],
                }
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError, ConfigError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    expected = set(LsmModel(config).state_dict())
    if set(state) != expected:
        missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
        raise CheckpointError(f"checkpoint tensors do not match config (missing={missing}, extra={extra})")
    return Checkpoint(config, state, opt, header.get("metadata", {}))


def restore_optimizer(optimizer, model: LsmModel, opt_state: dict) -> None:
    """Load Adam moments saved by :func:`save_checkpoint` into ``optimizer``."""
    params = dict(model.named_parameters())
    for name, step in opt_state["steps"].items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": opt_state["tensors"][f"{name}.exp_avg"].clone(),
            "exp_avg_sq": opt_state["tensors"][f"{name}.exp_avg_sq"].clone(),
        }
