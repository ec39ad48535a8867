"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"CNET"  u32 version
    u32 len, config text (utf-8, key = value lines)
    u32 entry count
    per entry: u32 len, name (utf-8), u64[4] shape, float32 payload

Entries hold the model parameters and batch-norm running statistics under
their registry names, plus optional ``optim.m`` / ``optim.v`` Adam moments and
``meta.epoch`` / ``meta.step`` counters.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import CarNet, CarNetConfig
from .tensor import DTYPE, Tensor, read_tensor, write_tensor

MAGIC = b"CNET"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Malformed checkpoint or mismatch with the target model."""


@dataclass
class Checkpoint:
    config: CarNetConfig
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    moments: tuple[np.ndarray, np.ndarray] | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def _write_str(fh, s: str):
    b = s.encode("utf-8")
    fh.write(_U32.pack(len(b)))
    fh.write(b)


def _read_exact(fh, n: int, what: str) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def _read_str(fh, what: str) -> str:
    (n,) = _U32.unpack(_read_exact(fh, 4, what))
    return _read_exact(fh, n, what).decode("utf-8")


def _scalar(v) -> np.ndarray:
    return np.full((1, 1, 1, 1), v, dtype=DTYPE)


def model_state(model: CarNet) -> dict[str, np.ndarray]:
    for _, m in model.modules():
        # running stats are created lazily; a never-run model still saves a complete set
        if hasattr(m, "reset_running_stats") and m.running_mean is None:
            m.reset_running_stats()
    state = {}
    for name, p in model.named_parameters():
        state[name] = p.data
    for name, b in model.named_buffers():
        if b is not None:
            state[name] = b.data
    return state


def save_checkpoint(path, model: CarNet, epoch: int = 0, step: int = 0, moments=None):
    entries = dict(model_state(model))
    if moments is not None:
        m, v = moments
        entries["optim.m"] = np.asarray(m).reshape(1, 1, 1, -1)
        entries["optim.v"] = np.asarray(v).reshape(1, 1, 1, -1)
    entries["meta.epoch"] = _scalar(epoch)
    entries["meta.step"] = _scalar(step)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    _write_str(buf, model.cfg.to_text())
    buf.write(_U32.pack(len(entries)))
    for name, arr in entries.items():
        _write_str(buf, name)
        write_tensor(buf, Tensor(arr))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e.strerror}") from None
    with fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = _U32.unpack(_read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        cfg = CarNetConfig.from_text(_read_str(fh, "config"))
        (count,) = _U32.unpack(_read_exact(fh, 4, "entry count"))
        tensors = {}
        for _ in range(count):
            name = _read_str(fh, "entry name")
            try:
                tensors[name] = read_tensor(fh).data
            except EOFError as e:
                raise CheckpointError(f"{path}: entry {name!r}: {e}") from None
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} entries")
    epoch = int(tensors.pop("meta.epoch", _scalar(0)).item())
    step = int(tensors.pop("meta.step", _scalar(0)).item())
    moments = None
    if "optim.m" in tensors and "optim.v" in tensors:
        moments = (tensors.pop("optim.m").reshape(-1), tensors.pop("optim.v").reshape(-1))
    return Checkpoint(cfg, tensors, epoch, step, moments)


def apply_checkpoint(model: CarNet, ckpt: Checkpoint):
    """Copy tensors into ``model``; any name or shape mismatch is an error listing all of them."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    missing = sorted(expected - set(ckpt.tensors))
    unexpected = sorted(set(ckpt.tensors) - expected)
    if missing or unexpected:
        raise CheckpointError("checkpoint does not match the model architecture; "
                              f"missing: {missing or 'none'}; unexpected: {unexpected or 'none'}")
    bad = []
    for name in sorted(expected):
        target = params.get(name) or buffers.get(name)
        arr = ckpt.tensors[name]
        if target is not None and target.shape != arr.shape:
            bad.append(f"{name}: model {target.shape} vs checkpoint {arr.shape}")
    if bad:
        raise CheckpointError("checkpoint shapes do not match the model: " + "; ".join(bad))
    for name, p in params.items():
        p.data[...] = ckpt.tensors[name]
    for mname, m in model.modules():
        if hasattr(m, "reset_running_stats"):
            prefix = f"{mname}." if mname else ""
            if m.running_mean is None:
                m.reset_running_stats()
            m.running_mean.data[...] = ckpt.tensors[prefix + "running_mean"]
            m.running_var.data[...] = ckpt.tensors[prefix + "running_var"]


def model_from_checkpoint(path) -> tuple[CarNet, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = CarNet(ckpt.config)
    for _, m in model.modules():
        if hasattr(m, "reset_running_stats"):
            m.reset_running_stats()
    apply_checkpoint(model, ckpt)
    return model, ckpt
