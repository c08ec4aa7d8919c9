"""Checkpoint container: JSON header plus length-prefixed float32 tensors.

Layout (little-endian)::

    b"SCKP" | version:u32 | header_len:u32 | header JSON (utf-8)
    | n_tensors:u32
    | repeated: name_len:u32 | name (utf-8) | ndim:u32 | dims:u32*ndim | float32 data

Optimizer moments are stored as ordinary entries under the ``adam.m.`` and
``adam.v.`` prefixes so that training resumes exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ScanCorruptionError, ScanFormatError, ValidationError
from .model import ModelConfig, SparseUpsampler, build_model, parameter_shapes

MAGIC = b"SCKP"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: ModelConfig
    parameters: "OrderedDict[str, np.ndarray]"
    training_meta: dict = field(default_factory=dict)
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def validate(self) -> None:
        expected = parameter_shapes(self.config)
        got = {k: tuple(v.shape) for k, v in self.parameters.items()}
        if got != expected:
            missing = set(expected) - set(got)
            extra = set(got) - set(expected)
            wrong = {k for k in set(got) & set(expected) if got[k] != expected[k]}
            raise ValidationError(f"parameter mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]} shape={sorted(wrong)[:3]}")
        for k, v in self.parameters.items():
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"non-finite values in parameter {k}")

    @property
    def id(self) -> str:
        """Content hash of the parameters (first 16 hex digits of sha256)."""
        h = hashlib.sha256()
        for name, arr in self.parameters.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def to_model(self) -> SparseUpsampler:
        model = build_model(self.config)
        state = {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.parameters.items()}
        model.load_state_dict(state)
        return model

    @classmethod
    def from_model(cls, model: SparseUpsampler, training_meta: dict | None = None, optimizer=None) -> "Checkpoint":
        params = OrderedDict((k, v.detach().cpu().numpy().astype(np.float32)) for k, v in model.state_dict().items())
        ckpt = cls(model.cfg, params, dict(training_meta or {}))
        if optimizer is not None:
            ckpt.optimizer = adam_state_arrays(model, optimizer)
            ckpt.training_meta["adam_step"] = _adam_step(model, optimizer)
        return ckpt


def adam_state_arrays(model, optimizer) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for name, p in model.named_parameters():
        st = optimizer.state.get(p)
        if st:
            out["adam.m." + name] = st["exp_avg"].detach().numpy().astype(np.float32)
            out["adam.v." + name] = st["exp_avg_sq"].detach().numpy().astype(np.float32)
    return out


def _adam_step(model, optimizer) -> int:
    for p in model.parameters():
        st = optimizer.state.get(p)
        if st:
            return int(st["step"])
    return 0


def restore_adam(model, optimizer, ckpt: Checkpoint) -> None:
    step = ckpt.training_meta.get("adam_step", 0)
    if not ckpt.optimizer or step == 0:
        return
    for name, p in model.named_parameters():
        m = ckpt.optimizer.get("adam.m." + name)
        if m is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(np.array(m)),
            "exp_avg_sq": torch.from_numpy(np.array(ckpt.optimizer["adam.v." + name])),
        }


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    parts = [_U32.pack(len(nb)), nb, _U32.pack(arr.ndim)]
    parts += [_U32.pack(d) for d in arr.shape]
    parts.append(arr.tobytes())
    return b"".join(parts)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {"config": ckpt.config.to_dict(), "training_meta": ckpt.training_meta}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    entries = list(ckpt.parameters.items()) + list(ckpt.optimizer.items())
    body = b"".join(_pack_tensor(n, a) for n, a in entries)
    return MAGIC + _U32.pack(VERSION) + _U32.pack(len(hb)) + hb + _U32.pack(len(entries)) + body


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise ScanFormatError(f"bad checkpoint magic {bytes(buf[:4])!r}")
    try:
        off = 4
        (version,) = _U32.unpack_from(buf, off)
        if version != VERSION:
            raise ScanFormatError(f"unsupported checkpoint version {version}")
        (hlen,) = _U32.unpack_from(buf, off + 4)
        off += 8
        header = json.loads(buf[off : off + hlen].decode("utf-8"))
        off += hlen
        (n,) = _U32.unpack_from(buf, off)
        off += 4
        params: OrderedDict[str, np.ndarray] = OrderedDict()
        optim: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(n):
            (nl,) = _U32.unpack_from(buf, off)
            name = buf[off + 4 : off + 4 + nl].decode("utf-8")
            off += 4 + nl
            (ndim,) = _U32.unpack_from(buf, off)
            dims = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            count = int(np.prod(dims, dtype=np.int64))
            if off + 4 * count > len(buf):
                raise ScanCorruptionError(f"tensor {name} truncated")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
            off += 4 * count
            (optim if name.startswith("adam.") else params)[name] = arr
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ScanCorruptionError(f"damaged checkpoint: {exc}") from exc
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad model config in checkpoint: {exc}") from exc
    ckpt = Checkpoint(cfg, params, header.get("training_meta", {}), optim)
    ckpt.validate()
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.validate()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
