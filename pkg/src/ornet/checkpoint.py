"""Binary checkpoint container.

Layout (little-endian)::

    b"ORNT"  u32 version
    u32 len, config hash (ASCII hex)
    u32 len, metadata (UTF-8 JSON)
    u32 array count, then per array:
        u32 len, name (UTF-8)   u32 ndim   ndim x u64 dims   float64 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ORNet

MAGIC = b"ORNT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    train_config: dict = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = -1
    step: int = 0
    rng_state: dict | None = None
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = ModelConfig.from_dict(self.model_config).config_hash()

    def build_model(self) -> ORNet:
        cfg = ModelConfig.from_dict(self.model_config)
        if cfg.config_hash() != self.config_hash:
            raise CheckpointError("checkpoint config hash does not match its stored model config")
        net = ORNet(cfg)
        try:
            net.load_state_dict(self.params)
        except ValueError as exc:
            raise CheckpointError(f"checkpoint parameters incompatible with config: {exc}") from exc
        return net


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "adam_t": ckpt.adam_t,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
    }
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"adam_m/{k}", v) for k, v in ckpt.adam_m.items()]
    arrays += [(f"adam_v/{k}", v) for k, v in ckpt.adam_v.items()]
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(ckpt.config_hash),
              _pack_str(json.dumps(meta, sort_keys=True)), struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(a.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an ORNT checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    config_hash = r.string()
    meta = json.loads(r.string())
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"{path}: unknown array group {group!r}")
        groups[group][key] = arr
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(
        model_config=meta["model_config"], params=groups["param"], train_config=meta["train_config"],
        adam_m=groups["adam_m"], adam_v=groups["adam_v"], adam_t=meta["adam_t"], epoch=meta["epoch"],
        step=meta["step"], rng_state=meta["rng_state"], config_hash=config_hash,
    )
