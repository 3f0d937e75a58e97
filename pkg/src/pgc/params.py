"""Named parameter container and its on-disk checkpoint format.

A model is a flat, insertion-ordered mapping of name -> float64 array.
Arrays are either trainable (weights, scales, the fusion scalar) or state
(batch-norm running statistics); both travel together in checkpoints.

Checkpoint layout (documented for external readers):

    bytes 0..7    magic  b"PGCKPT01"
    bytes 8..11   uint32 little-endian header length L
    bytes 12..    UTF-8 JSON header of L bytes:
                  {"version": 1,
                   "arrays": [{"name", "shape", "trainable"}, ...],
                   "meta": {...}}
    then          one payload per array, in header order:
                  C-order float64 little-endian, prod(shape) values

Everything is little-endian float64 regardless of host byte order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

MAGIC = b"PGCKPT01"


class ModelParams:
    """Ordered name -> array mapping with a per-array trainable flag."""

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, values: np.ndarray, trainable: bool = True) -> None:
        if name in self.arrays:
            raise ContractError(f"duplicate parameter name {name!r}")
        self.arrays[name] = np.ascontiguousarray(values, dtype=np.float64)
        self.trainable[name] = trainable

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.arrays[name]
        except KeyError:
            raise ContractError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def trainable_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if self.trainable[k]}

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items() if self.trainable[k]}

    def copy(self) -> "ModelParams":
        p = ModelParams()
        for k, v in self.arrays.items():
            p.add(k, v.copy(), self.trainable[k])
        return p

    def n_params(self) -> int:
        return sum(v.size for k, v in self.arrays.items() if self.trainable[k])


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Centered uniform init with 1/sqrt(fan_in) scale."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    entries = [{"name": k, "shape": list(v.shape), "trainable": params.trainable[k]}
               for k, v in params.arrays.items()]
    header = json.dumps({"version": 1, "arrays": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for v in params.arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}", code="MISSING_CHECKPOINT")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise DataError(f"not a checkpoint file: {path}", code="BAD_CHECKPOINT")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("version") != 1:
        raise DataError(f"unsupported checkpoint version in {path}", code="BAD_CHECKPOINT")
    params = ModelParams()
    off = 12 + hlen
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = blob[off:off + 8 * n]
        if len(raw) != 8 * n:
            raise DataError(f"truncated checkpoint: {path}", code="BAD_CHECKPOINT")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        params.add(e["name"], arr, bool(e["trainable"]))
        off += 8 * n
    return params, header.get("meta", {})
