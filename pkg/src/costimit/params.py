"""Flat parameter vectors, their on-disk format, and the Adam rule.

Every network in this package stores its weights in one contiguous float64
array described by a manifest of (name, rows, cols) blocks.  Named views into
the flat array are plain numpy views, so optimizers and curvature products
operate on a single vector while forward passes see shaped matrices.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

MAGIC = b"CPRM"
FORMAT_VERSION = 1


class BlockShape(NamedTuple):
    name: str
    rows: int
    cols: int

    @property
    def size(self) -> int:
        return self.rows * self.cols


class StaleCacheError(RuntimeError):
    """Backward pass requested against a batch other than the cached one."""


class ParamVector:
    """One flat float64 vector plus a manifest of named (rows, cols) blocks."""

    def __init__(self, values: np.ndarray, manifest: Iterable[BlockShape]):
        manifest = tuple(BlockShape(*b) for b in manifest)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("parameter vector must be 1-D")
        total = sum(b.size for b in manifest)
        if values.size != total:
            raise ValueError(f"vector has {values.size} entries, manifest wants {total}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite entries")
        names = [b.name for b in manifest]
        if len(set(names)) != len(names):
            raise ValueError("duplicate block names in manifest")
        self.values = values
        self.manifest = manifest
        self._offsets: dict[str, tuple[int, BlockShape]] = {}
        off = 0
        for b in manifest:
            self._offsets[b.name] = (off, b)
            off += b.size

    @classmethod
    def zeros(cls, manifest: Iterable[BlockShape]) -> "ParamVector":
        manifest = tuple(BlockShape(*b) for b in manifest)
        return cls(np.zeros(sum(b.size for b in manifest)), manifest)

    def block(self, name: str) -> np.ndarray:
        """Shaped view into the flat vector; writes through."""
        off, b = self._offsets[name]
        return self.values[off : off + b.size].reshape(b.rows, b.cols)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.manifest)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.manifest)

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size


def save_params(params: ParamVector, path) -> None:
    """Write a versioned header (JSON manifest) followed by little-endian float64 data."""
    header = json.dumps(
        {"version": FORMAT_VERSION, "blocks": [[b.name, b.rows, b.cols] for b in params.manifest]}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a parameter file (bad magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        manifest = tuple(BlockShape(n, r, c) for n, r, c in header["blocks"])
        raw = fh.read()
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ParamVector(values, manifest)


@dataclass
class Adam:
    """Adam over a flat vector, with bias correction and a step direction.

    direction="descent" subtracts the update, "ascent" adds it.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, values: np.ndarray, grad: np.ndarray, direction: str = "descent") -> np.ndarray:
        if direction not in ("descent", "ascent"):
            raise ValueError(f"unknown direction {direction!r}")
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise ValueError("non-finite gradient passed to Adam")
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        update = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return values - update if direction == "descent" else values + update

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": None if self.m is None else self.m.copy(),
            "v": None if self.v is None else self.v.copy(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        self.m = None if state["m"] is None else state["m"].copy()
        self.v = None if state["v"] is None else state["v"].copy()
