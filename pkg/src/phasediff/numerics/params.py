"""Flat parameter vectors with named segments.

All trainable state lives in one contiguous float array per network bundle;
named segments map layer names to (offset, shape) views into it.  Gradients,
optimizer moments and serialized checkpoints all share this layout, so a
parameter update is a single vector operation and round-trips are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError

__all__ = ["ParamVector", "GradientRecord"]


def _size(shape) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


@dataclass
class ParamVector:
    """One flat array plus a name -> (offset, shape) segment table."""

    data: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]

    @classmethod
    def zeros(cls, shapes: dict[str, tuple[int, ...]], dtype=np.float64) -> "ParamVector":
        layout, offset = {}, 0
        for name, shape in shapes.items():
            shape = tuple(int(s) for s in shape)
            layout[name] = (offset, shape)
            offset += _size(shape)
        return cls(np.zeros(offset, dtype=dtype), layout)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def view(self, name: str) -> np.ndarray:
        """Writable view of one segment, reshaped to its declared shape."""
        offset, shape = self.layout[name]
        return self.data[offset : offset + _size(shape)].reshape(shape)

    def views(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Views of every segment under `prefix`, keyed by the stripped name."""
        out = {}
        for name in self.layout:
            if name.startswith(prefix):
                out[name[len(prefix) :]] = self.view(name)
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), dict(self.layout))

    def like(self, data: np.ndarray) -> "ParamVector":
        """New vector with this layout wrapping `data` (no copy)."""
        if data.shape != self.data.shape:
            raise ShapeError("ParamVector.like", f"expected {self.data.shape}, got {data.shape}")
        return ParamVector(data, dict(self.layout))

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.data, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, layout: dict, dtype=np.float64) -> "ParamVector":
        data = np.frombuffer(raw, dtype="<f8").astype(dtype, copy=True)
        pv = cls(data, {k: (int(o), tuple(s)) for k, (o, s) in layout.items()})
        total = sum(_size(s) for _, s in pv.layout.values())
        if total != data.size:
            raise ShapeError("ParamVector.from_bytes", f"layout covers {total}, block has {data.size}")
        return pv

    def flatten_segments(self, segments: dict[str, np.ndarray]) -> np.ndarray:
        """Pack a name -> array dict into one flat vector in layout order.

        Missing segments contribute zeros; shapes must match the layout.
        """
        flat = np.zeros(self.size, dtype=self.dtype)
        for name, arr in segments.items():
            offset, shape = self.layout[name]
            if tuple(arr.shape) != shape:
                raise ShapeError("flatten_segments", f"{name}: expected {shape}, got {arr.shape}")
            flat[offset : offset + _size(shape)] = np.asarray(arr, dtype=self.dtype).ravel()
        return flat


@dataclass
class GradientRecord:
    """Scalar loss plus its gradient in some ParamVector's layout."""

    loss: float
    grad: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.grad = np.asarray(self.grad)
        if self.grad.ndim != 1:
            raise ShapeError("GradientRecord", f"gradient must be flat, got shape {self.grad.shape}")
