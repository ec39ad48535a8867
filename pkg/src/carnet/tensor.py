"""Dense NCHW tensors, seeded random numbers and the tensor wire format.

Every value flowing through the engine is a 4-D ``float32`` array laid out
row-major as (batch, channels, height, width).  Vectors such as biases or
batch-norm scales are stored as ``(1, C, 1, 1)`` tensors so they broadcast
directly against feature maps and serialize with the same 4-D header.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable

import numpy as np

DTYPE = np.float32

_HEADER = struct.Struct("<4Q")


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def _as_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-D shape (n, c, h, w), got {shape}")
    if any(d < 0 for d in shape):
        raise ShapeError(f"negative dimension in shape {shape}")
    return shape


@dataclass(eq=False)
class Tensor:
    """A 4-D float32 array with an optional gradient buffer of the same shape."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=DTYPE)
        _as_shape(data.shape)
        self.data = data
        if self.grad is not None:
            grad = np.ascontiguousarray(self.grad, dtype=DTYPE)
            if grad.shape != data.shape:
                raise ShapeError(f"grad shape {grad.shape} does not match data shape {data.shape}")
            self.grad = grad

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(_as_shape(shape), dtype=DTYPE))


def randn(shape, rng: "Rng", mean: float = 0.0, std: float = 1.0) -> Tensor:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = _as_shape(shape)
    n = int(np.prod(shape))
    z = rng.normal(n)
    return Tensor((mean + std * z).reshape(shape))


def map_tensor(fn: Callable[[np.ndarray], np.ndarray], t: Tensor) -> Tensor:
    """Apply an elementwise function; the result shares no memory with ``t``."""
    out = np.asarray(fn(t.data.copy()), dtype=DTYPE)
    if out.shape != t.shape:
        raise ShapeError(f"map changed shape {t.shape} -> {out.shape}")
    return Tensor(out)


def add_inplace(dst: Tensor, src: Tensor) -> Tensor:
    if dst.shape != src.shape:
        raise ShapeError(f"cannot add tensors of shapes {dst.shape} and {src.shape}")
    dst.data += src.data
    return dst


def copy(src: Tensor) -> Tensor:
    grad = None if src.grad is None else src.grad.copy()
    return Tensor(src.data.copy(), grad)


# -- wire format -----------------------------------------------------------
# 4 x u64 little-endian shape header, then the little-endian float32 payload.

def write_tensor(fh: BinaryIO, t: Tensor):
    fh.write(_HEADER.pack(*t.shape))
    fh.write(t.data.astype("<f4", copy=False).tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise EOFError("truncated tensor header")
    shape = _HEADER.unpack(head)
    count = int(np.prod(shape))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise EOFError(f"truncated tensor payload: expected {4 * count} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)
    return Tensor(data)


def tensor_to_bytes(t: Tensor) -> bytes:
    return _HEADER.pack(*t.shape) + t.data.astype("<f4", copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> Tensor:
    import io

    return read_tensor(io.BytesIO(buf))


# -- random numbers ----------------------------------------------------------

class Rng:
    """Seeded generator: PCG64 (PCG-XSL-RR 128/64) integer stream plus Box-Muller.

    The raw 64-bit stream comes from numpy's ``PCG64`` bit generator, whose
    output sequence for a given seed is fixed by numpy's stability policy and is
    identical on every platform.  Uniforms use the top 53 bits of each draw;
    normals are built from pairs of uniforms with the Box-Muller transform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bitgen = np.random.PCG64(self.seed)

    def stream(self, k: int) -> "Rng":
        """Independent generator: this seed's stream advanced by ``k * 2**127`` draws."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._bitgen = np.random.PCG64(self.seed).jumped(int(k))
        return child

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(int(n))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 uniforms in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform_range(self, lo: float, hi: float, n: int | None = None):
        u = self.uniform(1 if n is None else n)
        v = lo + (hi - lo) * u
        return float(v[0]) if n is None else v

    def integer(self, lo: int, hi: int) -> int:
        """Integer in the closed range [lo, hi]."""
        span = hi - lo + 1
        return lo + min(int(self.uniform(1)[0] * span), span - 1)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard-normal float64 draws (consumes 2*ceil(n/2) raw values)."""
        m = (int(n) + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        u1 = 1.0 - u[:, 0]  # (0, 1]: keeps log finite
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((m, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[: int(n)]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def bernoulli(self, p: float) -> bool:
        return bool(self.uniform(1)[0] < p)
