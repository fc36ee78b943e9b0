"""Dense-array substrate: shapes, seeded randomness, index bookkeeping.

Tensors are plain float64 C-contiguous numpy arrays of rank 1..4. All
randomness flows through Philox (a counter-based generator), so streams are
reproducible bit-for-bit across runs and platforms for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

Tensor = np.ndarray

MAX_RANK = 4


@dataclass(frozen=True)
class RngSeed:
    """Seed for the Philox4x32-10 counter-based generator."""

    seed: int

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


def make_rng(seed: int | RngSeed) -> np.random.Generator:
    """Deterministic generator for a seed; same seed gives an identical stream."""
    if isinstance(seed, RngSeed):
        seed = seed.seed
    return np.random.Generator(np.random.Philox(key=seed))


def split_seed(seed: int | RngSeed, n: int) -> list[int]:
    """Derive `n` independent child seeds from one parent seed."""
    if isinstance(seed, RngSeed):
        seed = seed.seed
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def as_tensor(values) -> Tensor:
    """Coerce to a float64 row-major array of rank 1..4, validating extents."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise DimensionError(f"tensor rank must be 1..{MAX_RANK}, got shape {arr.shape}")
    if any(extent < 1 for extent in arr.shape):
        raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
    return arr


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """Matrix-vector product: out[i] = sum_j m[i, j] * v[j]."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(
            f"matvec shape mismatch: matrix {tuple(m.shape)} vs vector {tuple(v.shape)}"
        )
    return m @ v


def randn(shape, seed: int | RngSeed, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """Seeded normal draws with the given mean and standard deviation."""
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    rng = make_rng(seed)
    return as_tensor(rng.normal(loc=mean, scale=std, size=shape) if std > 0
                     else np.full(shape, float(mean)))


@dataclass(frozen=True)
class ClipFeatureMap:
    """Feature volume of a video clip, laid out [T, H, W, C] (channels innermost)."""

    values: Tensor

    def __post_init__(self):
        arr = as_tensor(self.values)
        if arr.ndim != 4:
            raise DimensionError(f"clip feature map must be rank 4 [T,H,W,C], got {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def t_extent(self) -> int:
        return self.values.shape[0]

    @property
    def h_extent(self) -> int:
        return self.values.shape[1]

    @property
    def w_extent(self) -> int:
        return self.values.shape[2]

    @property
    def c_extent(self) -> int:
        return self.values.shape[3]

    @property
    def num_cells(self) -> int:
        """Flattened key count T*H*W."""
        return self.t_extent * self.h_extent * self.w_extent

    def at(self, t: int, y: int, x: int) -> Tensor:
        """Feature vector of length C at an integer cell."""
        check_cell((t, y, x), (self.t_extent, self.h_extent, self.w_extent))
        return self.values[t, y, x]


def check_cell(cell, dims):
    t, y, x = cell
    tt, hh, ww = dims
    if not (0 <= t < tt and 0 <= y < hh and 0 <= x < ww):
        raise IndexError(f"cell (t={t}, y={y}, x={x}) outside grid {tt}x{hh}x{ww}")


def flatten_index(t: int, y: int, x: int, dims) -> int:
    """Linear key index of cell (t, y, x) in a row-major [T, H, W] grid."""
    check_cell((t, y, x), dims)
    _, hh, ww = dims
    return (t * hh + y) * ww + x


def unflatten_index(i: int, dims) -> tuple[int, int, int]:
    """Inverse of flatten_index."""
    tt, hh, ww = dims
    if not 0 <= i < tt * hh * ww:
        raise IndexError(f"linear index {i} outside grid {tt}x{hh}x{ww}")
    t, rest = divmod(i, hh * ww)
    y, x = divmod(rest, ww)
    return t, y, x
