"""Exact multiply/add accounting for both attention paths.

"Complexity" is realized as exact scalar-multiply tallies rather than wall
clock: the analytic cost formulas and the instrumented forward passes are
built from the same accounting helpers, so they agree to the integer. Only
channel-touching multiply/accumulate work is tallied; exponentials, softmax
normalization, and the O(1)-per-corner interpolation weight products are
excluded by construction of the model.

Cost model terms (multiplies), with C_v = C/M:

dense attention, N_q queries over N_k distinct keys:
    N_q*C^2            query projections (U)
    2*N_k*C^2          key and value projections (V, W'), once per distinct key
    M*N_q*N_k*C_v      logit dot products
    M*N_q*N_k*C_v      attention-weighted value sums
    N_q*C^2            output projections (W)

deformable attention, encoder setting (every cell is a query, N_q = N_k):
    N_q*C^2            per-head value maps, projected once per cell
    N_q*(3MK + MK)*C   offset and weight heads
    N_q*M*K*8*C_v      trilinear gathers in projected space (8 corners each)
    N_q*M*K*C_v        attention weighting
    N_q*C^2            output projections
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dense_attention, stdeform_attention
from .errors import ParameterError
from .tensor_core import ClipFeatureMap, randn


@dataclass(frozen=True)
class OpCount:
    """Exact tally of one forward pass; additive under composition."""

    multiplies: int = 0
    adds: int = 0
    interpolation_reads: int = 0

    def __add__(self, other: "OpCount") -> "OpCount":
        return OpCount(
            self.multiplies + other.multiplies,
            self.adds + other.adds,
            self.interpolation_reads + other.interpolation_reads,
        )

    def as_dict(self) -> dict:
        return {
            "multiplies": self.multiplies,
            "adds": self.adds,
            "interp_reads": self.interpolation_reads,
        }


class OpCounter:
    """Mutable accumulator threaded through instrumented forward passes.

    The analytic cost formulas drive the same methods with the same
    multiplicities, which is what makes counter/formula agreement exact.
    """

    def __init__(self):
        self.multiplies = 0
        self.adds = 0
        self.interpolation_reads = 0

    def add_matvec(self, rows: int, cols: int, bias: bool = False, times: int = 1):
        self.multiplies += times * rows * cols
        self.adds += times * (rows * (cols - 1) + (rows if bias else 0))

    def add_dot(self, n: int, times: int = 1):
        self.multiplies += times * n
        self.adds += times * (n - 1)

    def add_weighted_sum(self, terms: int, length: int, times: int = 1):
        self.multiplies += times * terms * length
        self.adds += times * (terms - 1) * length

    def add_interp_sample(self, length: int, times: int = 1):
        # 8 corner reads, 8 weight-value products and a 7-term sum per
        # channel. The full stencil is charged even when out-of-grid corners
        # short-circuit to zero, so the cost is a pure function of the
        # sample count.
        self.multiplies += times * 8 * length
        self.adds += times * 7 * length
        self.interpolation_reads += times * 8

    def add_plain_adds(self, n: int, times: int = 1):
        self.adds += times * n

    def snapshot(self) -> OpCount:
        return OpCount(self.multiplies, self.adds, self.interpolation_reads)


def dense_attn_cost(n_q: int, n_k: int, c: int, m: int) -> OpCount:
    """Analytic cost of dense attention; see the module docstring for terms."""
    _check_dims(c, m, n_q=n_q, n_k=n_k)
    cv = c // m
    ctr = OpCounter()
    ctr.add_matvec(cv, c, times=m * n_q)
    ctr.add_matvec(cv, c, times=2 * m * n_k)
    ctr.add_dot(cv, times=m * n_q * n_k)
    ctr.add_weighted_sum(n_k, cv, times=m * n_q)
    ctr.add_matvec(c, cv, times=m * n_q)
    ctr.add_plain_adds((m - 1) * c, times=n_q)
    return ctr.snapshot()


def stdeform_cost(n_q: int, c: int, m: int, k: int) -> OpCount:
    """Analytic cost of the deformable encoder pass (value maps amortized).

    Grid extents do not appear: with N_q fixed the count is independent of
    H, W, T.
    """
    _check_dims(c, m, n_q=n_q, k=k)
    cv = c // m
    ctr = OpCounter()
    ctr.add_matvec(cv, c, times=m * n_q)
    ctr.add_matvec(3 * m * k, c, bias=True, times=n_q)
    ctr.add_matvec(m * k, c, bias=True, times=n_q)
    ctr.add_interp_sample(cv, times=n_q * m * k)
    ctr.add_weighted_sum(k, cv, times=n_q * m)
    ctr.add_matvec(c, cv, times=m * n_q)
    ctr.add_plain_adds((m - 1) * c, times=n_q)
    return ctr.snapshot()


def _check_dims(c, m, **extents):
    for name, value in extents.items():
        if value < 1:
            raise ParameterError(f"{name} must be positive, got {value}")
    if c < 1 or m < 1 or c % m != 0:
        raise ParameterError(f"model_dim {c} must be a positive multiple of num_heads {m}")


@dataclass
class ScalingReport:
    """Measured counts over a grid-size sweep with a log-log slope fit."""

    path: str
    cells: list[int]
    counts: list[OpCount]
    slope: float
    residual: float

    def rows(self) -> list[tuple]:
        return [
            (n, c.multiplies, c.adds, c.interpolation_reads)
            for n, c in zip(self.cells, self.counts)
        ]

    def as_dict(self) -> dict:
        return {
            "path": self.path,
            "samples": [
                {"cells": n, **c.as_dict()} for n, c in zip(self.cells, self.counts)
            ],
            "slope": self.slope,
            "residual": self.residual,
        }


def fit_loglog_slope(cells, multiplies) -> tuple[float, float]:
    """Least-squares slope of log(multiplies) vs log(cells) plus RMS residual."""
    lx = np.log(np.asarray(cells, dtype=np.float64))
    ly = np.log(np.asarray(multiplies, dtype=np.float64))
    design = np.vstack([lx, np.ones_like(lx)]).T
    (slope, intercept), *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - design @ np.array([slope, intercept])
    return float(slope), float(np.sqrt(np.mean(resid**2)))


def cube_dims(cells: int) -> tuple[int, int, int]:
    side = round(cells ** (1.0 / 3.0))
    if side**3 != cells:
        raise ParameterError(f"grid size {cells} is not a perfect cube")
    return side, side, side


def measure_encoder(path: str, cells: list[int], c: int, m: int, k: int, seed: int) -> ScalingReport:
    """Run instrumented attention passes over a grid-size sweep and fit the slope.

    `path` selects "dense" or "deformable". Grid sizes must be >= 4 strictly
    increasing perfect cubes. The counts come from real forward passes over
    seeded random feature maps.
    """
    if len(cells) < 4:
        raise ParameterError(f"need at least 4 grid sizes, got {len(cells)}")
    if any(b <= a for a, b in zip(cells, cells[1:])):
        raise ParameterError(f"grid sizes must be strictly increasing, got {cells}")
    if path not in ("dense", "deformable"):
        raise ParameterError(f"unknown path {path!r}")

    counts = []
    for i, n in enumerate(cells):
        tt, hh, ww = cube_dims(n)
        fmap = ClipFeatureMap(randn((tt, hh, ww, c), seed + i))
        ctr = OpCounter()
        if path == "dense":
            params = dense_attention.DenseAttnParams.random(m, c, seed)
            dense_attention.dense_encoder_pass(params, fmap, counter=ctr)
        else:
            params = stdeform_attention.default_params(m, c, k, seed)
            stdeform_attention.deformable_encoder_pass(params, fmap, counter=ctr)
        counts.append(ctr.snapshot())

    slope, residual = fit_loglog_slope(cells, [cnt.multiplies for cnt in counts])
    return ScalingReport(path, list(cells), counts, slope, residual)
