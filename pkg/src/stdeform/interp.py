"""Trilinear sampling of clip feature maps at fractional (x, y, t) points.

Sampling is separable linear interpolation over the 8 lattice corners of the
cell containing the point. Corners outside the grid contribute the zero
vector (ZeroOutside policy), so every real-valued point is a legal input.
The gradient with respect to the point is exact off the lattice planes and
one-sided on them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ClipFeatureMap, Tensor


@dataclass(frozen=True)
class Point3:
    """Fractional spatio-temporal coordinate in grid units (unconstrained range)."""

    x: float
    y: float
    t: float

    def as_array(self) -> Tensor:
        return np.array([self.x, self.y, self.t], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Point3":
        return Point3(float(a[0]), float(a[1]), float(a[2]))

    def shifted(self, dx: float, dy: float, dt: float) -> "Point3":
        return Point3(self.x + dx, self.y + dy, self.t + dt)


class PaddingPolicy(enum.Enum):
    ZERO_OUTSIDE = "zero_outside"


def corner_stencil(p: Point3):
    """The 8 interpolation corners of `p` with weights and weight gradients.

    Returns a list of (cell, weight, dweight) where cell = (t, y, x) integer
    coordinates (possibly outside any grid), weight is the trilinear weight,
    and dweight is (dw/dx, dw/dy, dw/dt). Weights are nonnegative and sum to
    one regardless of where `p` lies.
    """
    bx, by, bt = math.floor(p.x), math.floor(p.y), math.floor(p.t)
    fx, fy, ft = p.x - bx, p.y - by, p.t - bt
    wx, wy, wt = (1.0 - fx, fx), (1.0 - fy, fy), (1.0 - ft, ft)
    # d/d(coord) of the axis weight: -1 for the floor corner, +1 for the ceil corner
    out = []
    for dt_ in (0, 1):
        for dy_ in (0, 1):
            for dx_ in (0, 1):
                w = wx[dx_] * wy[dy_] * wt[dt_]
                dw = (
                    (1.0 if dx_ else -1.0) * wy[dy_] * wt[dt_],
                    wx[dx_] * (1.0 if dy_ else -1.0) * wt[dt_],
                    wx[dx_] * wy[dy_] * (1.0 if dt_ else -1.0),
                )
                out.append(((bt + dt_, by + dy_, bx + dx_), w, dw))
    return out


def _in_grid(cell, grid: ClipFeatureMap) -> bool:
    t, y, x = cell
    return 0 <= t < grid.t_extent and 0 <= y < grid.h_extent and 0 <= x < grid.w_extent


def sample(grid: ClipFeatureMap, p: Point3) -> Tensor:
    """Interpolated feature vector of length C at point `p` (ZeroOutside)."""
    out = np.zeros(grid.c_extent)
    values = grid.values
    for cell, w, _ in corner_stencil(p):
        if _in_grid(cell, grid):
            out += w * values[cell]
    return out


def sample_backward(grid: ClipFeatureMap, p: Point3, upstream: Tensor):
    """Gradients of upstream . sample(grid, p) w.r.t. grid values and `p`.

    Returns (grad_grid, grad_p): grad_grid is a list of at most 8
    ((t, y, x), vector) pairs covering the in-grid corners, and grad_p is a
    Point3 of partial derivatives. Off the lattice planes both match central
    finite differences.
    """
    grad_cells = []
    gp = np.zeros(3)
    values = grid.values
    for cell, w, dw in corner_stencil(p):
        if _in_grid(cell, grid):
            grad_cells.append((cell, w * upstream))
            gp += float(upstream @ values[cell]) * np.asarray(dw)
    return grad_cells, Point3.from_array(gp)
