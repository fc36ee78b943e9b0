import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stdeform.interp import Point3, corner_stencil, sample, sample_backward
from stdeform.tensor_core import ClipFeatureMap, make_rng, randn

GRID = ClipFeatureMap(randn((3, 4, 5, 2), 17))

coords = st.floats(min_value=-6.0, max_value=9.0, allow_nan=False)


def test_lattice_exactness():
    p = Point3(x=1.0, y=2.0, t=0.0)
    assert np.array_equal(sample(GRID, p), GRID.values[0, 2, 1])


def test_constant_grid_reproduced():
    grid = ClipFeatureMap(np.full((2, 2, 2, 3), 4.25))
    assert np.allclose(sample(grid, Point3(0.3, 0.7, 0.5)), 4.25, rtol=0, atol=1e-15)


def test_midpoint_is_mean_along_one_axis():
    p = Point3(x=0.5, y=0.0, t=0.0)
    expected = 0.5 * (GRID.values[0, 0, 0] + GRID.values[0, 0, 1])
    assert np.allclose(sample(GRID, p), expected, rtol=0, atol=1e-15)


def test_far_outside_is_zero():
    assert np.array_equal(sample(GRID, Point3(-5.0, -5.0, -5.0)), np.zeros(2))


@given(x=coords, y=coords, t=coords)
def test_partition_of_unity(x, y, t):
    stencil = corner_stencil(Point3(x, y, t))
    weights = [w for _, w, _ in stencil]
    assert all(w >= 0 for w in weights)
    assert abs(sum(weights) - 1.0) <= 1e-12


@given(x=st.floats(0.0, 4.0), y=st.floats(0.0, 3.0), t=st.floats(0.0, 2.0))
@settings(max_examples=60)
def test_affine_reproduction(x, y, t):
    ts, ys, xs = np.meshgrid(np.arange(3.0), np.arange(4.0), np.arange(5.0), indexing="ij")
    values = np.stack([1.5 + 2 * xs - 0.5 * ys + 3 * ts, 0.25 * xs + ys - ts], axis=-1)
    grid = ClipFeatureMap(values)
    got = sample(grid, Point3(x, y, t))
    want = np.array([1.5 + 2 * x - 0.5 * y + 3 * t, 0.25 * x + y - t])
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_continuity_across_cell_faces():
    rng = make_rng(5)
    eps = 1e-10
    for _ in range(200):
        axis = rng.integers(0, 3)
        base = [float(rng.uniform(0.2, 3.8)), float(rng.uniform(0.2, 2.8)),
                float(rng.uniform(0.2, 1.8))]
        base[axis] = float(rng.integers(1, (4, 3, 2)[axis]))  # sit on a lattice plane
        lo, hi = list(base), list(base)
        lo[axis] -= eps
        hi[axis] += eps
        jump = np.max(np.abs(sample(GRID, Point3(*lo)) - sample(GRID, Point3(*hi))))
        assert jump < 1e-9


class TestSampleBackward:
    def test_lattice_point_puts_unit_weight_on_cell(self):
        upstream = np.array([1.0, 0.0])
        cells, _ = sample_backward(GRID, Point3(2.0, 1.0, 1.0), upstream)
        weights = {cell: vec for cell, vec in cells}
        assert np.array_equal(weights[(1, 1, 2)], upstream)
        total = sum(vec[0] for vec in weights.values())
        assert total == pytest.approx(1.0, abs=1e-15)

    def test_constant_grid_has_zero_point_gradient(self):
        grid = ClipFeatureMap(np.full((2, 2, 2, 3), 2.0))
        _, g_p = sample_backward(grid, Point3(0.4, 0.6, 0.3), np.ones(3))
        assert np.allclose(g_p.as_array(), 0.0, rtol=0, atol=1e-12)

    def test_matches_central_differences(self):
        rng = make_rng(23)
        grid = ClipFeatureMap(rng.normal(size=(2, 2, 2, 3)))
        upstream = rng.normal(size=3)
        h = 1e-5
        for _ in range(20):
            p = Point3(*(rng.uniform(0.05, 0.95, size=3)))
            cells, g_p = sample_backward(grid, p, upstream)

            # Finite differences in the point coordinates.
            for axis, ana in zip(range(3), g_p.as_array()):
                shift = [0.0, 0.0, 0.0]
                shift[axis] = h
                f_plus = upstream @ sample(grid, p.shifted(*shift))
                shift[axis] = -h
                f_minus = upstream @ sample(grid, p.shifted(*shift))
                num = (f_plus - f_minus) / (2 * h)
                assert abs(ana - num) <= 1e-6 * max(abs(ana), abs(num), 1.0)

            # Finite differences in a touched grid cell.
            (t, y, x), vec = cells[0]
            for c in range(3):
                saved = grid.values[t, y, x, c]
                grid.values[t, y, x, c] = saved + h
                f_plus = upstream @ sample(grid, p)
                grid.values[t, y, x, c] = saved - h
                f_minus = upstream @ sample(grid, p)
                grid.values[t, y, x, c] = saved
                num = (f_plus - f_minus) / (2 * h)
                assert abs(vec[c] - num) <= 1e-6 * max(abs(vec[c]), abs(num), 1.0)

    def test_at_most_eight_cells(self):
        cells, _ = sample_backward(GRID, Point3(1.5, 1.5, 0.5), np.ones(2))
        assert len(cells) <= 8
