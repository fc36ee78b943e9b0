import numpy as np
import pytest

from stdeform.errors import DimensionError, ParameterError
from stdeform.tensor_core import (
    ClipFeatureMap,
    RngSeed,
    as_tensor,
    flatten_index,
    make_rng,
    matvec,
    randn,
    unflatten_index,
)


class TestMatvec:
    def test_identity(self):
        out = matvec(np.eye(2), np.array([3.0, 5.0]))
        assert np.array_equal(out, [3.0, 5.0])

    def test_hand_multiplication(self):
        # [[1,2],[3,4]] @ (1,1) = (1+2, 3+4)
        out = matvec(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
        assert np.array_equal(out, [3.0, 7.0])

    def test_zero_matrix_annihilates(self):
        out = matvec(np.zeros((3, 2)), np.array([9.0, -4.0]))
        assert np.array_equal(out, np.zeros(3))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            matvec(np.zeros((3, 2)), np.zeros(3))
        assert "(3, 2)" in str(err.value) and "(3,)" in str(err.value)


class TestRandn:
    def test_zero_std_gives_constant(self):
        out = randn((4, 4), 1, mean=2.5, std=0.0)
        assert np.all(out == 2.5)

    def test_same_seed_same_bytes(self):
        a = randn((32, 3), 99)
        b = randn((32, 3), 99)
        assert a.tobytes() == b.tobytes()

    def test_different_seed_differs(self):
        assert not np.array_equal(randn((8,), 1), randn((8,), 2))

    def test_statistics_within_three_standard_errors(self):
        n = 100_000
        draws = randn((n,), 2024, mean=0.0, std=1.0)
        assert abs(draws.mean()) < 3.0 / np.sqrt(n)          # < 0.01
        assert abs(draws.std() - 1.0) < 3.0 / np.sqrt(2 * n)

    def test_negative_std_rejected(self):
        with pytest.raises(ParameterError):
            randn((3,), 0, std=-1.0)

    def test_rng_seed_type(self):
        assert np.array_equal(randn((5,), RngSeed(11)), randn((5,), 11))
        with pytest.raises(ParameterError):
            RngSeed(-1)
        with pytest.raises(ParameterError):
            RngSeed(2**64)


class TestIndexing:
    def test_origin_is_zero(self):
        assert flatten_index(0, 0, 0, (3, 4, 5)) == 0

    def test_enumerated_2x2x2(self):
        # Row-major over (t, y, x): cell (1,1,1) is the last of 8.
        assert flatten_index(1, 1, 1, (2, 2, 2)) == 7
        seen = [flatten_index(t, y, x, (2, 2, 2))
                for t in range(2) for y in range(2) for x in range(2)]
        assert seen == list(range(8))

    def test_round_trip_bijection(self):
        dims = (3, 2, 4)
        for i in range(3 * 2 * 4):
            t, y, x = unflatten_index(i, dims)
            assert flatten_index(t, y, x, dims) == i

    def test_out_of_range_rejected(self):
        with pytest.raises(IndexError):
            flatten_index(0, 2, 0, (3, 2, 4))
        with pytest.raises(IndexError):
            flatten_index(0, 0, -1, (3, 2, 4))
        with pytest.raises(IndexError):
            unflatten_index(24, (3, 2, 4))


class TestTensorValidation:
    def test_rank_bounds(self):
        with pytest.raises(DimensionError):
            as_tensor(np.zeros((2, 2, 2, 2, 2)))
        with pytest.raises(DimensionError):
            as_tensor(np.zeros((2, 0)))  # empty extent

    def test_row_major_and_dtype(self):
        arr = as_tensor([[1, 2], [3, 4]])
        assert arr.dtype == np.float64 and arr.flags["C_CONTIGUOUS"]


class TestClipFeatureMap:
    def test_extents_and_cell_count(self):
        fmap = ClipFeatureMap(np.zeros((2, 3, 4, 5)))
        assert (fmap.t_extent, fmap.h_extent, fmap.w_extent, fmap.c_extent) == (2, 3, 4, 5)
        assert fmap.num_cells == 24

    def test_row_major_layout_matches_flatten_index(self):
        fmap = ClipFeatureMap(randn((2, 3, 4, 5), 5))
        flat = fmap.values.reshape(-1, 5)
        dims = (2, 3, 4)
        for t in range(2):
            for y in range(3):
                for x in range(4):
                    assert np.array_equal(fmap.at(t, y, x), flat[flatten_index(t, y, x, dims)])

    def test_requires_rank_four(self):
        with pytest.raises(DimensionError):
            ClipFeatureMap(np.zeros((2, 3, 4)))

    def test_at_checks_range(self):
        fmap = ClipFeatureMap(np.zeros((1, 1, 1, 1)))
        with pytest.raises(IndexError):
            fmap.at(0, 0, 1)


def test_philox_stream_is_stable():
    # Frozen draws pin the generator family; regressions here mean the RNG
    # changed and every seeded test vector in the suite is invalid.
    rng = make_rng(0)
    expected = [0.011546754286331562, 0.24154919656271812, 0.11142585551493822]
    assert np.allclose(rng.uniform(size=3), expected, rtol=0, atol=1e-15)
