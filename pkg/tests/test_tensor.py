import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlwave.errors import DataError, ShapeMismatch, UnsupportedMode
from mlwave.tensor import (
    Mode3Tensor,
    fix_signs,
    hosvd,
    hosvd_batch,
    leading_left_vectors,
    mode_product,
    refold,
    unfold,
)

from oracles import svd_oracle


def test_unfold_example_ordering():
    v = np.fromfunction(lambda i, j, k: 4 * i + 2 * j + k, (2, 2, 2))
    t = Mode3Tensor(v)
    m = unfold(t, 2)
    assert m.shape == (2, 4)
    assert m[0].tolist() == [v[0, 0, 0], v[0, 0, 1], v[1, 0, 0], v[1, 0, 1]]
    assert m[1].tolist() == [v[0, 1, 0], v[0, 1, 1], v[1, 1, 0], v[1, 1, 1]]
    m3 = unfold(t, 3)
    assert m3[0].tolist() == [v[0, 0, 0], v[0, 1, 0], v[1, 0, 0], v[1, 1, 0]]


def test_unfold_of_ones():
    t = Mode3Tensor(np.ones((3, 4, 5)))
    assert np.all(unfold(t, 2) == 1) and unfold(t, 2).shape == (4, 15)
    assert np.all(unfold(t, 3) == 1) and unfold(t, 3).shape == (5, 12)


def test_unfold_refold_round_trip(rng):
    t = Mode3Tensor(rng.normal(size=(3, 4, 5)))
    for mode in (2, 3):
        assert refold(unfold(t, mode), mode, t.dims) == t


def test_flat_layout_is_mode1_fastest(rng):
    v = rng.normal(size=(3, 4, 5))
    t = Mode3Tensor(v)
    flat = t.flat()
    assert flat[1] == v[1, 0, 0] and flat[3] == v[0, 1, 0] and flat[12] == v[0, 0, 1]
    assert Mode3Tensor.from_flat(flat, (3, 4, 5)) == t
    with pytest.raises(ShapeMismatch):
        Mode3Tensor.from_flat(flat[:-1], (3, 4, 5))


def test_invalid_tensors_and_modes():
    with pytest.raises(ShapeMismatch):
        Mode3Tensor(np.zeros((2, 2)))
    with pytest.raises(DataError):
        Mode3Tensor(np.full((2, 2, 2), np.inf))
    with pytest.raises(UnsupportedMode):
        unfold(Mode3Tensor(np.zeros((2, 2, 2))), 1)
    with pytest.raises(ShapeMismatch):
        mode_product(Mode3Tensor(np.zeros((2, 3, 4))), np.zeros((2, 4)), 2)


def test_mode_product_examples(rng):
    t = Mode3Tensor(rng.normal(size=(3, 4, 5)))
    assert mode_product(t, np.eye(4), 2) == t
    assert np.all(mode_product(t, np.zeros((2, 5)), 3).values == 0)
    m = rng.normal(size=(2, 4))
    oracle = np.zeros((3, 2, 5))
    for i in range(3):
        for a in range(2):
            for k in range(5):
                oracle[i, a, k] = sum(m[a, j] * t.values[i, j, k] for j in range(4))
    assert np.max(np.abs(mode_product(t, m, 2).values - oracle)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mode_products_on_distinct_modes_commute(seed):
    rng = np.random.default_rng(seed)
    t = Mode3Tensor(rng.normal(size=(3, 4, 5)))
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(2, 5))
    left = mode_product(mode_product(t, a, 2), b, 3).values
    right = mode_product(mode_product(t, b, 3), a, 2).values
    assert np.max(np.abs(left - right)) < 1e-12


def test_mode_product_matches_unfolding_identity(rng):
    t = Mode3Tensor(rng.normal(size=(3, 4, 5)))
    m = rng.normal(size=(2, 5))
    p = mode_product(t, m, 3)
    assert np.allclose(unfold(p, 3), m @ unfold(t, 3))


def test_hosvd_rank_one_is_exact(rng):
    a, b, c = (v / np.linalg.norm(v) for v in (rng.normal(size=3), rng.normal(size=4), rng.normal(size=5)))
    t = Mode3Tensor(np.einsum("i,j,k->ijk", a, b, c))
    r = hosvd(t, 1, 1)
    assert np.max(np.abs(r.reconstruct().values - t.values)) < 1e-10


def test_hosvd_full_rank_is_exact(rng):
    t = Mode3Tensor(rng.normal(size=(3, 4, 5)))
    r = hosvd(t, 4, 5)
    assert np.max(np.abs(r.reconstruct().values - t.values)) < 1e-10


def test_hosvd_matches_independent_svd(rng):
    v = rng.normal(size=(3, 4, 5))
    r = hosvd(Mode3Tensor(v), 2, 2)
    core, u2, u3, s2, s3 = svd_oracle(v, 2, 2)
    assert np.max(np.abs(r.mode2_factors - u2)) < 1e-8
    assert np.max(np.abs(r.mode3_factors - u3)) < 1e-8
    assert np.max(np.abs(r.core.values - core)) < 1e-8
    assert np.allclose(r.mode2_singular_values, s2)
    assert np.allclose(r.mode3_singular_values[: len(s3)], s3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 5))
def test_hosvd_properties(seed, m2, m3):
    rng = np.random.default_rng(seed)
    t = Mode3Tensor(rng.normal(size=(3, 6, 5)))
    r = hosvd(t, m2, m3)
    assert np.max(np.abs(r.mode2_factors.T @ r.mode2_factors - np.eye(m2))) < 1e-10
    assert np.max(np.abs(r.mode3_factors.T @ r.mode3_factors - np.eye(m3))) < 1e-10
    err = np.sum((t.values - r.reconstruct().values) ** 2)
    bound = np.sum(r.mode2_singular_values[m2:] ** 2) + np.sum(r.mode3_singular_values[m3:] ** 2)
    assert err <= bound * (1 + 1e-9) + 1e-12
    lead = np.take_along_axis(r.mode2_factors, np.argmax(np.abs(r.mode2_factors), axis=0)[None], axis=0)
    assert np.all(lead >= 0)


def test_hosvd_rejects_bad_truncation(rng):
    t = Mode3Tensor(rng.normal(size=(3, 4, 5)))
    with pytest.raises(ShapeMismatch):
        hosvd(t, 5, 2)
    with pytest.raises(ShapeMismatch):
        hosvd(t, 2, 0)


def test_batch_equals_single(rng):
    v = rng.normal(size=(7, 3, 6, 5))
    core, u2, u3, _, _ = hosvd_batch(v, 3, 2)
    for k in range(7):
        r = hosvd(Mode3Tensor(v[k]), 3, 2)
        assert np.allclose(core[k], r.core.values, atol=1e-12)
        assert np.allclose(u2[k], r.mode2_factors, atol=1e-12)


def test_tall_unfoldings_use_the_small_gram_side(rng):
    # more rows than columns: rank-deficient Gram, completed deterministically
    a = rng.normal(size=(2, 10, 3))
    u, sv = leading_left_vectors(a, 5)
    assert u.shape == (2, 10, 5) and sv.shape == (2, 10)
    for b in range(2):
        assert np.allclose(u[b].T @ u[b], np.eye(5), atol=1e-10)
        ref_u, ref_s, _ = np.linalg.svd(a[b])
        assert np.allclose(sv[b, :3], ref_s)
        assert np.all(sv[b, 3:] == 0)
        assert np.allclose(u[b][:, :3], fix_signs(ref_u[:, :3]), atol=1e-8)
    again, _ = leading_left_vectors(a, 5)
    assert np.array_equal(u, again)
