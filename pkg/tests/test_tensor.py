import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import hopm_rank1_error, naive_mode_product, naive_reconstruct, naive_unfold
from tude.tensor import (
    RankError,
    TuckerModel,
    denoise_batch,
    fit_error,
    fold,
    hard_threshold_core,
    hooi,
    hosvd_init,
    mode_product,
    reconstruct,
    threshold_mask,
    tucker_batch,
    unfold,
)

dims = st.tuples(*(st.integers(1, 5) for _ in range(3)))
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def tensors(shape_strategy=dims):
    return shape_strategy.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_mode_product_identity(rng):
    A = rng.normal(size=(3, 4, 5))
    for mode in range(3):
        np.testing.assert_array_equal(mode_product(A, np.eye(A.shape[mode]), mode), A)


def test_mode_product_sum_of_ones():
    out = mode_product(np.ones((2, 2, 2)), np.array([[1.0, 1.0]]), 0)
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out, 2.0)


@pytest.mark.parametrize("mode", [0, 1, 2])
def test_mode_product_matches_loops(rng, mode):
    A = rng.normal(size=(3, 4, 5))
    X = rng.normal(size=(2, A.shape[mode]))
    np.testing.assert_allclose(mode_product(A, X, mode), naive_mode_product(A, X, mode), rtol=1e-12)


def test_mode_product_shape_mismatch(rng):
    with pytest.raises(ValueError):
        mode_product(rng.normal(size=(3, 4, 5)), np.ones((2, 4)), 0)


def test_unfold_trivial_and_round_trip(rng):
    assert unfold(np.ones((1, 1, 1)), 0).shape == (1, 1)
    A = rng.normal(size=(3, 4, 5))
    for mode in range(3):
        np.testing.assert_array_equal(fold(unfold(A, mode), mode, A.shape), A)
        np.testing.assert_array_equal(unfold(A, mode), naive_unfold(A, mode))


def test_unfold_rows_hold_their_index(rng):
    A = rng.permutation(60).reshape(3, 4, 5).astype(float)
    M = unfold(A, 0)
    for i in range(3):
        assert set(M[i]) == set(A[i].ravel())


def test_reconstruct_matches_loops(rng):
    core = rng.normal(size=(2, 3, 2))
    P, Q, R = (np.linalg.qr(rng.normal(size=(s, r)))[0] for s, r in [(4, 2), (3, 3), (5, 2)])
    model = TuckerModel(core, (P, Q, R))
    np.testing.assert_allclose(reconstruct(model), naive_reconstruct(core, P, Q, R), rtol=1e-12, atol=1e-14)


def test_reconstruct_rank_one():
    p, q, r = np.array([1.0, 0, 0]), np.array([0, 1.0]), np.array([0.6, 0.8])
    out = reconstruct(TuckerModel(np.full((1, 1, 1), 2.5), (p[:, None], q[:, None], r[:, None])))
    np.testing.assert_allclose(out, 2.5 * np.einsum("i,j,k->ijk", p, q, r))


def test_hosvd_full_rank_is_lossless(rng):
    A = rng.normal(size=(4, 3, 5))
    model = hosvd_init(A, A.shape)
    assert fit_error(A, model) < 1e-10


def test_hosvd_outer_product(rng):
    a, b, c = rng.normal(size=4), rng.normal(size=3), rng.normal(size=6)
    A = np.einsum("i,j,k->ijk", a, b, c)
    assert fit_error(A, hosvd_init(A, (1, 1, 1))) < 1e-10


def test_hosvd_factors_orthonormal(rng):
    model = hosvd_init(rng.normal(size=(5, 3, 6)), (2, 2, 2))
    for F in model.factors:
        assert np.linalg.norm(F.T @ F - np.eye(F.shape[1])) < 1e-8


def test_rank_too_large(rng):
    with pytest.raises(RankError):
        hooi(rng.normal(size=(4, 3, 5)), (3, 4, 3))
    with pytest.raises(RankError):
        hosvd_init(rng.normal(size=(4, 3, 5)), (0, 1, 1))


def test_hooi_exact_low_rank(rng):
    core = rng.normal(size=(2, 2, 3))
    factors = [np.linalg.qr(rng.normal(size=(s, r)))[0] for s, r in [(7, 2), (3, 2), (6, 3)]]
    A = reconstruct(TuckerModel(core, tuple(factors)))
    assert fit_error(A, hooi(A, (2, 2, 3))) < 1e-8


def test_hooi_monotone_and_beats_hosvd(rng):
    A = rng.normal(size=(10, 3, 8))
    model = hooi(A, (3, 3, 3))
    h = np.array(model.fit_history)
    assert np.all(np.diff(h) <= 1e-12 * h[0])
    assert fit_error(A, model) <= fit_error(A, hosvd_init(A, (3, 3, 3))) + 1e-12
    assert abs(fit_error(A, model) - min(h)) < 1e-10


def test_hooi_rank_one_matches_power_iteration(rng):
    A = rng.normal(size=(6, 3, 5))
    ours = fit_error(A, hooi(A, (1, 1, 1)))
    oracle = hopm_rank1_error(A)
    assert abs(ours - oracle) <= 1e-6 * oracle


def test_hooi_zero_tensor():
    model = hooi(np.zeros((4, 3, 5)), (2, 2, 2))
    assert np.all(np.isfinite(model.core))
    assert fit_error(np.zeros((4, 3, 5)), model) == 0.0


def test_rank_above_other_modes_product(rng):
    A = rng.normal(size=(6, 4, 5))
    model = hooi(A, (3, 1, 1))
    assert [F.shape for F in model.factors] == [(6, 3), (4, 1), (5, 1)]
    for F in model.factors:
        assert np.linalg.norm(F.T @ F - np.eye(F.shape[1])) < 1e-8


@pytest.mark.parametrize("starts", [1, 4])
def test_batch_matches_single(rng, starts):
    A = rng.normal(size=(5, 8, 4, 6))
    core, factors, _, _ = tucker_batch(A, (3, 2, 3), starts=starts)
    for g in range(5):
        single = hooi(A[g], (3, 2, 3), starts=starts)
        batched = reconstruct(TuckerModel(core[g], tuple(F[g] for F in factors)))
        np.testing.assert_allclose(batched, reconstruct(single), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_more_starts_never_fit_worse(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(int(rng.integers(2, 8)), int(rng.integers(2, 5)), int(rng.integers(2, 8))))
    ranks = tuple(int(rng.integers(1, d + 1)) for d in A.shape)
    one = fit_error(A, hooi(A, ranks, starts=1))
    assert fit_error(A, hooi(A, ranks)) <= one + 1e-12 * np.linalg.norm(A)


def test_threshold_worked_example():
    core = np.array([5.0, 0.4, -0.6]).reshape(1, 1, 3)
    model = TuckerModel(core, (np.ones((1, 1)), np.ones((1, 1)), np.eye(3)))
    kept = hard_threshold_core(model, 0.1).core.ravel()
    np.testing.assert_array_equal(kept, [5.0, 0.0, -0.6])


def test_threshold_zero_keeps_everything(rng):
    core = rng.normal(size=(3, 3, 3))
    core[0, 0, 0] = 0.0
    model = TuckerModel(core, tuple(np.eye(3) for _ in range(3)))
    np.testing.assert_array_equal(hard_threshold_core(model, 0.0).core, core)


def test_threshold_range_checked():
    with pytest.raises(ValueError):
        threshold_mask(np.ones((1, 1, 1)), 1.5)


@settings(max_examples=60, deadline=None)
@given(tensors(), st.floats(0, 1))
def test_threshold_properties(core, delta):
    mask = threshold_mask(core, delta)
    tau = delta * np.abs(core).max()
    np.testing.assert_array_equal(mask, np.abs(core) > tau)
    kept = np.where(mask, core, 0.0)
    assert np.linalg.norm(kept) <= np.linalg.norm(core)
    if delta < 1 and np.abs(core).max() > 0:
        assert mask[np.unravel_index(np.argmax(np.abs(core)), core.shape)]


@settings(max_examples=40, deadline=None)
@given(tensors(), st.data())
def test_mode_products_commute_and_compose(A, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 32 - 1)))
    X = rng.normal(size=(2, A.shape[0]))
    Y = rng.normal(size=(3, 2))
    Z = rng.normal(size=(2, A.shape[2]))
    assert _rel(mode_product(mode_product(A, X, 0), Y, 0), mode_product(A, Y @ X, 0)) <= 1e-10
    assert _rel(
        mode_product(mode_product(A, X, 0), Z, 2), mode_product(mode_product(A, Z, 2), X, 0)
    ) <= 1e-10


def _rel(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else np.linalg.norm(a - b) / scale


@settings(max_examples=40, deadline=None)
@given(tensors(), st.integers(0, 2), st.data())
def test_orthogonal_invariance(A, mode, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 32 - 1)))
    U = np.linalg.qr(rng.normal(size=(A.shape[mode], A.shape[mode])))[0]
    assert abs(np.linalg.norm(mode_product(A, U.T, mode)) - np.linalg.norm(A)) <= 1e-10 * (1 + np.linalg.norm(A))


@settings(max_examples=40, deadline=None)
@given(tensors(st.tuples(st.integers(2, 6), st.integers(1, 3), st.integers(2, 6))), st.data())
def test_hooi_history_never_increases(A, data):
    ranks = tuple(data.draw(st.integers(1, s)) for s in A.shape)
    model = hooi(A, ranks)
    h = np.array(model.fit_history)
    norm = np.linalg.norm(A)
    assert np.all(np.diff(h) <= 1e-9 * (1 + norm))
    for F in model.factors:
        assert np.linalg.norm(F.T @ F - np.eye(F.shape[1])) < 1e-8


def test_denoise_batch_passes_through_exact_low_rank(rng):
    factors = [np.linalg.qr(rng.normal(size=(s, 3)))[0] for s in (10, 3, 6)]
    # a superdiagonal core is already in HOOI's basis; every entry clears 0.1 * max
    core = np.zeros((3, 3, 3))
    core[0, 0, 0], core[1, 1, 1], core[2, 2, 2] = 1.0, 0.6, 0.3
    A = reconstruct(TuckerModel(core, tuple(factors)))
    np.testing.assert_allclose(denoise_batch(A[None], (3, 3, 3), 0.1)[0], A, atol=1e-6)
