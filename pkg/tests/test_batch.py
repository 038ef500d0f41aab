import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmspc.batch import fit_mpca, fold_batchwise, project_partial, score_incomplete, unfold_batchwise
from fedmspc.errors import IllConditionedProjectionError, InvalidInputError
from fedmspc.mspc import fit_pca, scores


def batch_tensor(rng, n_batches=30, n_vars=3, n_time=8, rank=2, noise=0.05):
    t = rng.standard_normal((n_batches, rank)) @ rng.standard_normal((rank, n_vars * n_time))
    return fold_batchwise(t + noise * rng.standard_normal(t.shape), n_vars, n_time)


def test_unfold_shape_and_order(rng):
    t = rng.standard_normal((2, 3, 4))
    view = unfold_batchwise(t)
    assert view.matrix.shape == (2, 12)
    # column k*J + j holds variable j at time k
    assert view.matrix[1, 2 * 3 + 1] == t[1, 1, 2]
    assert view.column_map[7] == (2, 1)


def test_single_variable(rng):
    t = rng.standard_normal((4, 1, 5))
    assert np.array_equal(unfold_batchwise(t).matrix, t[:, 0, :])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 6))
def test_fold_round_trip(i, j, k):
    t = np.arange(i * j * k, dtype=float).reshape(i, j, k)
    assert np.array_equal(fold_batchwise(unfold_batchwise(t).matrix, j, k), t)


def test_bad_tensor():
    with pytest.raises(InvalidInputError):
        unfold_batchwise(np.zeros((2, 3)))


def test_mpca_matches_manual_unfolding(rng):
    t = batch_tensor(rng)
    model = fit_mpca(t, strict_limits=False)
    ref = fit_pca(unfold_batchwise(t).matrix, strict_limits=False)
    assert model.loadings.shape[0] == 24
    assert model.batch_shape == (3, 8)
    for f in ("loadings", "singular_values", "mean", "scale"):
        assert np.allclose(getattr(model, f), getattr(ref, f), rtol=0, atol=1e-12)
    assert model.t2_limit == ref.t2_limit and model.q_limit == ref.q_limit


@pytest.mark.filterwarnings("ignore::fedmspc.mspc.DegenerateLimitWarning")
def test_rank_one_tensor(rng):
    base = np.outer(rng.standard_normal(20), rng.standard_normal(12))
    model = fit_mpca(fold_batchwise(base, 3, 4), 1.0, standardize=False, strict_limits=False)
    assert model.n_components == 1


def test_incomplete_at_full_time_equals_scores(rng):
    t = batch_tensor(rng)
    model = fit_mpca(t, strict_limits=False)
    x = unfold_batchwise(batch_tensor(rng, n_batches=3)).matrix
    assert np.allclose(score_incomplete(model, x, 8), scores(model, x), atol=1e-10)


def test_single_column_least_squares(rng):
    v = rng.standard_normal((5, 1))
    x = rng.standard_normal(5)
    assert project_partial(v, x)[0] == pytest.approx(x @ v[:, 0] / (v[:, 0] @ v[:, 0]))


def test_half_time_matches_lstsq(rng):
    t = batch_tensor(rng)
    model = fit_mpca(t, strict_limits=False)
    x = unfold_batchwise(batch_tensor(rng, n_batches=4)).matrix
    head = 4 * 3
    xs = (x[:, :head] - model.mean[:head]) / model.scale[:head]
    expected = np.linalg.lstsq(model.loadings[:head], xs.T, rcond=None)[0].T
    assert np.allclose(score_incomplete(model, x[:, :head], 4), expected, rtol=1e-8, atol=1e-10)


def test_ill_conditioned_reports_k():
    v = np.zeros((4, 2))
    v[0, 0] = 1.0
    with pytest.raises(IllConditionedProjectionError) as info:
        project_partial(v, np.ones(4), k=3)
    assert info.value.k == 3


def test_k_out_of_range(rng):
    model = fit_mpca(batch_tensor(rng), strict_limits=False)
    with pytest.raises(InvalidInputError):
        score_incomplete(model, np.zeros(27), 9)
