import math

import numpy as np
import pytest

from fedmspc.errors import DegenerateModelError, InvalidInputError, LimitValidityError
from fedmspc.mspc import (
    DegenerateLimitWarning,
    PcaModel,
    choose_n_components,
    fit_pca,
    hotelling_t2,
    load_model,
    monitor,
    q_contributions,
    q_control_limit,
    q_statistic,
    save_model,
    scores,
    statistics,
    t2_contributions,
    t2_control_limit,
)
from fedmspc.numerics import f_quantile, generate_orthogonal, normal_quantile

from conftest import jm_q_limit, low_rank


def identity_model(n: int, r: int, sigma=None, lam_scaling="sigma_squared") -> PcaModel:
    s = np.ones(n) if sigma is None else np.asarray(sigma, dtype=float)
    return PcaModel(
        loadings=np.eye(n)[:, :r],
        singular_values=s,
        n_components=r,
        n_train_samples=10,
        n_variables=n,
        mean=np.zeros(n),
        scale=np.ones(n),
        t2_limit=1.0,
        q_limit=1.0,
        alpha=0.05,
        eigenvalue_scaling=lam_scaling,
    )


class TestFit:
    def test_rank_one(self, rng):
        x = np.outer(rng.standard_normal(20), rng.standard_normal(5))
        with pytest.warns(DegenerateLimitWarning):
            model = fit_pca(x, 0.9, standardize=False)
        assert model.n_components == 1

    def test_constructed_spectrum(self):
        u = generate_orthogonal(6, 1)[:, :4]
        v = generate_orthogonal(4, 2)
        x = u @ np.diag([2.0, 1.0, 1.0, 0.0]) @ v.T
        assert choose_n_components(np.linalg.svd(x, compute_uv=False), 0.9) == 3

    def test_orthonormal_loadings(self, rng):
        model = fit_pca(low_rank(50, 8, 3, 0.3, rng))
        v = model.loadings
        assert np.allclose(v.T @ v, np.eye(model.n_components), atol=1e-8)
        assert np.all(model.scale > 0)

    def test_zero_variance_column_named(self, rng):
        x = rng.standard_normal((10, 3))
        x[:, 1] = 4.0
        with pytest.raises(InvalidInputError, match="b"):
            fit_pca(x, variable_names=["a", "b", "c"])

    def test_m_le_r(self, rng):
        with pytest.raises(InvalidInputError):
            fit_pca(rng.standard_normal((3, 5)), n_components=3)

    def test_standardized_mean_zero(self, rng):
        x = low_rank(40, 6, 2, 0.1, rng)
        model = fit_pca(x, strict_limits=False)
        xs = (x - model.mean) / model.scale
        assert np.allclose(xs.mean(axis=0), 0, atol=1e-12)
        assert np.allclose(xs.std(axis=0, ddof=1), 1, atol=1e-10)


class TestStatistics:
    def test_scores_centering(self, rng):
        x = low_rank(30, 5, 2, 0.1, rng)
        model = fit_pca(x, strict_limits=False)
        assert np.allclose(scores(model, model.mean), 0)

    def test_canonical_projection(self):
        model = identity_model(4, 2)
        assert np.allclose(scores(model, [1.0, 2.0, 3.0, 4.0]), [1, 2])

    def test_scores_brute_force(self, rng):
        model = fit_pca(low_rank(30, 5, 2, 0.1, rng), strict_limits=False)
        x = rng.standard_normal(5)
        xs = [(x[j] - model.mean[j]) / model.scale[j] for j in range(5)]
        expected = [sum(xs[j] * model.loadings[j, c] for j in range(5)) for c in range(model.n_components)]
        assert np.allclose(scores(model, x), expected, atol=1e-12)

    def test_t2_hand_values(self):
        model = identity_model(2, 2)
        assert hotelling_t2(model, [0, 0]) == 0
        assert hotelling_t2(model, [1, 1]) == 2
        model = identity_model(2, 2, sigma=[2.0, 1.0])
        assert hotelling_t2(model, [2, 3]) == pytest.approx(10.0)

    def test_t2_degenerate(self):
        with pytest.raises(DegenerateModelError):
            hotelling_t2(identity_model(2, 2, sigma=[1.0, 0.0]), [1, 1])

    def test_q_hand_values(self):
        model = identity_model(2, 1)
        q, e = q_statistic(model, [3.0, 4.0])
        assert q == 16 and np.allclose(e, [0, 4])
        q, _ = q_statistic(model, [5.0, 0.0])
        assert q == 0

    def test_q_reconstruction_oracle(self, rng):
        model = fit_pca(low_rank(40, 7, 3, 0.2, rng), strict_limits=False)
        x = rng.standard_normal(7)
        xs = (x - model.mean) / model.scale
        coef = np.linalg.lstsq(model.loadings, xs, rcond=None)[0]
        expected = float(np.sum((xs - model.loadings @ coef) ** 2))
        assert q_statistic(model, x)[0] == pytest.approx(expected, rel=1e-10)

    def test_contributions(self, rng):
        model = identity_model(3, 2)
        assert np.allclose(t2_contributions(model, [0, 0]), 0)
        assert np.allclose(t2_contributions(model, [2.0, -1.0]), [2, -1, 0])
        assert np.allclose(q_contributions([-2.0, 3.0]), [4, 9])
        assert np.allclose(q_contributions([0.0, 0.0]), 0)

    def test_contribution_triple_product(self, rng):
        model = fit_pca(low_rank(40, 6, 3, 0.2, rng), strict_limits=False)
        t = rng.standard_normal(model.n_components)
        s = model.singular_values[: model.n_components]
        expected = [sum(t[c] / s[c] * model.loadings[j, c] for c in range(len(t))) for j in range(6)]
        assert np.allclose(t2_contributions(model, t), expected, atol=1e-12)

    def test_monitor_consistency(self, rng):
        model = fit_pca(low_rank(40, 6, 2, 0.2, rng), strict_limits=False)
        res = monitor(model, rng.standard_normal(6) * 3)
        assert res.q == pytest.approx(res.q_contrib.sum(), rel=1e-10)
        assert res.is_fault == (res.t2 > model.t2_limit or res.q > model.q_limit)
        t2, q = statistics(model, np.vstack([rng.standard_normal(6), rng.standard_normal(6)]))
        assert t2.shape == q.shape == (2,)

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            scores(identity_model(3, 1), [1.0, 2.0])


class TestLimits:
    def test_t2_chi_square_asymptote(self):
        assert t2_control_limit(10**5, 1, 0.05) == pytest.approx(3.8415, abs=1e-3)

    def test_t2_compose(self):
        assert t2_control_limit(12, 2, 0.05) == pytest.approx(2 * 11 / 10 * f_quantile(2, 10, 0.05), rel=1e-14)

    def test_t2_monotone(self):
        assert t2_control_limit(30, 3, 0.01) > t2_control_limit(30, 3, 0.10)

    def test_t2_invalid(self):
        with pytest.raises(InvalidInputError):
            t2_control_limit(3, 3, 0.05)

    def test_q_unit_residual_spectrum(self):
        s = np.array([3.0, 1.0, 1.0, 1.0])  # sigma_squared: residual eigenvalues 1, 1, 1
        lim = q_control_limit(s, 1, 0.05, 10)
        assert not lim.degenerate
        assert lim.value == pytest.approx(jm_q_limit([9.0, 1, 1, 1], 1, normal_quantile(0.05)), rel=1e-12)

    def test_q_degenerate(self):
        lim = q_control_limit(np.array([2.0, 1.0, 0.0]), 2, 0.05, 10)
        assert lim == (0.0, True)

    def test_q_monotone(self):
        s = np.array([5.0, 2.0, 1.5, 1.0, 0.5])
        assert q_control_limit(s, 2, 0.01, 20).value > q_control_limit(s, 2, 0.10, 20).value

    def test_q_validity(self):
        # one dominant residual eigenvalue with a heavy small tail drives h0 below 0
        s = np.sqrt(np.array([10.0, 1.0] + [0.1] * 100))
        with pytest.raises(LimitValidityError):
            q_control_limit(s, 1, 0.05, 100)

    def test_non_strict_limit(self, rng):
        # a perfect low-rank fit gives a degenerate Q limit with a warning
        x = np.outer(rng.standard_normal(20), rng.standard_normal(4))
        with pytest.warns(DegenerateLimitWarning):
            model = fit_pca(x, 0.9, standardize=False)
        assert model.q_limit_degenerate and model.q_limit == 0.0


def test_model_round_trip(tmp_path, rng):
    model = fit_pca(low_rank(30, 5, 2, 0.1, rng), variable_names=list("abcde"), strict_limits=False)
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for f in ("loadings", "singular_values", "mean", "scale"):
        assert getattr(back, f).tobytes() == getattr(model, f).tobytes()
    assert back.t2_limit == model.t2_limit
    assert back.variable_names == model.variable_names
    assert math.isfinite(back.q_limit) == math.isfinite(model.q_limit)
