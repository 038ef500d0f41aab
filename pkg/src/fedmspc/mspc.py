"""Centralized PCA process monitoring: fitting, T^2 / Q statistics, limits, contributions.

This module is also the oracle that the federated path is checked against,
so it deliberately stays small and literal.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .errors import (
    DegenerateModelError,
    InvalidInputError,
    LimitValidityError,
)
from .numerics import as_matrix, as_vector, f_quantile, normal_quantile, svd

MODEL_SCHEMA = "fedmspc-model-v1"
ZERO_VARIANCE_TOL = 1e-12
EIGENVALUE_TOL = 1e-12

Scaling = Literal["sigma_squared", "covariance"]
SCALINGS = ("sigma_squared", "covariance")


class DegenerateLimitWarning(UserWarning):
    pass


class QLimit(NamedTuple):
    value: float
    degenerate: bool


@dataclass(frozen=True, eq=False)
class PcaModel:
    loadings: np.ndarray  # n x r, orthonormal columns
    singular_values: np.ndarray  # length min(m, n), descending
    n_components: int
    n_train_samples: int
    n_variables: int
    mean: np.ndarray
    scale: np.ndarray
    t2_limit: float
    q_limit: float
    alpha: float
    eigenvalue_scaling: Scaling = "sigma_squared"
    q_limit_degenerate: bool = False
    variable_names: tuple[str, ...] | None = None
    # (J, K) for models fitted on batch-wise unfolded data
    batch_shape: tuple[int, int] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def eigenvalues(self) -> np.ndarray:
        """Scaled eigenvalues of the retained components."""
        return component_eigenvalues(
            self.singular_values[: self.n_components], self.n_train_samples, self.eigenvalue_scaling
        )

    @property
    def column_map(self) -> list[tuple[int, int]] | None:
        """``(time, variable)`` pair (both 0-based) for each unfolded column."""
        if self.batch_shape is None:
            return None
        n_vars, n_time = self.batch_shape
        return [(k, j) for k in range(n_time) for j in range(n_vars)]

    def with_limits(self, t2_limit: float | None = None, q_limit: float | None = None) -> "PcaModel":
        return replace(
            self,
            t2_limit=self.t2_limit if t2_limit is None else float(t2_limit),
            q_limit=self.q_limit if q_limit is None else float(q_limit),
        )


@dataclass(frozen=True, eq=False)
class MonitoringResult:
    scores: np.ndarray
    t2: float
    q: float
    t2_contrib: np.ndarray
    q_contrib: np.ndarray
    residual: np.ndarray
    is_fault: bool

    def to_dict(self) -> dict:
        return {
            "scores": self.scores.tolist(),
            "t2": self.t2,
            "q": self.q,
            "t2_contrib": self.t2_contrib.tolist(),
            "q_contrib": self.q_contrib.tolist(),
            "residual": self.residual.tolist(),
            "is_fault": self.is_fault,
        }


def _check_scaling(scaling: str) -> None:
    if scaling not in SCALINGS:
        raise InvalidInputError(f"eigenvalue_scaling must be one of {SCALINGS}, got {scaling!r}")


def component_eigenvalues(singular_values, m: int, scaling: Scaling) -> np.ndarray:
    """Eigenvalues implied by singular values: ``s**2`` or ``s**2 / (m - 1)``."""
    _check_scaling(scaling)
    s = np.asarray(singular_values, dtype=np.float64)
    lam = s * s
    if scaling == "covariance":
        lam = lam / (m - 1)
    return lam


def choose_n_components(singular_values, variance_target: float) -> int:
    """Smallest r whose cumulative explained variance reaches ``variance_target``."""
    if not (0.0 < variance_target <= 1.0):
        raise InvalidInputError(f"variance_target must lie in (0, 1], got {variance_target}")
    s2 = np.asarray(singular_values, dtype=np.float64) ** 2
    total = s2.sum()
    if total <= 0:
        raise DegenerateModelError("all singular values are zero")
    explained = np.cumsum(s2) / total
    return int(np.searchsorted(explained, variance_target - 1e-12) + 1)


def t2_control_limit(m: int, r: int, alpha: float) -> float:
    """F-distribution based upper limit r(m-1)/(m-r) * F_{r, m-r, alpha}."""
    if r < 1 or m <= r:
        raise InvalidInputError(f"T2 limit needs m > r >= 1, got m={m}, r={r}")
    return r * (m - 1) / (m - r) * f_quantile(r, m - r, alpha)


def q_control_limit(
    singular_values, r: int, alpha: float, m: int, scaling: Scaling = "sigma_squared"
) -> QLimit:
    """Jackson-Mudholkar upper limit for Q from the discarded eigenvalues.

    Only eigenvalues above ``EIGENVALUE_TOL`` enter the residual sums. When
    none remain the model is exact and the limit is 0 (flagged degenerate).
    """
    lam = component_eigenvalues(singular_values, m, scaling)
    lam = lam[lam > EIGENVALUE_TOL]
    residual = lam[r:]
    if residual.size == 0:
        return QLimit(0.0, True)
    theta1 = float(np.sum(residual))
    theta2 = float(np.sum(residual**2))
    theta3 = float(np.sum(residual**3))
    h0 = 1.0 - 2.0 * theta1 * theta3 / (3.0 * theta2**2)
    if h0 <= 0:
        raise LimitValidityError(f"Q-limit approximation invalid: h0={h0:.6g} <= 0")
    z = normal_quantile(alpha)
    base = 1.0 - theta2 * h0 * (1.0 - h0) / theta1**2 + z * math.sqrt(2.0 * theta2 * h0**2) / theta1
    if base <= 0:
        raise LimitValidityError(f"Q-limit approximation invalid: base={base:.6g} <= 0")
    return QLimit(theta1 * base ** (1.0 / h0), False)


def column_mean_scale(x: np.ndarray, names: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0, ddof=1)
    bad = np.flatnonzero(scale < ZERO_VARIANCE_TOL)
    if bad.size:
        label = names[bad[0]] if names is not None else f"column {bad[0]}"
        raise InvalidInputError(f"zero-variance column: {label}")
    return mean, scale


def fit_pca(
    x_train,
    variance_target: float = 0.9,
    alpha: float = 0.05,
    scaling: Scaling = "sigma_squared",
    *,
    standardize: bool = True,
    n_components: int | None = None,
    strict_limits: bool = True,
    variable_names: Sequence[str] | None = None,
) -> PcaModel:
    """Fit a PCA monitoring model on NOC training rows.

    Parameters
    ----------
    x_train : array_like, shape (m, n)
        Normal-operation training data.
    variance_target : float
        Cumulative explained-variance fraction that fixes the component count.
    alpha : float
        Significance level of both control limits.
    scaling : {"sigma_squared", "covariance"}
        Eigenvalues used by T^2 and the Q limit: ``s**2`` or ``s**2 / (m - 1)``.
    standardize : bool
        Z-score the columns with training mean and sample standard deviation.
    n_components : int, optional
        Override the variance-target rule.
    strict_limits : bool
        When False an invalid Q-limit approximation yields ``q_limit = inf``
        (with a warning) instead of raising; callers then grid-search limits.
    """
    _check_scaling(scaling)
    x = as_matrix(x_train, "x_train")
    m, n = x.shape
    if m < 2:
        raise InvalidInputError(f"need at least 2 training samples, got {m}")
    if variable_names is not None and len(variable_names) != n:
        raise InvalidInputError("variable_names length does not match column count")
    if standardize:
        mean, scale = column_mean_scale(x, variable_names)
    else:
        mean, scale = np.zeros(n), np.ones(n)
    xs = (x - mean) / scale
    res = svd(xs)
    r = n_components if n_components is not None else choose_n_components(res.singular_values, variance_target)
    if not 1 <= r <= res.singular_values.size:
        raise InvalidInputError(f"n_components={r} outside [1, {res.singular_values.size}]")
    t2_limit = t2_control_limit(m, r, alpha)
    try:
        q_limit, degenerate = q_control_limit(res.singular_values, r, alpha, m, scaling)
    except LimitValidityError as exc:
        if strict_limits:
            raise
        warnings.warn(f"{exc}; Q limit set to inf", DegenerateLimitWarning, stacklevel=2)
        q_limit, degenerate = math.inf, False
    if degenerate:
        warnings.warn("no residual variance: Q limit is 0", DegenerateLimitWarning, stacklevel=2)
    return PcaModel(
        loadings=res.vt[:r].T.copy(),
        singular_values=res.singular_values,
        n_components=r,
        n_train_samples=m,
        n_variables=n,
        mean=mean,
        scale=scale,
        t2_limit=t2_limit,
        q_limit=q_limit,
        alpha=alpha,
        eigenvalue_scaling=scaling,
        q_limit_degenerate=degenerate,
        variable_names=tuple(variable_names) if variable_names is not None else None,
    )


def _samples(model: PcaModel, x, width: int | None = None) -> np.ndarray:
    width = model.n_variables if width is None else width
    a = np.asarray(x, dtype=np.float64)
    if a.ndim not in (1, 2) or a.shape[-1] != width:
        raise InvalidInputError(f"expected sample(s) with {width} variables, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("sample contains non-finite entries")
    return a


def standardize(model: PcaModel, x) -> np.ndarray:
    a = _samples(model, x)
    return (a - model.mean) / model.scale


def scores(model: PcaModel, x) -> np.ndarray:
    """Project raw sample(s) onto the retained loadings after standardization."""
    return standardize(model, x) @ model.loadings


def _check_eigenvalues(lam: np.ndarray) -> None:
    if np.any(lam <= 0):
        raise DegenerateModelError("a retained component has zero singular value")


def hotelling_t2(model: PcaModel, t) -> float | np.ndarray:
    lam = model.eigenvalues
    _check_eigenvalues(lam)
    t = np.asarray(t, dtype=np.float64)
    out = np.sum(t * t / lam, axis=-1)
    return float(out) if out.ndim == 0 else out


def q_statistic(model: PcaModel, x) -> tuple[float | np.ndarray, np.ndarray]:
    """Squared residual norm of the standardized sample off the model subspace."""
    xs = standardize(model, x)
    residual = xs - (xs @ model.loadings) @ model.loadings.T
    q = np.sum(residual * residual, axis=-1)
    return (float(q) if q.ndim == 0 else q), residual


def t2_contributions(model: PcaModel, t) -> np.ndarray:
    s = model.singular_values[: model.n_components]
    if np.any(s <= 0):
        raise DegenerateModelError("a retained component has zero singular value")
    return (np.asarray(t, dtype=np.float64) / s) @ model.loadings.T


def q_contributions(residual) -> np.ndarray:
    e = np.asarray(residual, dtype=np.float64)
    return e * e


def is_fault(t2, q, t2_limit: float, q_limit: float):
    return (np.asarray(t2) > t2_limit) | (np.asarray(q) > q_limit)


def monitor(model: PcaModel, x) -> MonitoringResult:
    """Full monitoring record for one raw sample."""
    x = as_vector(x, model.n_variables)
    t = scores(model, x)
    t2 = hotelling_t2(model, t)
    q, residual = q_statistic(model, x)
    return MonitoringResult(
        scores=t,
        t2=t2,
        q=q,
        t2_contrib=t2_contributions(model, t),
        q_contrib=q_contributions(residual),
        residual=residual,
        is_fault=bool(is_fault(t2, q, model.t2_limit, model.q_limit)),
    )


def statistics(model: PcaModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``(T2, Q)`` for the rows of ``x``."""
    x = np.atleast_2d(_samples(model, x))
    t = scores(model, x)
    q, _ = q_statistic(model, x)
    return hotelling_t2(model, t), q


# -- persistence ---------------------------------------------------------------


def model_to_dict(model: PcaModel) -> dict:
    doc = {
        "schema": MODEL_SCHEMA,
        "loadings": model.loadings.tolist(),
        "singular_values": model.singular_values.tolist(),
        "n_components": model.n_components,
        "n_train_samples": model.n_train_samples,
        "n_variables": model.n_variables,
        "mean": model.mean.tolist(),
        "scale": model.scale.tolist(),
        "t2_limit": model.t2_limit,
        "q_limit": model.q_limit,
        "alpha": model.alpha,
        "eigenvalue_scaling": model.eigenvalue_scaling,
        "q_limit_degenerate": model.q_limit_degenerate,
        "variable_names": list(model.variable_names) if model.variable_names is not None else None,
        "batch_shape": list(model.batch_shape) if model.batch_shape is not None else None,
        "column_map": model.column_map,
        "extra": model.extra,
    }
    return doc


def model_from_dict(doc: dict) -> PcaModel:
    if doc.get("schema") != MODEL_SCHEMA:
        raise InvalidInputError(f"not a {MODEL_SCHEMA} document: schema={doc.get('schema')!r}")
    return PcaModel(
        loadings=np.asarray(doc["loadings"], dtype=np.float64).reshape(doc["n_variables"], doc["n_components"]),
        singular_values=np.asarray(doc["singular_values"], dtype=np.float64),
        n_components=int(doc["n_components"]),
        n_train_samples=int(doc["n_train_samples"]),
        n_variables=int(doc["n_variables"]),
        mean=np.asarray(doc["mean"], dtype=np.float64),
        scale=np.asarray(doc["scale"], dtype=np.float64),
        t2_limit=float(doc["t2_limit"]),
        q_limit=float(doc["q_limit"]),
        alpha=float(doc["alpha"]),
        eigenvalue_scaling=doc["eigenvalue_scaling"],
        q_limit_degenerate=bool(doc["q_limit_degenerate"]),
        variable_names=tuple(doc["variable_names"]) if doc.get("variable_names") is not None else None,
        batch_shape=tuple(doc["batch_shape"]) if doc.get("batch_shape") is not None else None,
        extra=doc.get("extra") or {},
    )


def save_model(model: PcaModel, path) -> None:
    # repr-based float output round-trips doubles exactly; inf limits become Infinity
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> PcaModel:
    return model_from_dict(json.loads(Path(path).read_text()))
