"""Batch-process (multiway) PCA: batch-wise unfolding and incomplete-batch scoring.

Tensors are ``numpy`` arrays indexed ``(batch, variable, time)``. Unfolding is
time-major: column ``k * J + j`` holds variable ``j`` at time ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import IllConditionedProjectionError, InvalidInputError
from .mspc import PcaModel, Scaling, fit_pca

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class UnfoldedView:
    matrix: np.ndarray  # I x KJ
    n_variables: int
    n_time: int

    @property
    def column_map(self) -> list[tuple[int, int]]:
        return [(k, j) for k in range(self.n_time) for j in range(self.n_variables)]


def as_tensor(t) -> np.ndarray:
    a = np.asarray(t, dtype=np.float64)
    if a.ndim != 3 or min(a.shape) < 1:
        raise InvalidInputError(f"batch tensor must be (I, J, K) with all dims >= 1, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("batch tensor contains non-finite entries")
    return a


def unfold_batchwise(t) -> UnfoldedView:
    a = as_tensor(t)
    n_batches, n_vars, n_time = a.shape
    matrix = np.ascontiguousarray(a.transpose(0, 2, 1)).reshape(n_batches, n_time * n_vars)
    return UnfoldedView(matrix, n_vars, n_time)


def fold_batchwise(matrix, n_variables: int, n_time: int) -> np.ndarray:
    """Inverse of :func:`unfold_batchwise`; accepts a single row as well."""
    a = np.asarray(matrix, dtype=np.float64)
    squeeze = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != n_variables * n_time:
        raise InvalidInputError(f"expected {n_variables * n_time} columns, got {a.shape[1]}")
    out = a.reshape(a.shape[0], n_time, n_variables).transpose(0, 2, 1)
    return out[0] if squeeze else out


def fit_mpca(
    t_train,
    variance_target: float = 0.9,
    alpha: float = 0.05,
    scaling: Scaling = "sigma_squared",
    **kwargs,
) -> PcaModel:
    view = unfold_batchwise(t_train)
    model = fit_pca(view.matrix, variance_target, alpha, scaling, **kwargs)
    return replace(model, batch_shape=(view.n_variables, view.n_time))


def project_partial(loadings_head: np.ndarray, x_head: np.ndarray, k: int | None = None) -> np.ndarray:
    """Least-squares scores ``x V (V^T V)^-1`` against a truncated loadings block.

    ``x_head`` must already be standardized. Raises when ``V^T V`` has
    condition number above ``COND_LIMIT``.
    """
    gram = loadings_head.T @ loadings_head
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditionedProjectionError(
            f"truncated loadings projection is ill-conditioned (cond={cond:.3g}) at k={k}", k=k, condition=cond
        )
    # t = x V G^-1 with G symmetric, so solve G t^T = V^T x^T
    return np.linalg.solve(gram, (x_head @ loadings_head).T).T


def score_partial(model: PcaModel, x_head, n_elapsed: int, k: int | None = None) -> np.ndarray:
    """Scores from the first ``n_elapsed`` unfolded columns of raw sample(s)."""
    if not 1 <= n_elapsed <= model.n_variables:
        raise InvalidInputError(f"n_elapsed={n_elapsed} outside [1, {model.n_variables}]")
    x = np.asarray(x_head, dtype=np.float64)
    if x.shape[-1] != n_elapsed or not np.all(np.isfinite(x)):
        raise InvalidInputError(f"expected finite sample(s) with {n_elapsed} columns, got shape {x.shape}")
    xs = (x - model.mean[:n_elapsed]) / model.scale[:n_elapsed]
    return project_partial(model.loadings[:n_elapsed], xs, k)


def score_incomplete(model: PcaModel, x_partial, k: int) -> np.ndarray:
    """Scores for a batch observed up to time interval ``k`` (1-based, ``k <= K``)."""
    if model.batch_shape is None:
        raise InvalidInputError("model was not fitted on batch data")
    n_vars, n_time = model.batch_shape
    if not 1 <= k <= n_time:
        raise InvalidInputError(f"k={k} outside [1, {n_time}]")
    return score_partial(model, x_partial, k * n_vars, k)
