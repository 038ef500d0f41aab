"""Dense linear algebra and quantile kernels used by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Every routine
here is a pure function of its arguments (plus an explicit seed).
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.special import betainc

from .errors import InvalidInputError, NumericalError

DEFAULT_COND_MAX = 1e6


class SvdResult(NamedTuple):
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array with at least one row and column."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def as_vector(x, length: int | None = None, name: str = "x") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {a.shape}")
    if length is not None and a.shape[0] != length:
        raise InvalidInputError(f"{name} has length {a.shape[0]}, expected {length}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def svd(x) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    In each row of ``vt`` the entry of largest magnitude is made non-negative
    (first such entry on ties) and the matching column of ``u`` is flipped
    with it, so ``u @ diag(s) @ vt`` is unchanged.
    """
    a = as_matrix(x)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for {a.shape[0]}x{a.shape[1]} matrix") from exc
    pivots = np.argmax(np.abs(vt), axis=1)
    signs = np.where(vt[np.arange(vt.shape[0]), pivots] < 0, -1.0, 1.0)
    vt = vt * signs[:, None]
    u = u * signs[None, :]
    return SvdResult(u, s, vt)


def generate_orthogonal(dim: int, seed) -> np.ndarray:
    """Haar-distributed orthogonal matrix: QR of a Gaussian matrix, R-diagonal signs folded into Q."""
    if dim < 1:
        raise InvalidInputError(f"dim must be >= 1, got {dim}")
    rng = _rng(seed)
    z = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(z)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d[None, :]


def generate_invertible(dim: int, seed, cond_max: float = DEFAULT_COND_MAX) -> np.ndarray:
    """Gaussian square matrix, redrawn until its 2-norm condition number is <= ``cond_max``."""
    if dim < 1:
        raise InvalidInputError(f"dim must be >= 1, got {dim}")
    if not cond_max > 1:
        raise InvalidInputError(f"cond_max must be > 1, got {cond_max}")
    rng = _rng(seed)
    while True:
        m = rng.standard_normal((dim, dim))
        s = np.linalg.svd(m, compute_uv=False)
        if s[-1] > 0 and s[0] / s[-1] <= cond_max:
            return m


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")


def _bisect(fn, lo: float, hi: float, target: float, increasing: bool) -> float:
    # Runs until the bracket cannot shrink further in double precision.
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        above = fn(mid) > target
        if above == increasing:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def f_cdf(x: float, d1: int, d2: int) -> float:
    if x <= 0:
        return 0.0
    return float(betainc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2)))


def f_sf(x: float, d1: int, d2: int) -> float:
    if x <= 0:
        return 1.0
    return float(betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x)))


def f_quantile(d1: int, d2: int, alpha: float) -> float:
    """Upper-tail quantile: the value ``F`` with ``P(F_{d1,d2} > F) = alpha``.

    Bisection is carried out on ``w = d2 / (d2 + d1 F)``, where the survival
    function equals the regularized incomplete beta ``I_w(d2/2, d1/2)``.
    Working in ``w`` keeps large quantiles accurate.
    """
    _check_alpha(alpha)
    if d1 < 1 or d2 < 1:
        raise InvalidInputError(f"degrees of freedom must be >= 1, got ({d1}, {d2})")
    a, b = d2 / 2.0, d1 / 2.0
    w = _bisect(lambda t: float(betainc(a, b, t)), 0.0, 1.0, alpha, increasing=True)
    return d2 * (1.0 - w) / (d1 * w)


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def normal_quantile(alpha: float) -> float:
    """Upper-tail standard normal deviate ``z`` with ``P(Z > z) = alpha``."""
    _check_alpha(alpha)
    if alpha == 0.5:
        return 0.0
    if alpha > 0.5:
        return -normal_quantile(1.0 - alpha)
    return _bisect(normal_sf, 0.0, 40.0, alpha, increasing=False)
