"""Shared fixtures and independent oracles for the test suite."""
from __future__ import annotations

import math

import numpy as np
import pytest

from fedmspc.protocol import SessionConfig


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix (eigenvalues descending)."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(np.sum(a**2) - np.sum(np.diag(a) ** 2))
        if off <= tol * max(1.0, np.linalg.norm(a)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def jm_q_limit(eigenvalues, r: int, z: float) -> float:
    """Jackson-Mudholkar limit written out term by term (independent of fedmspc)."""
    resid = [float(e) for e in eigenvalues[r:] if e > 1e-12]
    t1 = sum(resid)
    t2 = sum(e * e for e in resid)
    t3 = sum(e**3 for e in resid)
    h0 = 1 - (2 * t1 * t3) / (3 * t2 * t2)
    inner = z * math.sqrt(2 * t2 * h0 * h0) / t1 + 1 + t2 * h0 * (h0 - 1) / (t1 * t1)
    return t1 * inner ** (1 / h0)


def low_rank(m: int, n: int, rank: int, noise: float, rng) -> np.ndarray:
    x = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n)) * 2.0
    return x + noise * rng.standard_normal((m, n)) + rng.normal(0, 3, n)


def split_counts(n: int, g: int, rng) -> tuple[int, ...]:
    cuts = np.sort(rng.choice(np.arange(1, n), size=g - 1, replace=False))
    return tuple(int(c) for c in np.diff(np.concatenate([[0], cuts, [n]])))


def blocks_of(x: np.ndarray, counts) -> list[np.ndarray]:
    edges = np.cumsum([0, *counts])
    return [x[:, edges[i] : edges[i + 1]] for i in range(len(counts))]


def align_signs(reference: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """Per-column signs that best align ``candidate`` loadings with ``reference``."""
    s = np.sign(np.sum(reference * candidate, axis=0))
    s[s == 0] = 1.0
    return s


def rel_close(a, b, tol: float) -> bool:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return bool(np.all(np.abs(a - b) <= tol * np.maximum(1.0, np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_holder_case():
    rng = np.random.default_rng(7)
    x = low_rank(60, 10, 3, 0.2, rng)
    cfg = SessionConfig.from_seed(
        5, session_id="t", column_counts=(6, 4), row_count=60, eigenvalue_scaling="covariance"
    )
    return cfg, x, blocks_of(x, (6, 4))
