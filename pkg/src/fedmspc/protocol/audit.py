"""Transcript audit for the honest-but-curious privacy claims.

The audit is an omniscient harness: it is given every holder's raw data and
model share and inspects what each party actually received.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..batch import unfold_batchwise
from .messages import Role, Step
from .roles import HolderModelShare

CORRELATION_THRESHOLD = 0.999
NORM_RTOL = 1e-9


@dataclass(frozen=True)
class Finding:
    kind: str  # raw_data_exposure | loadings_exposure | norm_mismatch
    message_index: int
    detail: str


@dataclass
class AuditReport:
    findings: list[Finding] = field(default_factory=list)
    messages_checked: int = 0
    norm_checks: int = 0

    @property
    def ok(self) -> bool:
        return not self.findings

    def of_kind(self, kind: str) -> list[Finding]:
        return [f for f in self.findings if f.kind == kind]


def _max_abs_column_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Largest |Pearson correlation| between any column of ``a`` and any column of ``b``."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    keep_a, keep_b = na > 1e-12, nb > 1e-12
    if not keep_a.any() or not keep_b.any():
        return 0.0
    c = (a[:, keep_a] / na[keep_a]).T @ (b[:, keep_b] / nb[keep_b])
    return float(np.max(np.abs(c)))


def _vector_match(a: np.ndarray, secret_vectors: np.ndarray, up_to_sign: bool = False) -> bool:
    """Whether any row or column of ``a`` equals one of the rows of ``secret_vectors``."""
    length = secret_vectors.shape[1]
    candidates = []
    if a.ndim == 1:
        candidates = [a[None, :]] if a.shape[0] == length else []
    else:
        if a.shape[1] == length:
            candidates.append(a)
        if a.shape[0] == length:
            candidates.append(a.T)
    for cand in candidates:
        scale = max(1.0, float(np.max(np.abs(secret_vectors))))
        diff = np.max(np.abs(cand[:, None, :] - secret_vectors[None, :, :]), axis=2)
        if np.any(diff <= 1e-9 * scale):
            return True
        if up_to_sign:
            diff = np.max(np.abs(cand[:, None, :] + secret_vectors[None, :, :]), axis=2)
            if np.any(diff <= 1e-9 * scale):
                return True
    return False


def _loadings_match(a: np.ndarray, loadings: np.ndarray, offset: int, n_total: int) -> bool:
    """Whether ``a`` carries holder loadings, alone or as their row window of the full ``V``."""
    if _vector_match(a, loadings.T, up_to_sign=True):
        return True
    n_i = loadings.shape[0]
    if a.ndim != 2 or n_total == n_i:
        return False
    windows = []
    if a.shape[0] == n_total:
        windows.append(a[offset : offset + n_i])
    if a.shape[1] == n_total:
        windows.append(a[:, offset : offset + n_i].T)
    return any(_vector_match(w, loadings.T, up_to_sign=True) for w in windows)


def audit_privacy(
    transcript,
    local_data: Sequence,
    shares: Sequence[HolderModelShare],
    samples: Sequence | None = None,
) -> AuditReport:
    """Check a transcript against the raw data and loadings it must not expose.

    Checks, for every message whose recipient is not holder ``i``:

    * no array equals or column-matches (|corr| >= 0.999 over shared rows)
      holder ``i``'s raw or standardized training block, and no row/column
      equals one of holder ``i``'s monitored samples;
    * no row/column equals (up to sign) a loadings vector of holder ``i``,
      either on its own or inside an array spanning all ``n`` variables.

    Every ``MaskedData`` message must also preserve the Frobenius norm of the
    standardized block it masks, which documents that the masking is a
    rotation rather than noise.
    """
    report = AuditReport()
    raw_blocks = []
    for x in local_data:
        x = np.asarray(x, dtype=np.float64)
        raw_blocks.append(unfold_batchwise(x).matrix if x.ndim == 3 else x)
    std_blocks = [(x - sh.mean) / sh.scale for x, sh in zip(raw_blocks, shares)]
    sample_blocks = None
    if samples is not None:
        sample_blocks = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in samples]

    offsets = np.cumsum([0, *(sh.loadings.shape[0] for sh in shares)])
    n_total = int(offsets[-1])

    for idx, msg in enumerate(transcript):
        report.messages_checked += 1
        recipient = msg.recipient
        for name, arr in msg.arrays():
            for i, sh in enumerate(shares, start=1):
                if recipient.role is Role.HOLDER and recipient.index == i:
                    continue
                raw, std = raw_blocks[i - 1], std_blocks[i - 1]
                secrets = np.vstack([raw.T, std.T])
                if _vector_match(arr, secrets):
                    report.findings.append(
                        Finding("raw_data_exposure", idx, f"{msg.key()} {name!r} contains a column of H{i}'s data")
                    )
                elif arr.ndim == 2 and arr.shape[0] == raw.shape[0] and raw.shape[0] >= 3:
                    corr = max(_max_abs_column_correlation(arr, raw), _max_abs_column_correlation(arr, std))
                    if corr >= CORRELATION_THRESHOLD:
                        report.findings.append(
                            Finding(
                                "raw_data_exposure",
                                idx,
                                f"{msg.key()} {name!r} correlates with H{i}'s data (|r|={corr:.6f})",
                            )
                        )
                if sample_blocks is not None and _vector_match(arr, sample_blocks[i - 1]):
                    report.findings.append(
                        Finding("raw_data_exposure", idx, f"{msg.key()} {name!r} contains an H{i} sample")
                    )
                if _loadings_match(arr, sh.loadings, int(offsets[i - 1]), n_total):
                    report.findings.append(
                        Finding("loadings_exposure", idx, f"{msg.key()} {name!r} exposes H{i}'s loadings")
                    )

        if msg.step is Step.MASKED_DATA and msg.sender.role is Role.HOLDER:
            i = msg.sender.index
            masked = msg.payload.get("x_masked")
            if isinstance(masked, np.ndarray) and i <= len(std_blocks):
                report.norm_checks += 1
                a = np.linalg.norm(masked)
                b = np.linalg.norm(std_blocks[i - 1])
                if abs(a - b) > NORM_RTOL * max(b, 1.0):
                    report.findings.append(
                        Finding("norm_mismatch", idx, f"||X'_{i}||_F={a:.17g} != ||X_{i}||_F={b:.17g}")
                    )
    return report
