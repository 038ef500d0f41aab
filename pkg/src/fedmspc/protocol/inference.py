"""Federated monitoring of complete samples and of incomplete batches.

Holders only ever send scalar-masked partial scores and partial Q values;
the CSP sums them and broadcasts the masked totals back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..batch import COND_LIMIT
from ..errors import IllConditionedProjectionError, InvalidInputError, ProtocolViolation
from ..mspc import MonitoringResult
from ..numerics import generate_invertible
from .messages import CSP, TA, Role, Step, holder
from .roles import HolderModelShare, Party, SessionConfig, draw_scalar_masks, party_rng, payload_array, sample_ids_of


@dataclass(frozen=True, eq=False)
class HolderMonitoring:
    """Monitoring output as seen by one holder; contributions cover its own columns only."""

    index: int
    sample_ids: list[int]
    scores: np.ndarray  # s x r
    t2: np.ndarray
    q: np.ndarray
    t2_contrib: np.ndarray  # s x n_i
    q_contrib: np.ndarray
    residual: np.ndarray
    is_fault: np.ndarray
    t2_limit: float
    q_limit: float

    def result(self, row: int) -> MonitoringResult:
        return MonitoringResult(
            scores=self.scores[row],
            t2=float(self.t2[row]),
            q=float(self.q[row]),
            t2_contrib=self.t2_contrib[row],
            q_contrib=self.q_contrib[row],
            residual=self.residual[row],
            is_fault=bool(self.is_fault[row]),
        )


class _Aggregator(Party):
    """CSP helper: collects one array per expected holder, then sums in holder order."""

    def __init__(self, config, run_id):
        super().__init__(CSP, config, run_id)
        self._parts: dict[int, dict[str, np.ndarray]] = {}

    def _discard(self):
        self._parts.clear()

    def _collect(self, msg, arrays: dict[str, np.ndarray], expected: int) -> dict[str, np.ndarray] | None:
        i = msg.sender.index
        if i in self._parts:
            raise ProtocolViolation(f"duplicate {msg.step.value} from {msg.sender}")
        if self._parts:
            ref = next(iter(self._parts.values()))
            for k, v in arrays.items():
                if v.shape != ref[k].shape:
                    raise ProtocolViolation(f"{msg.sender}: {k!r} shape {v.shape} differs from {ref[k].shape}")
        self._parts[i] = arrays
        if len(self._parts) < expected:
            return None
        total = {}
        for k in arrays:
            acc = None
            for j in sorted(self._parts):
                acc = self._parts[j][k].copy() if acc is None else acc + self._parts[j][k]
            total[k] = acc
        self._parts = {}
        return total


# -- complete samples ---------------------------------------------------------


class InferenceAuthority(Party):
    def __init__(self, config: SessionConfig, run_id: str, sample_ids: list[int]):
        super().__init__(TA, config, run_id)
        self.sample_ids = [int(i) for i in sample_ids]

    def start(self):
        rng = party_rng(self.config, self.party_id, self.run_id)
        p = draw_scalar_masks(rng, len(self.sample_ids))
        self.state = "done"
        return [
            self.send(h, Step.MASK_DISTRIBUTION, p=p, sample_ids=self.sample_ids) for h in self.config.holders
        ]


class InferenceServer(_Aggregator):
    def __init__(self, config: SessionConfig, run_id: str, n_samples: int):
        super().__init__(config, run_id)
        self.n_samples = n_samples
        self.state = "collect_scores"

    def expects(self):
        return {"collect_scores": (Step.MASKED_SCORES,), "collect_q": (Step.MASKED_Q,)}.get(self.state, ())

    def on_message(self, msg):
        self.require_sender(msg, Role.HOLDER)
        s, g = self.n_samples, self.config.g
        if msg.step is Step.MASKED_SCORES:
            total = self._collect(msg, {"t_masked": payload_array(msg, "t_masked", (s, None))}, g)
            if total is None:
                return []
            self.state = "collect_q"
            return [self.send(h, Step.AGGREGATED_SCORES, t_masked=total["t_masked"]) for h in self.config.holders]
        total = self._collect(msg, {"q_masked": payload_array(msg, "q_masked", (s,))}, g)
        if total is None:
            return []
        self.state = "done"
        return [self.send(h, Step.AGGREGATED_Q, q_masked=total["q_masked"]) for h in self.config.holders]


class InferenceHolder(Party):
    def __init__(self, config: SessionConfig, run_id: str, share: HolderModelShare, samples, sample_ids):
        super().__init__(holder(share.index), config, run_id)
        x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if x.shape[1] != share.n_columns or not np.all(np.isfinite(x)):
            raise InvalidInputError(f"holder {share.index}: samples must be finite with {share.n_columns} columns")
        if len(sample_ids) != x.shape[0]:
            raise InvalidInputError("one sample id per sample row required")
        self.share = share
        self.sample_ids = [int(i) for i in sample_ids]
        self.x_std = (x - share.mean) / share.scale
        self.state = "await_mask"
        self._p = None
        self._partial = None
        self.result: HolderMonitoring | None = None

    def expects(self):
        return {
            "await_mask": (Step.MASK_DISTRIBUTION,),
            "await_scores": (Step.AGGREGATED_SCORES,),
            "await_q": (Step.AGGREGATED_Q,),
        }.get(self.state, ())

    def _discard(self):
        self.result = None
        self._partial = None

    def on_message(self, msg):
        sh = self.share
        s, r = len(self.sample_ids), sh.n_components
        if msg.step is Step.MASK_DISTRIBUTION:
            self.require_sender(msg, Role.TA)
            if sample_ids_of(msg) != self.sample_ids:
                raise ProtocolViolation(f"{self.party_id}: sample sequence differs from TA's")
            self._p = payload_array(msg, "p", (s,))
            if np.any(self._p == 0):
                raise ProtocolViolation("zero scalar mask")
            local = self.x_std @ sh.loadings
            self.state = "await_scores"
            return [self.send(CSP, Step.MASKED_SCORES, t_masked=self._p[:, None] * local, sample_ids=self.sample_ids)]

        self.require_sender(msg, Role.CSP)
        if msg.step is Step.AGGREGATED_SCORES:
            t = payload_array(msg, "t_masked", (s, r)) / self._p[:, None]
            t2 = np.sum(t * t / sh.eigenvalues, axis=1)
            t2_contrib = (t / sh.sigma[:r]) @ sh.loadings.T
            residual = self.x_std - t @ sh.loadings.T
            q_contrib = residual * residual
            q_local = q_contrib.sum(axis=1)
            self._partial = (t, t2, t2_contrib, residual, q_contrib)
            self.state = "await_q"
            return [self.send(CSP, Step.MASKED_Q, q_masked=self._p * q_local)]

        q = payload_array(msg, "q_masked", (s,)) / self._p
        t, t2, t2_contrib, residual, q_contrib = self._partial
        self.result = HolderMonitoring(
            index=sh.index,
            sample_ids=self.sample_ids,
            scores=t,
            t2=t2,
            q=q,
            t2_contrib=t2_contrib,
            q_contrib=q_contrib,
            residual=residual,
            is_fault=(t2 > sh.t2_limit) | (q > sh.q_limit),
            t2_limit=sh.t2_limit,
            q_limit=sh.q_limit,
        )
        self._partial = None
        self.state = "done"
        return []


# -- incomplete batches -------------------------------------------------------


class IncompleteAuthority(Party):
    """Issues scalar masks p and an invertible r x r mixing matrix W."""

    def __init__(self, config, run_id, sample_ids, n_components: int, active_holder: int, k: int):
        super().__init__(TA, config, run_id)
        self.sample_ids = [int(i) for i in sample_ids]
        self.n_components = n_components
        self.active_holder = active_holder
        self.k = k

    def start(self):
        rng = party_rng(self.config, self.party_id, self.run_id)
        p = draw_scalar_masks(rng, len(self.sample_ids))
        w = generate_invertible(self.n_components, rng)
        self.state = "done"
        return [
            self.send(
                h,
                Step.MASK_DISTRIBUTION,
                p=p,
                w=w,
                sample_ids=self.sample_ids,
                active_holder=self.active_holder,
                k=self.k,
            )
            for h in self.config.holders
        ]


class IncompleteServer(_Aggregator):
    def __init__(self, config, run_id, n_samples: int, active_holder: int):
        super().__init__(config, run_id)
        self.n_samples = n_samples
        self.active_holder = active_holder
        self.state = "collect_partials"

    def expects(self):
        return (Step.INCOMPLETE_PARTIALS,) if self.state == "collect_partials" else ()

    def on_message(self, msg):
        self.require_sender(msg, Role.HOLDER)
        if msg.sender.index > self.active_holder:
            raise ProtocolViolation(f"{msg.sender} is not a participant (active holder {self.active_holder})")
        arrays = {
            "t_masked": payload_array(msg, "t_masked", (self.n_samples, None)),
            "f_masked": payload_array(msg, "f_masked", (None, None)),
        }
        total = self._collect(msg, arrays, self.active_holder)
        if total is None:
            return []
        f_sum = total["f_masked"]
        cond = np.linalg.cond(f_sum)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise IllConditionedProjectionError(
                f"aggregated masked Gram matrix is ill-conditioned (cond={cond:.3g})", condition=cond
            )
        # t' = T' F^-1  <=>  F^T t'^T = T'^T
        t_masked = np.linalg.solve(f_sum.T, total["t_masked"].T).T
        self.state = "done"
        return [self.send(h, Step.INCOMPLETE_SCORES, t_masked=t_masked) for h in self.config.holders]


class IncompleteHolder(Party):
    """Holder side of incomplete-batch scoring.

    Holders before the active one contribute complete rows; the active holder
    contributes its first ``k * J_i`` unfolded columns; later holders only
    receive the broadcast scores.
    """

    def __init__(self, config, run_id, share: HolderModelShare, samples, sample_ids):
        super().__init__(holder(share.index), config, run_id)
        self.share = share
        self.sample_ids = [int(i) for i in sample_ids]
        self.samples = None if samples is None else np.atleast_2d(np.asarray(samples, dtype=np.float64))
        self.state = "await_mask"
        self._p = None
        self.scores: np.ndarray | None = None

    def expects(self):
        return {"await_mask": (Step.MASK_DISTRIBUTION,), "await_scores": (Step.INCOMPLETE_SCORES,)}.get(
            self.state, ()
        )

    def _discard(self):
        self.scores = None

    def _elapsed(self, active: int, k: int) -> int:
        sh = self.share
        if sh.index < active:
            return sh.n_columns
        if sh.batch_shape is None:
            raise InvalidInputError(f"holder {sh.index} share has no batch shape")
        n_vars, n_time = sh.batch_shape
        if not 1 <= k <= n_time:
            raise InvalidInputError(f"k={k} outside [1, {n_time}] for holder {sh.index}")
        return k * n_vars

    def on_message(self, msg):
        sh = self.share
        s, r = len(self.sample_ids), sh.n_components
        if msg.step is Step.MASK_DISTRIBUTION:
            self.require_sender(msg, Role.TA)
            if sample_ids_of(msg) != self.sample_ids:
                raise ProtocolViolation(f"{self.party_id}: sample sequence differs from TA's")
            self._p = payload_array(msg, "p", (s,))
            w = payload_array(msg, "w", (r, r))
            active, k = msg.payload.get("active_holder"), msg.payload.get("k")
            if not isinstance(active, int) or not isinstance(k, int) or not 1 <= active <= self.config.g:
                raise ProtocolViolation("MaskDistribution lacks a valid active_holder/k")
            self.state = "await_scores"
            if sh.index > active:
                return []
            n_el = self._elapsed(active, k)
            if self.samples is None or self.samples.shape != (s, n_el) or not np.all(np.isfinite(self.samples)):
                got = None if self.samples is None else self.samples.shape
                raise InvalidInputError(f"holder {sh.index}: expected finite samples of shape {(s, n_el)}, got {got}")
            v_head = sh.loadings[:n_el]
            x_std = (self.samples - sh.mean[:n_el]) / sh.scale[:n_el]
            t_part = self._p[:, None] * (x_std @ v_head @ w)
            f_part = v_head.T @ v_head @ w
            return [self.send(CSP, Step.INCOMPLETE_PARTIALS, t_masked=t_part, f_masked=f_part)]

        self.require_sender(msg, Role.CSP)
        self.scores = payload_array(msg, "t_masked", (s, r)) / self._p[:, None]
        self.state = "done"
        return []
