"""Federated PCA training: orthogonal masking, SVD at the CSP, masked unmixing of loadings."""
from __future__ import annotations

import math
import warnings

import numpy as np

from ..errors import LimitValidityError, ProtocolViolation
from ..mspc import (
    DegenerateLimitWarning,
    choose_n_components,
    column_mean_scale,
    q_control_limit,
    t2_control_limit,
)
from ..numerics import as_matrix, generate_invertible, generate_orthogonal, svd
from .messages import CSP, TA, ProtocolMessage, Role, Step, holder
from .roles import HolderModelShare, Party, SessionConfig, party_rng, payload_array


class TrainingAuthority(Party):
    """Draws the orthogonal masks P (m x m) and B (n x n); hands each holder only its block of B^T."""

    def __init__(self, config: SessionConfig, run_id: str):
        super().__init__(TA, config, run_id)

    def start(self) -> list[ProtocolMessage]:
        rng = party_rng(self.config, self.party_id, self.run_id)
        p = generate_orthogonal(self.config.row_count, rng)
        b = generate_orthogonal(self.config.n_variables, rng)
        out = []
        for h in self.config.holders:
            block_t = np.ascontiguousarray(b[self.config.column_slice(h.index), :].T)
            out.append(self.send(h, Step.MASK_DISTRIBUTION, p=p, b_block_t=block_t))
        self.state = "done"
        return out


class TrainingServer(Party):
    """CSP: sums masked blocks, runs the SVD, then answers masked unmix requests."""

    def __init__(self, config: SessionConfig, run_id: str):
        super().__init__(CSP, config, run_id)
        self.state = "collect_masked"
        self._masked: dict[int, np.ndarray] = {}
        self._served: set[int] = set()
        self._vt: np.ndarray | None = None

    def expects(self):
        return {
            "collect_masked": (Step.MASKED_DATA,),
            "serve_unmix": (Step.MASKED_UNMIX_REQUEST,),
        }.get(self.state, ())

    def _discard(self):
        self._masked.clear()
        self._vt = None

    def on_message(self, msg):
        self.require_sender(msg, Role.HOLDER)
        cfg = self.config
        i = msg.sender.index
        if msg.step is Step.MASKED_DATA:
            if i in self._masked:
                raise ProtocolViolation(f"duplicate MaskedData from {msg.sender}")
            self._masked[i] = payload_array(msg, "x_masked", (cfg.row_count, cfg.n_variables))
            if len(self._masked) < cfg.g:
                return []
            aggregate = self._masked[1].copy()
            for j in range(2, cfg.g + 1):
                aggregate += self._masked[j]
            res = svd(aggregate)
            self._vt = res.vt
            self._masked.clear()
            self.state = "serve_unmix"
            return [self.send(h, Step.SIGMA_BROADCAST, sigma=res.singular_values) for h in cfg.holders]

        if i in self._served:
            raise ProtocolViolation(f"duplicate MaskedUnmixRequest from {msg.sender}")
        b_masked = payload_array(msg, "b_masked", (cfg.n_variables, cfg.column_counts[i - 1]))
        self._served.add(i)
        reply = self.send(msg.sender, Step.MASKED_LOADINGS, v_masked=self._vt @ b_masked)
        if len(self._served) == cfg.g:
            self._vt = None
            self.state = "done"
        return [reply]


class TrainingHolder(Party):
    """Data holder: masks its standardized block, then unmasks its own loadings block."""

    def __init__(self, config: SessionConfig, run_id: str, index: int, x_local, variable_names=None):
        super().__init__(holder(index), config, run_id)
        x = as_matrix(x_local, f"holder {index} data")
        expected = (config.row_count, config.column_counts[index - 1])
        if x.shape != expected:
            raise ProtocolViolation(f"holder {index} data has shape {x.shape}, session expects {expected}")
        self.index = index
        self.mean, self.scale = column_mean_scale(x, variable_names)
        self.x_std = (x - self.mean) / self.scale
        self.variable_names = tuple(variable_names) if variable_names is not None else None
        self.state = "await_masks"
        self._b_block_t = None
        self._r_mask = None
        self._sigma = None
        self._r = None
        self.share: HolderModelShare | None = None

    def expects(self):
        return {
            "await_masks": (Step.MASK_DISTRIBUTION,),
            "await_sigma": (Step.SIGMA_BROADCAST,),
            "await_loadings": (Step.MASKED_LOADINGS,),
        }.get(self.state, ())

    def _discard(self):
        self.share = None
        self._r_mask = None

    def on_message(self, msg):
        cfg = self.config
        m, n, n_i = cfg.row_count, cfg.n_variables, cfg.column_counts[self.index - 1]
        if msg.step is Step.MASK_DISTRIBUTION:
            self.require_sender(msg, Role.TA)
            p = payload_array(msg, "p", (m, m))
            self._b_block_t = payload_array(msg, "b_block_t", (n, n_i))
            masked = p @ self.x_std @ self._b_block_t.T
            self.state = "await_sigma"
            return [self.send(CSP, Step.MASKED_DATA, x_masked=masked)]

        self.require_sender(msg, Role.CSP)
        if msg.step is Step.SIGMA_BROADCAST:
            self._sigma = payload_array(msg, "sigma", (min(m, n),))
            self._r = choose_n_components(self._sigma, cfg.variance_target)
            rng = party_rng(cfg, self.party_id, self.run_id)
            self._r_mask = generate_invertible(n_i, rng)
            self.state = "await_loadings"
            return [self.send(CSP, Step.MASKED_UNMIX_REQUEST, b_masked=self._b_block_t @ self._r_mask)]

        v_masked = payload_array(msg, "v_masked", (min(m, n), n_i))
        # V_i^T = [V_i^T]^R R_i^-1, i.e. R_i^T V_i = ([V_i^T]^R)^T
        v_block = np.linalg.solve(self._r_mask.T, v_masked.T)
        self.share = self._build_share(v_block[:, : self._r])
        self._b_block_t = self._r_mask = None
        self.state = "done"
        return []

    def _build_share(self, loadings: np.ndarray) -> HolderModelShare:
        cfg = self.config
        t2_limit = t2_control_limit(cfg.row_count, self._r, cfg.alpha)
        try:
            q_limit, degenerate = q_control_limit(
                self._sigma, self._r, cfg.alpha, cfg.row_count, cfg.eigenvalue_scaling
            )
        except LimitValidityError as exc:
            if cfg.strict_limits:
                raise
            warnings.warn(f"{exc}; Q limit set to inf", DegenerateLimitWarning, stacklevel=2)
            q_limit, degenerate = math.inf, False
        if degenerate:
            warnings.warn("no residual variance: Q limit is 0", DegenerateLimitWarning, stacklevel=2)
        return HolderModelShare(
            index=self.index,
            sigma=self._sigma,
            n_components=self._r,
            loadings=loadings,
            mean=self.mean,
            scale=self.scale,
            t2_limit=t2_limit,
            q_limit=q_limit,
            n_train_samples=cfg.row_count,
            alpha=cfg.alpha,
            eigenvalue_scaling=cfg.eigenvalue_scaling,
            q_limit_degenerate=degenerate,
            batch_shape=cfg.batch_shapes[self.index - 1] if cfg.batch_shapes else None,
            variable_names=self.variable_names,
        )
