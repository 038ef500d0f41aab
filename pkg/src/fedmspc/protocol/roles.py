"""Session configuration, shared role plumbing and the per-holder model share."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from ..errors import InvalidInputError, ProtocolViolation, StateMachineError
from ..mspc import SCALINGS, Scaling, component_eigenvalues
from .messages import CSP, TA, PartyId, ProtocolMessage, Role, Step, holder

P_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class SessionConfig:
    """Public parameters every party of a federated session agrees on."""

    session_id: str
    column_counts: tuple[int, ...]
    row_count: int
    variance_target: float = 0.9
    alpha: float = 0.05
    eigenvalue_scaling: Scaling = "sigma_squared"
    seeds: dict[str, int] = field(default_factory=dict)
    # per-holder (J_i, K_i) for batch models; None for plain PCA
    batch_shapes: tuple[tuple[int, int], ...] | None = None
    strict_limits: bool = True

    def __post_init__(self):
        object.__setattr__(self, "column_counts", tuple(int(c) for c in self.column_counts))
        if self.batch_shapes is not None:
            object.__setattr__(self, "batch_shapes", tuple(tuple(int(v) for v in s) for s in self.batch_shapes))
        if len(self.column_counts) < 2:
            raise InvalidInputError(f"a session needs g >= 2 data holders, got {len(self.column_counts)}")
        if any(c < 1 for c in self.column_counts):
            raise InvalidInputError("every holder must own at least one column")
        if self.row_count < 2:
            raise InvalidInputError("row_count must be >= 2")
        if not (0 < self.alpha < 1):
            raise InvalidInputError("alpha must lie in (0, 1)")
        if not (0 < self.variance_target <= 1):
            raise InvalidInputError("variance_target must lie in (0, 1]")
        if self.eigenvalue_scaling not in SCALINGS:
            raise InvalidInputError(f"unknown eigenvalue_scaling {self.eigenvalue_scaling!r}")
        if self.batch_shapes is not None:
            if len(self.batch_shapes) != self.g:
                raise InvalidInputError("batch_shapes needs one (J, K) per holder")
            for (j, k), n in zip(self.batch_shapes, self.column_counts):
                if j * k != n:
                    raise InvalidInputError(f"batch shape {(j, k)} does not match {n} columns")

    @property
    def g(self) -> int:
        return len(self.column_counts)

    @property
    def n_variables(self) -> int:
        return sum(self.column_counts)

    @property
    def holders(self) -> list[PartyId]:
        return [holder(i) for i in range(1, self.g + 1)]

    def column_slice(self, i: int) -> slice:
        start = sum(self.column_counts[: i - 1])
        return slice(start, start + self.column_counts[i - 1])

    def seed_for(self, party: PartyId) -> int:
        key = str(party)
        if key in self.seeds:
            return int(self.seeds[key])
        if "master" in self.seeds:
            return int(self.seeds["master"]) * 1000 + zlib.crc32(key.encode())
        return zlib.crc32(key.encode())

    @classmethod
    def from_seed(cls, seed: int, **kwargs) -> "SessionConfig":
        return cls(seeds={"master": int(seed)}, **kwargs)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "column_counts": list(self.column_counts),
            "row_count": self.row_count,
            "variance_target": self.variance_target,
            "alpha": self.alpha,
            "eigenvalue_scaling": self.eigenvalue_scaling,
            "seeds": dict(self.seeds),
            "batch_shapes": [list(s) for s in self.batch_shapes] if self.batch_shapes else None,
            "strict_limits": self.strict_limits,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SessionConfig":
        doc = dict(doc)
        if doc.get("batch_shapes") is not None:
            doc["batch_shapes"] = tuple(tuple(s) for s in doc["batch_shapes"])
        return cls(**doc)


def party_rng(config: SessionConfig, party: PartyId, run_id: str) -> np.random.Generator:
    """Per-party generator bound to one protocol run, so reruns reproduce exactly."""
    return np.random.default_rng([config.seed_for(party), zlib.crc32(run_id.encode())])


def draw_scalar_masks(rng: np.random.Generator, size: int) -> np.ndarray:
    magnitude = rng.uniform(*P_RANGE, size=size)
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return sign * magnitude


@dataclass(frozen=True, eq=False)
class HolderModelShare:
    """What data holder ``index`` keeps after federated training.

    ``loadings`` is this holder's private row block of the shared loadings;
    everything else is either local (mean/scale) or known to all holders.
    """

    index: int
    sigma: np.ndarray
    n_components: int
    loadings: np.ndarray  # n_i x r
    mean: np.ndarray
    scale: np.ndarray
    t2_limit: float
    q_limit: float
    n_train_samples: int
    alpha: float
    eigenvalue_scaling: Scaling
    q_limit_degenerate: bool = False
    batch_shape: tuple[int, int] | None = None
    variable_names: tuple[str, ...] | None = None

    @property
    def n_columns(self) -> int:
        return self.loadings.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        return component_eigenvalues(self.sigma[: self.n_components], self.n_train_samples, self.eigenvalue_scaling)

    def with_limits(self, t2_limit: float | None = None, q_limit: float | None = None) -> "HolderModelShare":
        return replace(
            self,
            t2_limit=self.t2_limit if t2_limit is None else float(t2_limit),
            q_limit=self.q_limit if q_limit is None else float(q_limit),
        )

    def to_dict(self) -> dict:
        return {
            "schema": "fedmspc-share-v1",
            "index": self.index,
            "sigma": self.sigma.tolist(),
            "n_components": self.n_components,
            "loadings": self.loadings.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "t2_limit": self.t2_limit,
            "q_limit": self.q_limit,
            "n_train_samples": self.n_train_samples,
            "alpha": self.alpha,
            "eigenvalue_scaling": self.eigenvalue_scaling,
            "q_limit_degenerate": self.q_limit_degenerate,
            "batch_shape": list(self.batch_shape) if self.batch_shape else None,
            "variable_names": list(self.variable_names) if self.variable_names else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HolderModelShare":
        if doc.get("schema") != "fedmspc-share-v1":
            raise InvalidInputError("not a fedmspc-share-v1 document")
        r = int(doc["n_components"])
        return cls(
            index=int(doc["index"]),
            sigma=np.asarray(doc["sigma"], dtype=np.float64),
            n_components=r,
            loadings=np.asarray(doc["loadings"], dtype=np.float64).reshape(-1, r),
            mean=np.asarray(doc["mean"], dtype=np.float64),
            scale=np.asarray(doc["scale"], dtype=np.float64),
            t2_limit=float(doc["t2_limit"]),
            q_limit=float(doc["q_limit"]),
            n_train_samples=int(doc["n_train_samples"]),
            alpha=float(doc["alpha"]),
            eigenvalue_scaling=doc["eigenvalue_scaling"],
            q_limit_degenerate=bool(doc["q_limit_degenerate"]),
            batch_shape=tuple(doc["batch_shape"]) if doc.get("batch_shape") else None,
            variable_names=tuple(doc["variable_names"]) if doc.get("variable_names") else None,
        )


class Party:
    """Single-threaded event-driven role.

    Subclasses declare which steps they accept in each state through
    ``expects()``; anything else aborts the session. Results are only
    readable once the machine reaches ``done``.
    """

    def __init__(self, party_id: PartyId, config: SessionConfig, run_id: str):
        self.party_id = party_id
        self.config = config
        self.run_id = run_id
        self.state = "init"
        self.abort_reason: str | None = None

    @property
    def done(self) -> bool:
        return self.state == "done"

    def expects(self) -> tuple[Step, ...]:
        return ()

    def start(self) -> list[ProtocolMessage]:
        return []

    def abort(self, reason: str) -> None:
        self.state = "aborted"
        self.abort_reason = reason
        self._discard()

    def _discard(self) -> None:
        """Drop any partially computed results."""

    def handle(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        if msg.session_id != self.run_id:
            raise ProtocolViolation(f"{self.party_id}: message for session {msg.session_id!r}, expected {self.run_id!r}")
        if msg.recipient != self.party_id:
            raise ProtocolViolation(f"{self.party_id}: received message addressed to {msg.recipient}")
        allowed = self.expects()
        if msg.step not in allowed:
            expected = "/".join(s.value for s in allowed) or "nothing"
            raise StateMachineError(str(self.party_id), expected, msg.step.value)
        return self.on_message(msg)

    def on_message(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        raise NotImplementedError

    def send(self, recipient: PartyId, step: Step, **payload: Any) -> ProtocolMessage:
        # contiguous float64 arrays keep bus and wire deliveries bit-identical downstream
        clean = {
            k: np.ascontiguousarray(v, dtype=np.float64) if isinstance(v, np.ndarray) else v for k, v in payload.items()
        }
        return ProtocolMessage(self.run_id, self.party_id, recipient, step, clean)

    def require_sender(self, msg: ProtocolMessage, role: Role) -> None:
        if msg.sender.role is not role:
            raise ProtocolViolation(f"{self.party_id}: {msg.step.value} must come from {role.value}, got {msg.sender}")
        if role is Role.HOLDER and not 1 <= msg.sender.index <= self.config.g:
            raise ProtocolViolation(f"{self.party_id}: unknown holder {msg.sender}")


def payload_array(msg: ProtocolMessage, key: str, shape: Sequence[int | None]) -> np.ndarray:
    """Fetch an array from ``msg.payload`` and check its shape (None matches any extent)."""
    value = msg.payload.get(key)
    if not isinstance(value, np.ndarray):
        raise ProtocolViolation(f"{msg.step.value} from {msg.sender}: missing array {key!r}")
    if value.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, value.shape)):
        raise ProtocolViolation(
            f"{msg.step.value} from {msg.sender}: {key!r} has shape {value.shape}, expected {tuple(shape)}"
        )
    if not np.all(np.isfinite(value)):
        raise ProtocolViolation(f"{msg.step.value} from {msg.sender}: {key!r} is not finite")
    return value


def sample_ids_of(msg: ProtocolMessage) -> list[int]:
    ids = msg.payload.get("sample_ids")
    if not isinstance(ids, list) or not all(isinstance(i, int) for i in ids):
        raise ProtocolViolation(f"{msg.step.value} from {msg.sender}: missing sample_ids")
    return ids


__all__ = [
    "SessionConfig",
    "HolderModelShare",
    "Party",
    "TA",
    "CSP",
    "holder",
    "party_rng",
    "draw_scalar_masks",
    "payload_array",
    "sample_ids_of",
]
