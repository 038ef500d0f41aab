"""Party identities, protocol steps and the message record exchanged between roles."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class Role(str, enum.Enum):
    TA = "TA"
    CSP = "CSP"
    HOLDER = "DataHolder"


@dataclass(frozen=True, order=True)
class PartyId:
    role: Role
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if self.role is Role.HOLDER and self.index < 1:
            raise ValueError("data holder index must be >= 1")
        if self.role is not Role.HOLDER and self.index != 0:
            raise ValueError(f"{self.role.value} has no index")

    def __str__(self) -> str:
        return f"H{self.index}" if self.role is Role.HOLDER else self.role.value

    @classmethod
    def parse(cls, text: str) -> "PartyId":
        if text in ("TA", "CSP"):
            return cls(Role(text))
        if text.startswith("H") and text[1:].isdigit():
            return cls(Role.HOLDER, int(text[1:]))
        raise ValueError(f"unrecognised party id {text!r}")


TA = PartyId(Role.TA)
CSP = PartyId(Role.CSP)


def holder(i: int) -> PartyId:
    return PartyId(Role.HOLDER, i)


class Step(str, enum.Enum):
    MASK_DISTRIBUTION = "MaskDistribution"
    MASKED_DATA = "MaskedData"
    SIGMA_BROADCAST = "SigmaBroadcast"
    MASKED_UNMIX_REQUEST = "MaskedUnmixRequest"
    MASKED_LOADINGS = "MaskedLoadings"
    MASKED_SCORES = "MaskedScores"
    AGGREGATED_SCORES = "AggregatedScores"
    MASKED_Q = "MaskedQ"
    AGGREGATED_Q = "AggregatedQ"
    INCOMPLETE_PARTIALS = "IncompletePartials"
    INCOMPLETE_SCORES = "IncompleteScores"


@dataclass(frozen=True, eq=False)
class ProtocolMessage:
    session_id: str
    sender: PartyId
    recipient: PartyId
    step: Step
    payload: dict[str, Any] = field(default_factory=dict)

    def key(self) -> tuple[str, str, str]:
        return (str(self.sender), str(self.recipient), self.step.value)

    def arrays(self):
        """Yield ``(name, ndarray)`` for every array-valued payload entry."""
        for name, value in sorted(self.payload.items()):
            if isinstance(value, np.ndarray):
                yield name, value

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProtocolMessage):
            return NotImplemented
        if (self.session_id, self.sender, self.recipient, self.step) != (
            other.session_id,
            other.sender,
            other.recipient,
            other.step,
        ):
            return False
        return payloads_identical(self.payload, other.payload)


def payloads_identical(a: dict, b: dict) -> bool:
    """Bit-level equality of two payload dicts (arrays compared by dtype, shape and bytes)."""
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = a[k], b[k]
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if not (isinstance(x, np.ndarray) and isinstance(y, np.ndarray)):
                return False
            if x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
        elif isinstance(x, float) and isinstance(y, float):
            if np.float64(x).tobytes() != np.float64(y).tobytes():
                return False
        elif x != y or type(x) is not type(y):
            return False
    return True
