"""Federated training, inference and incomplete-batch scoring across TA, CSP and data holders."""
from .audit import AuditReport, Finding, audit_privacy
from .inference import HolderMonitoring
from .messages import CSP, TA, PartyId, ProtocolMessage, Role, Step, holder
from .roles import HolderModelShare, SessionConfig
from .session import fed_infer, fed_score_incomplete, fed_train

__all__ = [
    "AuditReport",
    "Finding",
    "audit_privacy",
    "HolderMonitoring",
    "HolderModelShare",
    "SessionConfig",
    "PartyId",
    "ProtocolMessage",
    "Role",
    "Step",
    "TA",
    "CSP",
    "holder",
    "fed_train",
    "fed_infer",
    "fed_score_incomplete",
]
