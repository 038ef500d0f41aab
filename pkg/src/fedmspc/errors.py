"""Exception hierarchy shared by every fedmspc module."""


class FedMSPCError(Exception):
    """Base class for all errors raised by fedmspc."""


class InvalidInputError(FedMSPCError, ValueError):
    pass


class NumericalError(FedMSPCError, ArithmeticError):
    pass


class DegenerateModelError(NumericalError):
    """A retained component has a zero singular value."""


class LimitValidityError(NumericalError):
    """The Q-limit approximation is outside its validity regime (h0 <= 0)."""


class IllConditionedProjectionError(NumericalError):
    def __init__(self, message: str, k: int | None = None, condition: float | None = None):
        super().__init__(message)
        self.k = k
        self.condition = condition


class ProtocolError(FedMSPCError):
    """Base class for federated-protocol failures."""


class ProtocolViolation(ProtocolError):
    """Wrong session, wrong sender, or payload dimensions inconsistent with the session."""


class StateMachineError(ProtocolError):
    def __init__(self, party, expected, actual):
        super().__init__(f"{party}: expected step {expected}, got {actual}")
        self.party = party
        self.expected = expected
        self.actual = actual


class SessionAborted(ProtocolError):
    def __init__(self, message: str, transcript=None, cause: BaseException | None = None):
        super().__init__(message)
        self.transcript = transcript
        self.cause = cause


class DeadlockError(SessionAborted):
    def __init__(self, states: dict, transcript=None):
        detail = ", ".join(f"{k}={v}" for k, v in states.items())
        super().__init__(f"deadlock: no messages in flight ({detail})", transcript)
        self.states = states


class FrameError(ProtocolError):
    """Malformed, truncated or oversized wire frame."""


class ConfigError(FedMSPCError):
    pass
