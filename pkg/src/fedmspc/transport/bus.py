"""Deterministic in-process message bus.

Delivery is FIFO per sender and round-robin across senders; the sender
rotation order is a seeded permutation, so a given seed always yields the
same transcript.
"""
from __future__ import annotations

import logging
from collections import deque
from typing import Callable, Iterable, Protocol

import numpy as np

from ..errors import DeadlockError, FedMSPCError, ProtocolError, ProtocolViolation, SessionAborted
from ..protocol.messages import PartyId, ProtocolMessage
from .wire import Transcript

log = logging.getLogger(__name__)


class StateMachine(Protocol):
    party_id: PartyId
    state: str

    @property
    def done(self) -> bool: ...

    def start(self) -> list[ProtocolMessage]: ...

    def handle(self, msg: ProtocolMessage) -> list[ProtocolMessage]: ...

    def abort(self, reason: str) -> None: ...


def _abort_all(machines: Iterable[StateMachine], reason: str) -> None:
    # finished parties are aborted too: a failed session releases nothing
    for m in machines:
        m.abort(reason)


def run_bus(
    parties: Iterable[StateMachine],
    seed: int = 0,
    drop: Callable[[ProtocolMessage], bool] | None = None,
    max_messages: int = 1_000_000,
) -> Transcript:
    """Run state machines to completion and return the delivery transcript.

    ``drop`` is a fault-injection hook: messages for which it returns True
    are discarded instead of delivered.
    """
    machines = {m.party_id: m for m in parties}
    order = sorted(machines)
    rng = np.random.default_rng(seed)
    order = [order[i] for i in rng.permutation(len(order))]
    queues: dict[PartyId, deque] = {p: deque() for p in order}
    transcript = Transcript()

    try:
        for pid in order:
            queues[pid].extend(machines[pid].start())
        cursor = 0
        delivered = 0
        while any(queues.values()):
            # next sender in rotation with something queued
            for step in range(len(order)):
                sender = order[(cursor + step) % len(order)]
                if queues[sender]:
                    cursor = (cursor + step + 1) % len(order)
                    break
            msg = queues[sender].popleft()
            if drop is not None and drop(msg):
                log.info("dropped %s %s->%s", msg.step.value, msg.sender, msg.recipient)
                continue
            target = machines.get(msg.recipient)
            if target is None:
                raise ProtocolViolation(f"message for unknown party {msg.recipient}")
            if msg.sender != sender:
                raise ProtocolViolation(f"{sender} emitted a message claiming sender {msg.sender}")
            transcript.append(msg)
            queues[msg.recipient].extend(target.handle(msg))
            delivered += 1
            if delivered > max_messages:
                raise ProtocolError("message budget exhausted")
    except SessionAborted:
        raise
    except (FedMSPCError, ArithmeticError, np.linalg.LinAlgError) as exc:
        _abort_all(machines.values(), str(exc))
        raise SessionAborted(f"session aborted: {exc}", transcript, exc) from exc

    pending = {str(p): machines[p].state for p in order if not machines[p].done}
    if pending:
        _abort_all(machines.values(), "deadlock")
        raise DeadlockError(pending, transcript)
    return transcript
