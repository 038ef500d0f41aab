"""Length-prefixed frames over TCP.

Each party listens on its own endpoint and opens one outbound connection per
peer it sends to, so per-sender FIFO order is TCP's own ordering. Incoming
frames from all connections feed a single inbox that the party's state
machine drains serially.
"""
from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from typing import Callable, Iterable

from ..errors import FedMSPCError, FrameError, ProtocolViolation, SessionAborted
from ..protocol.messages import PartyId, ProtocolMessage
from .wire import HEADER, decode_body, encode
from .wire import Transcript

log = logging.getLogger(__name__)

Address = tuple[str, int]
# Fault hook: returns None to send normally, or one of
# "zero_length" | "truncate" | "garbage" | "crash".
FaultHook = Callable[[ProtocolMessage], "str | None"]


def parse_address(text: str) -> Address:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _hard_close(sock: socket.socket) -> None:
    # RST instead of FIN so peers notice the abort immediately
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


class _Abort:
    def __init__(self, reason: str):
        self.reason = reason


class TcpNode:
    """Runs one state machine behind a listening socket."""

    def __init__(
        self,
        machine,
        listen: Address = ("127.0.0.1", 0),
        peers: dict[PartyId, Address] | None = None,
        timeout: float = 30.0,
        on_deliver: Callable[[ProtocolMessage], None] | None = None,
        fault: FaultHook | None = None,
    ):
        self.machine = machine
        self.peers = dict(peers or {})
        self.timeout = timeout
        self.on_deliver = on_deliver
        self.fault = fault
        self.inbox: queue.Queue = queue.Queue()
        self.server = socket.create_server(listen, reuse_port=False)
        self.address: Address = self.server.getsockname()[:2]
        self._outbound: dict[PartyId, socket.socket] = {}
        self._inbound: list[socket.socket] = []
        self._lock = threading.Lock()
        self._closing = threading.Event()
        self.error: SessionAborted | None = None

    # -- receiving --------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self.server.accept()
            except OSError:
                return
            with self._lock:
                self._inbound.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket) -> None:
        try:
            while True:
                header = _recv_exact(conn, HEADER.size)
                if not header:
                    return  # orderly close at a frame boundary
                if len(header) < HEADER.size:
                    raise FrameError("connection closed inside a frame header")
                (length,) = HEADER.unpack(header)
                if length == 0:
                    raise FrameError("zero-length frame")
                body = _recv_exact(conn, length)
                if len(body) != length:
                    raise FrameError(f"truncated frame: {len(body)} of {length} bytes")
                msg = decode_body(body)
                if msg.session_id != self.machine.run_id:
                    log.warning("%s: rejecting connection for session %r", self.machine.party_id, msg.session_id)
                    _hard_close(conn)
                    return
                if msg.recipient != self.machine.party_id:
                    raise ProtocolViolation(f"frame addressed to {msg.recipient} arrived at {self.machine.party_id}")
                self.inbox.put(msg)
        except (FrameError, ProtocolViolation) as exc:
            if not self._closing.is_set():
                log.error("%s: protocol error, closing connection: %s", self.machine.party_id, exc)
                self.inbox.put(_Abort(f"protocol error: {exc}"))
            _hard_close(conn)
        except OSError as exc:
            if not self._closing.is_set():
                self.inbox.put(_Abort(f"connection lost: {exc}"))

    # -- sending ----------------------------------------------------------

    def _connect(self, peer: PartyId, deadline: float) -> socket.socket:
        sock = self._outbound.get(peer)
        if sock is not None:
            return sock
        if peer not in self.peers:
            raise ProtocolViolation(f"{self.machine.party_id} has no endpoint for {peer}")
        while True:
            try:
                sock = socket.create_connection(self.peers[peer], timeout=max(0.1, deadline - time.monotonic()))
                sock.settimeout(None)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
        self._outbound[peer] = sock
        return sock

    def _send(self, msg: ProtocolMessage, deadline: float) -> None:
        action = self.fault(msg) if self.fault else None
        if action == "crash":
            raise _Crash()
        data = encode(msg)
        if action == "zero_length":
            data = HEADER.pack(0)
        elif action == "truncate":
            data = data[: len(data) // 2]
        elif action == "garbage":
            data = HEADER.pack(5) + b"{{{{{"
        sock = self._connect(msg.recipient, deadline)
        sock.sendall(data)
        if action == "truncate":
            # half a frame then an orderly close
            sock.shutdown(socket.SHUT_WR)

    # -- main loop --------------------------------------------------------

    def run(self) -> None:
        threading.Thread(target=self._accept_loop, daemon=True).start()
        deadline = time.monotonic() + self.timeout
        try:
            for out in self.machine.start():
                self._send(out, deadline)
            while not self.machine.done:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise SessionAborted(f"{self.machine.party_id}: session timed out in state {self.machine.state}")
                try:
                    item = self.inbox.get(timeout=remaining)
                except queue.Empty:
                    continue
                if isinstance(item, _Abort):
                    raise SessionAborted(f"{self.machine.party_id}: {item.reason}")
                if self.on_deliver is not None:
                    self.on_deliver(item)
                for out in self.machine.handle(item):
                    self._send(out, deadline)
        except _Crash:
            self.machine.abort("simulated crash")
            self.error = SessionAborted(f"{self.machine.party_id}: simulated crash")
            self._close(hard=True)
            return
        except SessionAborted as exc:
            self.machine.abort(str(exc))
            self.error = exc
            self._close(hard=True)
            return
        except (FedMSPCError, ArithmeticError, OSError) as exc:
            self.machine.abort(str(exc))
            self.error = SessionAborted(f"{self.machine.party_id}: {exc}", cause=exc)
            self._close(hard=True)
            return
        self._close(hard=False)

    def _close(self, hard: bool) -> None:
        self._closing.set()
        try:
            self.server.close()
        except OSError:
            pass
        for sock in list(self._outbound.values()):
            if hard:
                _hard_close(sock)
            else:
                try:
                    sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                sock.close()
        with self._lock:
            inbound = list(self._inbound)
        for sock in inbound:
            if hard:
                _hard_close(sock)
            else:
                try:
                    sock.close()
                except OSError:
                    pass


class _Crash(Exception):
    pass


def serve_party(
    machine,
    listen: Address,
    peers: dict[PartyId, Address],
    timeout: float = 60.0,
) -> TcpNode:
    """Run a single role in this process until it finishes; raises SessionAborted on failure."""
    node = TcpNode(machine, listen, peers, timeout)
    node.run()
    if node.error is not None:
        raise node.error
    return node


def run_tcp(
    parties: Iterable,
    seed: int = 0,
    host: str = "127.0.0.1",
    timeout: float = 30.0,
    faults: dict[PartyId, FaultHook] | None = None,
) -> Transcript:
    """Run every party in its own thread over localhost sockets.

    Same call shape as :func:`run_bus`; ``seed`` is accepted for symmetry but
    unused since delivery order across senders is up to the network.
    """
    machines = list(parties)
    transcript = Transcript()
    lock = threading.Lock()

    def record(msg):
        with lock:
            transcript.append(msg)

    faults = faults or {}
    nodes = [
        TcpNode(m, (host, 0), timeout=timeout, on_deliver=record, fault=faults.get(m.party_id)) for m in machines
    ]
    peers = {n.machine.party_id: n.address for n in nodes}
    for n in nodes:
        n.peers = peers
    threads = [threading.Thread(target=n.run, name=str(n.machine.party_id)) for n in nodes]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    errors = [n.error for n in nodes if n.error is not None]
    if errors:
        for m in machines:
            if not m.done:
                m.abort("peer aborted")
            elif errors:
                # a finished party still must not release results of a failed session
                m.abort("session failed elsewhere")
        raise SessionAborted("; ".join(str(e) for e in errors), transcript, errors[0].cause or errors[0])
    return transcript
