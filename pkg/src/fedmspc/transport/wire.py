"""Canonical JSON serialization and 4-byte length-prefixed framing.

Floats are written with 17 significant digits, which round-trips every
IEEE double exactly. Arrays carry an explicit shape next to row-major
nested data. Object keys are sorted, so equal messages give equal bytes.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ..errors import FrameError
from ..protocol.messages import PartyId, ProtocolMessage, Step

HEADER = struct.Struct(">I")
MAX_FRAME = 2**32 - 1
ARRAY_TAG = "__ndarray__"


def _float(x: float) -> str:
    if not math.isfinite(x):
        raise FrameError(f"non-finite float {x!r} cannot be encoded")
    text = format(x, ".17g")
    if not any(c in text for c in ".en"):
        text += ".0"
    return text


def _dump(value, out: list[str]) -> None:
    if value is None:
        out.append("null")
    elif isinstance(value, (bool, np.bool_)):
        out.append("true" if value else "false")
    elif isinstance(value, (int, np.integer)):
        out.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        out.append(_float(float(value)))
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, np.ndarray):
        arr = np.asarray(value, dtype=np.float64)
        _dump({ARRAY_TAG: "float64", "data": arr.tolist(), "shape": list(arr.shape)}, out)
    elif isinstance(value, dict):
        out.append("{")
        for i, key in enumerate(sorted(value)):
            if i:
                out.append(",")
            out.append(json.dumps(str(key), ensure_ascii=False))
            out.append(":")
            _dump(value[key], out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _dump(item, out)
        out.append("]")
    else:
        raise FrameError(f"cannot encode value of type {type(value).__name__}")


def canonical_json(value) -> str:
    out: list[str] = []
    _dump(value, out)
    return "".join(out)


def _restore(value):
    if isinstance(value, dict):
        if ARRAY_TAG in value:
            shape = tuple(value["shape"])
            arr = np.asarray(value["data"], dtype=np.float64)
            return arr.reshape(shape)
        return {k: _restore(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_restore(v) for v in value]
    return value


def message_to_doc(msg: ProtocolMessage) -> dict:
    return {
        "payload": msg.payload,
        "recipient": str(msg.recipient),
        "sender": str(msg.sender),
        "session_id": msg.session_id,
        "step": msg.step.value,
    }


def message_from_doc(doc: dict) -> ProtocolMessage:
    try:
        return ProtocolMessage(
            session_id=str(doc["session_id"]),
            sender=PartyId.parse(doc["sender"]),
            recipient=PartyId.parse(doc["recipient"]),
            step=Step(doc["step"]),
            payload=_restore(doc["payload"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise FrameError(f"body is not a protocol message: {exc}") from exc


def encode_body(msg: ProtocolMessage) -> bytes:
    return canonical_json(message_to_doc(msg)).encode("utf-8")


def decode_body(body: bytes) -> ProtocolMessage:
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"frame body is not UTF-8 JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FrameError("frame body is not a JSON object")
    return message_from_doc(doc)


def frame(body: bytes) -> bytes:
    if len(body) > MAX_FRAME:
        raise FrameError(f"frame too large: {len(body)} bytes")
    return HEADER.pack(len(body)) + body


def encode(msg: ProtocolMessage) -> bytes:
    """Length-prefixed wire frame for ``msg``."""
    return frame(encode_body(msg))


def decode(data: bytes) -> ProtocolMessage:
    """Parse exactly one complete frame."""
    if len(data) < HEADER.size:
        raise FrameError(f"truncated header: {len(data)} bytes")
    (length,) = HEADER.unpack_from(data)
    if length == 0:
        raise FrameError("zero-length frame")
    body = data[HEADER.size :]
    if len(body) != length:
        raise FrameError(f"frame declares {length} body bytes, got {len(body)}")
    return decode_body(body)


@dataclass
class Transcript:
    """Append-only, ordered record of delivered messages."""

    messages: list[ProtocolMessage] = field(default_factory=list)

    def append(self, msg: ProtocolMessage) -> None:
        self.messages.append(msg)

    def __iter__(self) -> Iterator[ProtocolMessage]:
        return iter(self.messages)

    def __len__(self) -> int:
        return len(self.messages)

    def __getitem__(self, i):
        return self.messages[i]

    def extend(self, msgs: Iterable[ProtocolMessage]) -> None:
        self.messages.extend(msgs)

    def to_ndjson(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for msg in self.messages:
                fh.write(canonical_json(message_to_doc(msg)))
                fh.write("\n")

    @classmethod
    def from_ndjson(cls, path) -> "Transcript":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([decode_body(line.encode("utf-8")) for line in lines if line.strip()])
