"""Length-prefixed, canonical-JSON wire protocol between master and workers.

Frame layout: a 4-byte big-endian unsigned payload length, then the payload,
which is the canonical JSON text of the message (UTF-8, object keys sorted
lexicographically, no insignificant whitespace). Canonical form keeps frames
byte-deterministic, which the tests rely on.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass

import numpy as np

from .core import GramPartial, ModelCoefficients
from .data import CsvSchema, PartitionSpec
from .errors import ProtocolError

__all__ = [
    "PROTOCOL_VERSION",
    "MAX_PAYLOAD",
    "Message",
    "Hello",
    "HelloAck",
    "Assign",
    "ComputeGram",
    "GramResult",
    "ComputeGradient",
    "GradientResult",
    "ComputeSse",
    "SseResult",
    "Done",
    "Fail",
    "Shutdown",
    "encode_frame",
    "decode_frame",
    "send_message",
    "recv_message",
]

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024
_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class Hello:
    worker_rank: int
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class HelloAck:
    job_id: str


@dataclass(frozen=True)
class Assign:
    dataset_path: str
    schema: CsvSchema
    partition: PartitionSpec
    split_seed: int
    split_ratio: float


@dataclass(frozen=True)
class ComputeGram:
    scope: str  # "train" | "test"

    def __post_init__(self):
        if self.scope not in ("train", "test"):
            raise ValueError(f"invalid gram scope: {self.scope!r}")


@dataclass(frozen=True)
class GramResult:
    partial: GramPartial


@dataclass(frozen=True)
class ComputeGradient:
    theta: ModelCoefficients


@dataclass(frozen=True, eq=False)
class GradientResult:
    grad_sum: np.ndarray
    n: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GradientResult):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.grad_sum, other.grad_sum)


@dataclass(frozen=True)
class ComputeSse:
    theta: ModelCoefficients


@dataclass(frozen=True)
class SseResult:
    sse: float
    n: int


@dataclass(frozen=True)
class Done:
    pass


@dataclass(frozen=True)
class Fail:
    reason: str


@dataclass(frozen=True)
class Shutdown:
    pass


Message = (Hello | HelloAck | Assign | ComputeGram | GramResult | ComputeGradient
           | GradientResult | ComputeSse | SseResult | Done | Fail | Shutdown)


def _to_payload(msg: Message) -> dict:
    if isinstance(msg, Hello):
        return {"worker_rank": msg.worker_rank, "protocol_version": msg.protocol_version}
    if isinstance(msg, HelloAck):
        return {"job_id": msg.job_id}
    if isinstance(msg, Assign):
        return {"dataset_path": msg.dataset_path,
                "schema": msg.schema.to_json_obj(),
                "partition": msg.partition.to_json_obj(),
                "split_seed": msg.split_seed,
                "split_ratio": msg.split_ratio}
    if isinstance(msg, ComputeGram):
        return {"scope": msg.scope}
    if isinstance(msg, GramResult):
        return {"partial": msg.partial.to_json_obj()}
    if isinstance(msg, ComputeGradient):
        return {"theta": msg.theta.to_json_obj()}
    if isinstance(msg, GradientResult):
        return {"grad_sum": np.asarray(msg.grad_sum).tolist(), "n": msg.n}
    if isinstance(msg, ComputeSse):
        return {"theta": msg.theta.to_json_obj()}
    if isinstance(msg, SseResult):
        return {"sse": msg.sse, "n": msg.n}
    if isinstance(msg, (Done, Shutdown)):
        return {}
    if isinstance(msg, Fail):
        return {"reason": msg.reason}
    raise ProtocolError(f"cannot encode message of type {type(msg).__name__}")


_DECODERS = {
    "Hello": lambda o: Hello(int(o["worker_rank"]), int(o["protocol_version"])),
    "HelloAck": lambda o: HelloAck(str(o["job_id"])),
    "Assign": lambda o: Assign(str(o["dataset_path"]),
                               CsvSchema.from_json_obj(o["schema"]),
                               PartitionSpec.from_json_obj(o["partition"]),
                               int(o["split_seed"]), float(o["split_ratio"])),
    "ComputeGram": lambda o: ComputeGram(str(o["scope"])),
    "GramResult": lambda o: GramResult(GramPartial.from_json_obj(o["partial"])),
    "ComputeGradient": lambda o: ComputeGradient(ModelCoefficients.from_json_obj(o["theta"])),
    "GradientResult": lambda o: GradientResult(np.array(o["grad_sum"], dtype=np.float64),
                                               int(o["n"])),
    "ComputeSse": lambda o: ComputeSse(ModelCoefficients.from_json_obj(o["theta"])),
    "SseResult": lambda o: SseResult(float(o["sse"]), int(o["n"])),
    "Done": lambda o: Done(),
    "Fail": lambda o: Fail(str(o["reason"])),
    "Shutdown": lambda o: Shutdown(),
}


def encode_payload(msg: Message) -> bytes:
    obj = _to_payload(msg)
    obj["kind"] = type(msg).__name__
    try:
        text = json.dumps(obj, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False, allow_nan=False)
    except ValueError as exc:
        raise ProtocolError(f"message is not JSON-encodable: {exc}") from exc
    return text.encode("utf-8")


def encode_frame(msg: Message) -> bytes:
    """Serialize a message to one complete frame (length prefix + payload)."""
    payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(
            f"payload of {len(payload)} bytes exceeds the {MAX_PAYLOAD}-byte limit")
    return _LEN.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> Message:
    if not payload:
        raise ProtocolError("malformed frame: zero-length payload")
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame payload: {exc}") from exc
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ProtocolError("malformed frame: payload is not a tagged object")
    kind = obj["kind"]
    decoder = _DECODERS.get(kind)
    if decoder is None:
        raise ProtocolError(f"unknown message kind: {kind!r}")
    try:
        return decoder(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"invalid {kind} message: {exc}") from exc


def decode_frame(frame: bytes) -> Message:
    """Parse one complete frame produced by :func:`encode_frame`."""
    if len(frame) < _LEN.size:
        raise ProtocolError("malformed frame: truncated length prefix")
    (length,) = _LEN.unpack(frame[:_LEN.size])
    if length == 0:
        raise ProtocolError("malformed frame: zero-length payload")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame payload of {length} bytes exceeds the limit")
    payload = frame[_LEN.size:]
    if len(payload) != length:
        raise ProtocolError(
            f"malformed frame: expected {length} payload bytes, got {len(payload)}")
    return decode_payload(payload)


def _recvall(sock: socket.socket, length: int) -> bytes:
    chunks = []
    remaining = length
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_frame(msg))


def recv_message(sock: socket.socket) -> Message:
    header = _recvall(sock, _LEN.size)
    (length,) = _LEN.unpack(header)
    if length == 0:
        raise ProtocolError("malformed frame: zero-length payload")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame payload of {length} bytes exceeds the limit")
    return decode_payload(_recvall(sock, length))
