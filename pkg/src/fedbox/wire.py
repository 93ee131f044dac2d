"""Byte-exact wire format for federation messages and parameter sets.

All integers are little-endian.

Frame layout::

    magic   "FLSD"  (4 bytes)
    version u16     (currently 1)
    type    u8      (0=InitModel 1=TrainRequest 2=WeightUpdate
                     3=GlobalUpdate 4=Done 5=Metrics)
    length  u64     payload byte count
    payload

Parameter-set payload (embedded in InitModel/WeightUpdate/GlobalUpdate)::

    entry_count u32
    per entry:  name_len u32 | name utf-8 | role u8 (0=trainable 1=statistic)
                | ndim u8 | dims u64 each | raw float32 data

Message payloads::

    InitModel:    parameter-set bytes (full model)
    TrainRequest: round u32 | epochs u32
    WeightUpdate: round u32 | id_len u32 | client_id utf-8 | num_examples u64
                  | parameter-set bytes (shared subset)
    GlobalUpdate: round u32 | parameter-set bytes (aggregated shared subset)
    Done:         empty
    Metrics:      round u32 | id_len u32 | client_id utf-8
                  | precision f64 | recall f64 | f1 f64
                  | tp u64 | fp u64 | fn u64

A standalone serialized parameter set (e.g. written to disk) is the magic and
version header followed by the parameter-set payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import WireFormatError
from .params import ROLE_STATISTIC, ROLE_TRAINABLE, NamedParameterSet

MAGIC = b"FLSD"
VERSION = 1
HEADER = struct.Struct("<4sHBQ")

MSG_INIT_MODEL = 0
MSG_TRAIN_REQUEST = 1
MSG_WEIGHT_UPDATE = 2
MSG_GLOBAL_UPDATE = 3
MSG_DONE = 4
MSG_METRICS = 5

# Guard against absurd declared lengths before attempting to allocate.
MAX_FRAME_PAYLOAD = 1 << 30

_ROLE_TO_BYTE = {ROLE_TRAINABLE: 0, ROLE_STATISTIC: 1}
_BYTE_TO_ROLE = {0: ROLE_TRAINABLE, 1: ROLE_STATISTIC}


@dataclass(frozen=True)
class InitModel:
    params: NamedParameterSet


@dataclass(frozen=True)
class TrainRequest:
    round: int
    epochs: int


@dataclass(frozen=True)
class WeightUpdate:
    round: int
    client_id: str
    params: NamedParameterSet
    num_examples: int


@dataclass(frozen=True)
class GlobalUpdate:
    round: int
    params: NamedParameterSet


@dataclass(frozen=True)
class Done:
    pass


@dataclass(frozen=True)
class Metrics:
    round: int
    client_id: str
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


Message = InitModel | TrainRequest | WeightUpdate | GlobalUpdate | Done | Metrics


class _Reader:
    """Sequential parser over a byte buffer with truncation checks."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise WireFormatError("truncated frame")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise WireFormatError(
                f"frame has {len(self.data) - self.pos} trailing bytes"
            )


def _encode_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_params_payload(params: NamedParameterSet) -> bytes:
    """Parameter-set bytes as embedded in messages (no magic/version)."""
    parts = [struct.pack("<I", len(params))]
    for entry in params:
        parts.append(_encode_string(entry.name))
        parts.append(struct.pack("<BB", _ROLE_TO_BYTE[entry.role], entry.array.ndim))
        parts.append(struct.pack(f"<{entry.array.ndim}Q", *entry.array.shape))
        parts.append(entry.array.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def _decode_params_payload(r: _Reader) -> NamedParameterSet:
    count = r.u32()
    entries = []
    for _ in range(count):
        name = r.string()
        role_byte = r.u8()
        if role_byte not in _BYTE_TO_ROLE:
            raise WireFormatError(f"unknown parameter role byte {role_byte}")
        ndim = r.u8()
        dims = tuple(r.u64() for _ in range(ndim))
        n_elem = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if n_elem < 0 or 4 * n_elem > len(r.data):
            raise WireFormatError("tensor length overflow")
        raw = r.take(4 * n_elem)
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        entries.append((name, _BYTE_TO_ROLE[role_byte], arr))
    return NamedParameterSet(entries)


def serialize_params(params: NamedParameterSet) -> bytes:
    """Standalone encoding of a parameter set: magic + version + payload."""
    return MAGIC + struct.pack("<H", VERSION) + encode_params_payload(params)


def deserialize_params(data: bytes) -> NamedParameterSet:
    """Inverse of serialize_params."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise WireFormatError("bad magic")
    version = struct.unpack("<H", r.take(2))[0]
    if version != VERSION:
        raise WireFormatError(f"unsupported version {version}")
    params = _decode_params_payload(r)
    r.done()
    return params


def encode_message(msg: Message) -> bytes:
    """One full frame (header + payload) for a protocol message."""
    if isinstance(msg, InitModel):
        msg_type, payload = MSG_INIT_MODEL, encode_params_payload(msg.params)
    elif isinstance(msg, TrainRequest):
        msg_type = MSG_TRAIN_REQUEST
        payload = struct.pack("<II", msg.round, msg.epochs)
    elif isinstance(msg, WeightUpdate):
        msg_type = MSG_WEIGHT_UPDATE
        payload = (
            struct.pack("<I", msg.round)
            + _encode_string(msg.client_id)
            + struct.pack("<Q", msg.num_examples)
            + encode_params_payload(msg.params)
        )
    elif isinstance(msg, GlobalUpdate):
        msg_type = MSG_GLOBAL_UPDATE
        payload = struct.pack("<I", msg.round) + encode_params_payload(msg.params)
    elif isinstance(msg, Done):
        msg_type, payload = MSG_DONE, b""
    elif isinstance(msg, Metrics):
        msg_type = MSG_METRICS
        payload = (
            struct.pack("<I", msg.round)
            + _encode_string(msg.client_id)
            + struct.pack("<ddd", msg.precision, msg.recall, msg.f1)
            + struct.pack("<QQQ", msg.tp, msg.fp, msg.fn)
        )
    else:
        raise TypeError(f"not a protocol message: {msg!r}")
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def parse_header(header: bytes) -> tuple[int, int]:
    """Validate a frame header; return (msg_type, payload_len)."""
    if len(header) != HEADER.size:
        raise WireFormatError("truncated frame")
    magic, version, msg_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise WireFormatError("bad magic")
    if version != VERSION:
        raise WireFormatError(f"unsupported version {version}")
    if length > MAX_FRAME_PAYLOAD:
        raise WireFormatError(f"payload length overflow ({length} bytes)")
    return msg_type, length


def decode_message(frame: bytes) -> Message:
    """Inverse of encode_message; rejects malformed frames."""
    msg_type, length = parse_header(frame[: HEADER.size])
    payload = frame[HEADER.size :]
    if len(payload) != length:
        raise WireFormatError("truncated frame")
    r = _Reader(payload)
    if msg_type == MSG_INIT_MODEL:
        msg: Message = InitModel(_decode_params_payload(r))
    elif msg_type == MSG_TRAIN_REQUEST:
        msg = TrainRequest(round=r.u32(), epochs=r.u32())
    elif msg_type == MSG_WEIGHT_UPDATE:
        rnd = r.u32()
        client_id = r.string()
        num_examples = r.u64()
        msg = WeightUpdate(rnd, client_id, _decode_params_payload(r), num_examples)
    elif msg_type == MSG_GLOBAL_UPDATE:
        msg = GlobalUpdate(r.u32(), _decode_params_payload(r))
    elif msg_type == MSG_DONE:
        msg = Done()
    elif msg_type == MSG_METRICS:
        rnd = r.u32()
        client_id = r.string()
        precision, recall, f1 = r.f64(), r.f64(), r.f64()
        tp, fp, fn = r.u64(), r.u64(), r.u64()
        msg = Metrics(rnd, client_id, precision, recall, f1, tp, fp, fn)
    else:
        raise WireFormatError(f"unknown message type {msg_type}")
    r.done()
    return msg
