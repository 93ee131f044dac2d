"""Independent implementation of the federation wire format.

This module deliberately shares no code with the server-side package: it is
the external client's own reading of the published byte layout.

Frame: magic "FLSD" | version u16 (= 1) | msg_type u8 | payload_len u64 |
payload, all integers little-endian. Message types: 0 InitModel,
1 TrainRequest, 2 WeightUpdate, 3 GlobalUpdate, 4 Done, 5 Metrics.

A parameter table is: entry_count u32, then per entry
name_len u32 | name utf-8 | role u8 (0 trainable, 1 statistic) | ndim u8 |
dims u64 each | raw float32 data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FLSD"
VERSION = 1
HEADER_FMT = struct.Struct("<4sHBQ")

T_INIT_MODEL = 0
T_TRAIN_REQUEST = 1
T_WEIGHT_UPDATE = 2
T_GLOBAL_UPDATE = 3
T_DONE = 4
T_METRICS = 5

ROLE_NAMES = {0: "trainable", 1: "statistic"}
ROLE_BYTES = {name: byte for byte, name in ROLE_NAMES.items()}


class ProtocolError(ValueError):
    pass


@dataclass
class Entry:
    name: str
    role: str
    array: np.ndarray  # float32


@dataclass
class ParamTable:
    entries: list[Entry] = field(default_factory=list)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def get(self, name: str) -> Entry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(name)


def pack_table(table: ParamTable) -> bytes:
    out = [struct.pack("<I", len(table.entries))]
    for entry in table.entries:
        raw_name = entry.name.encode("utf-8")
        arr = np.ascontiguousarray(entry.array, dtype="<f4")
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<BB", ROLE_BYTES[entry.role], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.at = 0

    def read(self, n: int) -> bytes:
        if self.at + n > len(self.buf):
            raise ProtocolError("truncated payload")
        piece = self.buf[self.at : self.at + n]
        self.at += n
        return piece

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.read(size))


def unpack_table(cursor: _Cursor) -> ParamTable:
    (count,) = cursor.unpack("<I")
    table = ParamTable()
    for _ in range(count):
        (name_len,) = cursor.unpack("<I")
        name = cursor.read(name_len).decode("utf-8")
        role_byte, ndim = cursor.unpack("<BB")
        if role_byte not in ROLE_NAMES:
            raise ProtocolError(f"unknown role byte {role_byte}")
        dims = cursor.unpack(f"<{ndim}Q") if ndim else ()
        count_elem = 1
        for d in dims:
            count_elem *= d
        data = np.frombuffer(cursor.read(4 * count_elem), dtype="<f4")
        table.entries.append(Entry(name, ROLE_NAMES[role_byte], data.reshape(dims).copy()))
    return table


# Message values are plain dicts tagged with "type".


def encode(msg: dict) -> bytes:
    kind = msg["type"]
    if kind == "init_model":
        body = pack_table(msg["params"])
        tag = T_INIT_MODEL
    elif kind == "train_request":
        body = struct.pack("<II", msg["round"], msg["epochs"])
        tag = T_TRAIN_REQUEST
    elif kind == "weight_update":
        raw_id = msg["client_id"].encode("utf-8")
        body = (
            struct.pack("<I", msg["round"])
            + struct.pack("<I", len(raw_id))
            + raw_id
            + struct.pack("<Q", msg["num_examples"])
            + pack_table(msg["params"])
        )
        tag = T_WEIGHT_UPDATE
    elif kind == "global_update":
        body = struct.pack("<I", msg["round"]) + pack_table(msg["params"])
        tag = T_GLOBAL_UPDATE
    elif kind == "done":
        body = b""
        tag = T_DONE
    elif kind == "metrics":
        raw_id = msg["client_id"].encode("utf-8")
        body = (
            struct.pack("<I", msg["round"])
            + struct.pack("<I", len(raw_id))
            + raw_id
            + struct.pack("<ddd", msg["precision"], msg["recall"], msg["f1"])
            + struct.pack("<QQQ", msg["tp"], msg["fp"], msg["fn"])
        )
        tag = T_METRICS
    else:
        raise ProtocolError(f"cannot encode message type {kind!r}")
    return HEADER_FMT.pack(MAGIC, VERSION, tag, len(body)) + body


def decode(frame: bytes) -> dict:
    if len(frame) < HEADER_FMT.size:
        raise ProtocolError("truncated frame")
    magic, version, tag, length = HEADER_FMT.unpack(frame[: HEADER_FMT.size])
    if magic != MAGIC:
        raise ProtocolError("bad magic")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    body = frame[HEADER_FMT.size :]
    if len(body) != length:
        raise ProtocolError("length mismatch")
    cursor = _Cursor(body)
    if tag == T_INIT_MODEL:
        msg = {"type": "init_model", "params": unpack_table(cursor)}
    elif tag == T_TRAIN_REQUEST:
        rnd, epochs = cursor.unpack("<II")
        msg = {"type": "train_request", "round": rnd, "epochs": epochs}
    elif tag == T_WEIGHT_UPDATE:
        (rnd,) = cursor.unpack("<I")
        (id_len,) = cursor.unpack("<I")
        client_id = cursor.read(id_len).decode("utf-8")
        (num_examples,) = cursor.unpack("<Q")
        msg = {
            "type": "weight_update",
            "round": rnd,
            "client_id": client_id,
            "num_examples": num_examples,
            "params": unpack_table(cursor),
        }
    elif tag == T_GLOBAL_UPDATE:
        (rnd,) = cursor.unpack("<I")
        msg = {"type": "global_update", "round": rnd, "params": unpack_table(cursor)}
    elif tag == T_DONE:
        msg = {"type": "done"}
    elif tag == T_METRICS:
        (rnd,) = cursor.unpack("<I")
        (id_len,) = cursor.unpack("<I")
        client_id = cursor.read(id_len).decode("utf-8")
        precision, recall, f1 = cursor.unpack("<ddd")
        tp, fp, fn = cursor.unpack("<QQQ")
        msg = {
            "type": "metrics",
            "round": rnd,
            "client_id": client_id,
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "tp": tp,
            "fp": fp,
            "fn": fn,
        }
    else:
        raise ProtocolError(f"unknown message tag {tag}")
    if cursor.at != len(body):
        raise ProtocolError("trailing bytes in payload")
    return msg


def send_message(sock, msg: dict) -> None:
    sock.sendall(encode(msg))


def recv_exact(sock, n: int) -> bytes:
    chunks = []
    while n:
        piece = sock.recv(n)
        if not piece:
            raise ProtocolError("connection closed")
        chunks.append(piece)
        n -= len(piece)
    return b"".join(chunks)


def recv_message(sock) -> dict:
    header = recv_exact(sock, HEADER_FMT.size)
    magic, version, _tag, length = HEADER_FMT.unpack(header)
    if magic != MAGIC:
        raise ProtocolError("bad magic")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if length > (1 << 30):
        raise ProtocolError("oversized frame")
    return decode(header + recv_exact(sock, length))
