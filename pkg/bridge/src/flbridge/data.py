"""Reader for the binary dataset files the server-side tooling exports.

File layout (little-endian):
  magic "FLDS" | version u16 = 1 | id_len u32 | client_id utf-8
  | n_train u32 | n_test u32 | samples (train then test)
Sample:
  pid_len u32 | patient_id | ndim u8 | dims u64 each | float32 pixels
  | n_boxes u32 | per box 4 x f32 (x_min, y_min, x_max, y_max)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"FLDS"
VERSION = 1


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32
    boxes: list[tuple[float, float, float, float]]
    patient_id: str


@dataclass
class Dataset:
    client_id: str
    train: list[Sample]
    test: list[Sample]


class DatasetFormatError(ValueError):
    pass


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    at = 0

    def read(n: int) -> bytes:
        nonlocal at
        if at + n > len(buf):
            raise DatasetFormatError("truncated dataset file")
        piece = buf[at : at + n]
        at += n
        return piece

    def unpack(fmt: str):
        return struct.unpack(fmt, read(struct.calcsize(fmt)))

    if read(4) != MAGIC:
        raise DatasetFormatError("bad magic")
    (version,) = unpack("<H")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    (id_len,) = unpack("<I")
    client_id = read(id_len).decode("utf-8")
    n_train, n_test = unpack("<II")

    def read_sample() -> Sample:
        (pid_len,) = unpack("<I")
        patient_id = read(pid_len).decode("utf-8")
        (ndim,) = unpack("<B")
        dims = unpack(f"<{ndim}Q") if ndim else ()
        count = 1
        for d in dims:
            count *= d
        image = np.frombuffer(read(4 * count), dtype="<f4").reshape(dims).copy()
        (n_boxes,) = unpack("<I")
        boxes = [unpack("<4f") for _ in range(n_boxes)]
        return Sample(image=image, boxes=[tuple(map(float, b)) for b in boxes],
                      patient_id=patient_id)

    train = [read_sample() for _ in range(n_train)]
    test = [read_sample() for _ in range(n_test)]
    if at != len(buf):
        raise DatasetFormatError("trailing bytes in dataset file")
    return Dataset(client_id=client_id, train=train, test=test)
