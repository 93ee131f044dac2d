"""Deterministic synthetic detection datasets for two heterogeneous clients.

Each image is a noisy grayscale canvas with one bright curvilinear "vessel"
stroke and one or more darker elliptical "stenosis" blobs; every blob is
centered in a ground-truth box. The two default client profiles rebuild the
structural heterogeneity of a two-institution setting at desk scale:

* client1 — small (~120 images from 30 patients), darker intensity
  distribution, 1-4 boxes per image, independent key frames;
* client2 — large (~720 images from 80 patients), brighter distribution,
  exactly one box per image, frames generated in short per-patient sequences
  with correlated geometry (lower intra-client variability).

Generation is a pure function of (profile, seed). Train/test splits are
grouped by patient: a patient's images never straddle the split. The number
of test patients is round(test_fraction * n_patients); which patients go to
test is chosen to keep the image-level test fraction as close to
test_fraction as the grouping allows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import WireFormatError
from .metrics import Box

DATASET_MAGIC = b"FLDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class ClientProfile:
    client_id: str
    n_patients: int
    images_per_patient: tuple[int, int]  # inclusive uniform range
    intensity_mean: float
    intensity_std: float
    max_boxes_per_image: int = 1
    test_fraction: float = 0.1
    correlated_frames: bool = False
    image_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")
        if self.max_boxes_per_image < 1:
            raise ValueError("max_boxes_per_image must be >= 1")
        lo, hi = self.images_per_patient
        if not 1 <= lo <= hi:
            raise ValueError("images_per_patient must be a non-empty range")
        if self.n_patients < 2:
            raise ValueError("need at least two patients to split")


@dataclass(frozen=True)
class DetectionSample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    boxes: tuple[Box, ...]
    patient_id: str


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[DetectionSample, ...]
    test: tuple[DetectionSample, ...]

    def patient_ids(self, part: str) -> set[str]:
        return {s.patient_id for s in getattr(self, part)}


def default_profiles() -> tuple[ClientProfile, ClientProfile]:
    """The two built-in client profiles (~1:6 image ratio, shifted intensity)."""
    client1 = ClientProfile(
        client_id="client1",
        n_patients=30,
        images_per_patient=(3, 5),
        intensity_mean=0.35,
        intensity_std=0.12,
        max_boxes_per_image=4,
        correlated_frames=False,
    )
    client2 = ClientProfile(
        client_id="client2",
        n_patients=80,
        images_per_patient=(8, 10),
        intensity_mean=0.55,
        intensity_std=0.08,
        max_boxes_per_image=1,
        correlated_frames=True,
    )
    return client1, client2


# -- image synthesis --------------------------------------------------------

_VESSEL_GAIN = 0.35
_VESSEL_SIGMA = 1.3
_BLOB_GAIN = 0.45
_CENTER_MARGIN = 5.0
_MIN_CENTER_DIST = 10.0
# Box half-sizes: boxes span 7-11 px so an IoU of 0.5 tolerates roughly a
# pixel of localization error, which a 32x32 toy detector can reach.
_HALF_SIZE_RANGE = (3.5, 5.5)


def _sample_geometry(rng: np.random.Generator, profile: ClientProfile) -> dict:
    """Vessel endpoints, stenosis centers, and box half-sizes for one image."""
    h, w = profile.image_size
    n_boxes = int(rng.integers(1, profile.max_boxes_per_image + 1))
    centers: list[tuple[float, float]] = []
    for _ in range(64):
        if len(centers) == n_boxes:
            break
        cand = rng.uniform(_CENTER_MARGIN, (w - _CENTER_MARGIN, h - _CENTER_MARGIN))
        if all(np.hypot(cand[0] - x, cand[1] - y) >= _MIN_CENTER_DIST for x, y in centers):
            centers.append((float(cand[0]), float(cand[1])))
    half_sizes = rng.uniform(*_HALF_SIZE_RANGE, size=(len(centers), 2))
    # Vessel enters and leaves at image borders, passing near every center.
    sides = rng.permutation(4)[:2]
    ends = []
    for side in sides:
        t = rng.uniform(0.15, 0.85)
        ends.append(
            [(t * w, 0.0), (t * w, h - 1.0), (0.0, t * h), (w - 1.0, t * h)][side]
        )
    return {
        "start": np.array(ends[0]),
        "end": np.array(ends[1]),
        "centers": np.array(centers),
        "half_sizes": half_sizes,
    }


def _jitter_geometry(geo: dict, rng: np.random.Generator, scale: float = 0.5) -> dict:
    out = {}
    for key, value in geo.items():
        arr = np.asarray(value, dtype=np.float64)
        out[key] = arr + rng.normal(0.0, scale, size=arr.shape)
    return out


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each pixel center to segment a-b."""
    d = b - a
    length_sq = float(d @ d)
    if length_sq == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / length_sq, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def _render(geo: dict, profile: ClientProfile, rng: np.random.Generator) -> tuple[np.ndarray, tuple[Box, ...]]:
    h, w = profile.image_size
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs + 0.5, ys + 0.5

    canvas = rng.normal(profile.intensity_mean, profile.intensity_std, size=(h, w))
    canvas += rng.normal(0.0, 0.02)  # per-frame exposure jitter

    # Polyline through the stenosis centers, ordered along the vessel axis.
    start, end = geo["start"], geo["end"]
    centers = np.atleast_2d(geo["centers"])
    axis = end - start
    order = np.argsort(centers @ axis) if len(centers) else []
    waypoints = [start, *centers[order], end]
    dist = np.full((h, w), np.inf)
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        dist = np.minimum(dist, _segment_distance(px, py, np.asarray(a), np.asarray(b)))
    canvas += _VESSEL_GAIN * np.exp(-(dist**2) / (2 * _VESSEL_SIGMA**2))

    boxes = []
    for (cx, cy), (hx, hy) in zip(centers, geo["half_sizes"]):
        hx, hy = max(float(hx), 1.5), max(float(hy), 1.5)
        ellipse = ((px - cx) / (0.75 * hx)) ** 2 + ((py - cy) / (0.75 * hy)) ** 2
        canvas -= _BLOB_GAIN * np.exp(-ellipse)
        # Coordinates are rounded to float32 so the binary export is lossless.
        boxes.append(
            (
                float(np.float32(max(0.0, cx - hx))),
                float(np.float32(max(0.0, cy - hy))),
                float(np.float32(min(w, cx + hx))),
                float(np.float32(min(h, cy + hy))),
            )
        )
    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)[None]
    return image, tuple(boxes)


# -- dataset assembly -------------------------------------------------------

def _balanced_patient_split(
    counts: list[int], test_fraction: float, rng: np.random.Generator
) -> set[int]:
    """Choose round(f * n_patients) patients whose image total best matches f."""
    n = len(counts)
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    target = test_fraction * sum(counts)
    order = list(rng.permutation(n))
    test = set(order[:n_test])
    improved = True
    while improved:
        improved = False
        current = sum(counts[i] for i in test)
        best_swap, best_err = None, abs(current - target)
        for i in sorted(test):
            for j in sorted(set(range(n)) - test):
                err = abs(current - counts[i] + counts[j] - target)
                if err < best_err - 1e-9:
                    best_swap, best_err = (i, j), err
        if best_swap:
            i, j = best_swap
            test.remove(i)
            test.add(j)
            improved = True
    return test


def generate(profile: ClientProfile, seed) -> SplitDataset:
    """Deterministic synthetic dataset for one client profile."""
    rng = np.random.default_rng(seed)
    counts = [
        int(rng.integers(profile.images_per_patient[0], profile.images_per_patient[1] + 1))
        for _ in range(profile.n_patients)
    ]
    samples_per_patient: list[list[DetectionSample]] = []
    for p, n_images in enumerate(counts):
        patient_id = f"{profile.client_id}_p{p:03d}"
        samples = []
        base = _sample_geometry(rng, profile) if profile.correlated_frames else None
        for _ in range(n_images):
            geo = (
                _jitter_geometry(base, rng)
                if base is not None
                else _sample_geometry(rng, profile)
            )
            image, boxes = _render(geo, profile, rng)
            samples.append(DetectionSample(image=image, boxes=boxes, patient_id=patient_id))
        samples_per_patient.append(samples)

    test_patients = _balanced_patient_split(counts, profile.test_fraction, rng)
    train, test = [], []
    for p, samples in enumerate(samples_per_patient):
        (test if p in test_patients else train).extend(samples)
    return SplitDataset(train=tuple(train), test=tuple(test))


def intensity_histogram(samples, n_bins: int = 32) -> np.ndarray:
    """Normalized pixel-intensity histogram over [0, 1]; bins sum to 1."""
    if isinstance(samples, SplitDataset):
        samples = list(samples.train) + list(samples.test)
    if not samples:
        raise ValueError("empty dataset")
    pixels = np.concatenate([s.image.ravel() for s in samples])
    hist, _ = np.histogram(pixels, bins=n_bins, range=(0.0, 1.0))
    return hist / hist.sum()


def ks_distance(hist_a: np.ndarray, hist_b: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between two normalized histograms."""
    return float(np.max(np.abs(np.cumsum(hist_a) - np.cumsum(hist_b))))


# -- binary export (consumed by external trainers) --------------------------
#
# File layout, little-endian, tensor encoding identical to the wire format:
#   magic "FLDS" | version u16 | id_len u32 | client_id utf-8
#   | n_train u32 | n_test u32 | samples (train then test)
# Sample:
#   pid_len u32 | patient_id utf-8 | ndim u8 | dims u64 each | f32 pixels
#   | n_boxes u32 | per box: 4 x f32 (x_min, y_min, x_max, y_max)


def _encode_sample(sample: DetectionSample) -> bytes:
    raw_pid = sample.patient_id.encode("utf-8")
    parts = [struct.pack("<I", len(raw_pid)), raw_pid]
    arr = sample.image
    parts.append(struct.pack("<B", arr.ndim))
    parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    parts.append(arr.astype("<f4", copy=False).tobytes())
    parts.append(struct.pack("<I", len(sample.boxes)))
    for box in sample.boxes:
        parts.append(struct.pack("<4f", *box))
    return b"".join(parts)


def save_dataset(dataset: SplitDataset, client_id: str, path) -> None:
    parts = [DATASET_MAGIC, struct.pack("<H", DATASET_VERSION)]
    raw_id = client_id.encode("utf-8")
    parts.append(struct.pack("<I", len(raw_id)))
    parts.append(raw_id)
    parts.append(struct.pack("<II", len(dataset.train), len(dataset.test)))
    for sample in (*dataset.train, *dataset.test):
        parts.append(_encode_sample(sample))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dataset(path) -> tuple[str, SplitDataset]:
    from .wire import _Reader  # same sequential-parse helper

    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != DATASET_MAGIC:
        raise WireFormatError("bad magic")
    version = struct.unpack("<H", r.take(2))[0]
    if version != DATASET_VERSION:
        raise WireFormatError(f"unsupported dataset version {version}")
    client_id = r.string()
    n_train, n_test = r.u32(), r.u32()

    def read_sample() -> DetectionSample:
        patient_id = r.string()
        ndim = r.u8()
        dims = tuple(r.u64() for _ in range(ndim))
        n_elem = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        image = np.frombuffer(r.take(4 * n_elem), dtype="<f4").reshape(dims).copy()
        n_boxes = r.u32()
        boxes = tuple(struct.unpack("<4f", r.take(16)) for _ in range(n_boxes))
        return DetectionSample(image=image, boxes=boxes, patient_id=patient_id)

    train = tuple(read_sample() for _ in range(n_train))
    test = tuple(read_sample() for _ in range(n_test))
    r.done()
    return client_id, SplitDataset(train=train, test=test)


def scaled_profile(profile: ClientProfile, patient_scale: float) -> ClientProfile:
    """Smaller/larger copy of a profile, keeping at least two patients."""
    return replace(profile, n_patients=max(2, int(round(profile.n_patients * patient_scale))))
