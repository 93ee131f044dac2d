"""Toy grid detector trained with Adam on a multi-task loss.

The model splits a grayscale image into G x G cells and predicts, per cell,
a presence probability and a box encoded relative to the cell. It has the
same coarse anatomy as a full detection network:

* a "backbone" of dense layers shared across cells (the first layer is a
  stride-S patch embedding, i.e. an S x S convolution) ending in a batch
  normalization layer with running mean/variance, then tanh;
* a "head" of dense layers emitting 5 values per cell: one presence logit
  and four box offsets (t_cx, t_cy, t_w, t_h).

Boxes decode as center = cell_center + (t_cx, t_cy) * S and size =
exp(t_w, t_h) * S, which keeps widths positive. A ground-truth box is
assigned to the cell containing its center (first box wins on collisions).

The loss is cross-entropy on presence summed over cells plus
``reg_weight`` times a smooth-L1 penalty on the offsets of positive cells,
averaged over the batch. Gradients are computed analytically by backprop,
including through the train-mode batch statistics, and are exercised against
central finite differences in the test suite.

Parameter naming contract (what aggregation filter rules target)::

    backbone.l<k>.w / backbone.l<k>.b      dense backbone layers
    backbone.norm.w / backbone.norm.b      normalization scale / shift
    backbone.norm.running_mean / _var      role=statistic
    head.l<k>.w / head.l<k>.b, head.out.w / head.out.b
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import Box, MetricsReport, Prediction, compute_metrics, match
from .params import ROLE_STATISTIC, ROLE_TRAINABLE, NamedParameterSet, check_same_schema

# Normalization epsilon. Deliberately larger than the deep-learning-framework
# default: it bounds 1/std even when a feature's batch variance collapses,
# which keeps training stable on tiny batches and keeps the loss surface
# well-conditioned for finite-difference gradient verification.
BN_EPS = 1e-3


@dataclass(frozen=True)
class ToyDetectorConfig:
    image_size: tuple[int, int] = (32, 32)
    grid: int = 4
    backbone_widths: tuple[int, ...] = (32, 32)
    head_widths: tuple[int, ...] = (32,)
    norm_momentum: float = 0.1
    reg_weight: float = 1.0

    def __post_init__(self):
        h, w = self.image_size
        if h % self.grid or w % self.grid:
            raise ValueError(f"grid {self.grid} must divide image size {self.image_size}")
        if h != w:
            raise ValueError("only square images are supported")
        if not all(d > 0 for d in self.backbone_widths + self.head_widths):
            raise ValueError("layer widths must be positive")
        if not 0 < self.norm_momentum <= 1:
            raise ValueError("norm_momentum must be in (0, 1]")
        if self.reg_weight <= 0:
            raise ValueError("reg_weight must be positive")

    @property
    def cell(self) -> int:
        return self.image_size[0] // self.grid

    @property
    def patch_dim(self) -> int:
        return self.cell * self.cell


def init_params(config: ToyDetectorConfig, rng: np.random.Generator) -> NamedParameterSet:
    """Seeded initialization: U(-0.05, 0.05) dense weights, zero biases,
    unit normalization scale, running mean 0 / variance 1."""
    entries: list[tuple[str, str, np.ndarray]] = []

    def dense(prefix: str, fan_in: int, fan_out: int, bias: bool = True) -> int:
        w = rng.uniform(-0.05, 0.05, size=(fan_in, fan_out)).astype(np.float32)
        entries.append((f"{prefix}.w", ROLE_TRAINABLE, w))
        if bias:
            entries.append((f"{prefix}.b", ROLE_TRAINABLE, np.zeros(fan_out, np.float32)))
        return fan_out

    dim = config.patch_dim
    n_backbone = len(config.backbone_widths)
    for k, width in enumerate(config.backbone_widths, start=1):
        # The layer feeding the norm has no bias: the batch centering would
        # cancel it exactly (and its gradient), as the norm shift replaces it.
        dim = dense(f"backbone.l{k}", dim, width, bias=k < n_backbone)
    entries.append(("backbone.norm.w", ROLE_TRAINABLE, np.ones(dim, np.float32)))
    entries.append(("backbone.norm.b", ROLE_TRAINABLE, np.zeros(dim, np.float32)))
    entries.append(("backbone.norm.running_mean", ROLE_STATISTIC, np.zeros(dim, np.float32)))
    entries.append(("backbone.norm.running_var", ROLE_STATISTIC, np.ones(dim, np.float32)))
    for k, width in enumerate(config.head_widths, start=1):
        dim = dense(f"head.l{k}", dim, width)
    dense("head.out", dim, 5)
    return NamedParameterSet(entries)


def _extract_patches(images: np.ndarray, config: ToyDetectorConfig) -> np.ndarray:
    """(B, H, W) -> (B * G * G, S * S), cells in row-major order."""
    b = images.shape[0]
    g, s = config.grid, config.cell
    if images.shape[1:] != config.image_size:
        raise ValueError(f"expected images of size {config.image_size}, got {images.shape[1:]}")
    patches = images.reshape(b, g, s, g, s).transpose(0, 1, 3, 2, 4)
    return patches.reshape(b * g * g, s * s)


def _forward(params, images, config: ToyDetectorConfig, train: bool):
    """Shared forward pass; returns logits/offsets plus the backprop cache."""
    x = _extract_patches(images, config)
    cache = {"acts": [x]}
    h = x
    last = len(config.backbone_widths)
    for k in range(1, last + 1):
        z = h @ params[f"backbone.l{k}.w"]
        if k < last:
            h = np.tanh(z + params[f"backbone.l{k}.b"])
        else:
            h = z  # no bias before the norm layer
        cache["acts"].append(h)
    pre_norm = h

    if train:
        mean = pre_norm.mean(axis=0)
        var = pre_norm.var(axis=0)  # biased, matching the backward pass
    else:
        mean = params["backbone.norm.running_mean"]
        var = params["backbone.norm.running_var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    normed = (pre_norm - mean) * inv_std
    scaled = params["backbone.norm.w"] * normed + params["backbone.norm.b"]
    feat = np.tanh(scaled)
    cache.update(pre_norm=pre_norm, normed=normed, inv_std=inv_std, feat=feat, train=train)

    h = feat
    head_acts = [feat]
    for k in range(1, len(config.head_widths) + 1):
        h = np.tanh(h @ params[f"head.l{k}.w"] + params[f"head.l{k}.b"])
        head_acts.append(h)
    out = h @ params["head.out.w"] + params["head.out.b"]
    cache["head_acts"] = head_acts

    b = images.shape[0]
    g = config.grid
    out = out.reshape(b, g, g, 5)
    return out[..., 0], out[..., 1:], cache, (mean, var)


def forward(
    state: "ToyTrainer | NamedParameterSet",
    images: np.ndarray,
    config: ToyDetectorConfig | None = None,
    train: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell presence probabilities and box offsets.

    ``images`` is (H, W) or (B, H, W) with pixel values in [0, 1]. In eval
    mode (default) the normalization layer uses running statistics, so the
    output for one image does not depend on the rest of the batch.
    """
    if isinstance(state, ToyTrainer):
        params, config = state.param_dict(), state.config
    else:
        if config is None:
            raise ValueError("config is required when passing a bare parameter set")
        params = {e.name: e.array for e in state}
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    logits, offsets, _, stats = _forward(params, images, config, train=train)
    if train and isinstance(state, ToyTrainer):
        state.update_running_stats(*stats)
    probs = _sigmoid(logits)
    if single:
        return probs[0], offsets[0]
    return probs, offsets


def predict(
    state: "ToyTrainer | NamedParameterSet",
    image: np.ndarray,
    confidence_threshold: float = 0.5,
    config: ToyDetectorConfig | None = None,
) -> list[Prediction]:
    """Eval-mode forward of one image decoded to confidence-sorted boxes."""
    probs, offsets = forward(state, np.asarray(image), config=config, train=False)
    cfg = state.config if isinstance(state, ToyTrainer) else config
    return decode_predictions(probs, offsets, cfg, confidence_threshold)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def encode_targets(
    boxes: list[Box], config: ToyDetectorConfig, dtype=np.float32
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth presence map (G, G) and offset targets (G, G, 4).

    Each box is assigned to the cell containing its center; if two boxes
    share a cell the first wins. Offsets follow the decode convention above.
    """
    g, s = config.grid, config.cell
    presence = np.zeros((g, g), dtype)
    offsets = np.zeros((g, g, 4), dtype)
    for x0, y0, x1, y1 in boxes:
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        col = min(max(int(cx // s), 0), g - 1)
        row = min(max(int(cy // s), 0), g - 1)
        if presence[row, col]:
            continue
        presence[row, col] = 1.0
        offsets[row, col] = (
            (cx - (col + 0.5) * s) / s,
            (cy - (row + 0.5) * s) / s,
            math.log((x1 - x0) / s),
            math.log((y1 - y0) / s),
        )
    return presence, offsets


def _smooth_l1(r: np.ndarray) -> np.ndarray:
    a = np.abs(r)
    return np.where(a < 1.0, 0.5 * r * r, a - 0.5)


def loss(
    probs: np.ndarray,
    offsets: np.ndarray,
    boxes_per_image: list[list[Box]],
    config: ToyDetectorConfig,
    reg_weight: float | None = None,
) -> float:
    """Multi-task loss from predicted probabilities and offsets.

    Per image: cross-entropy on presence summed over all cells, plus
    ``reg_weight`` times smooth-L1 on the four offsets of each positive
    cell. The batch value is the mean over images. Zero exactly when
    presence probabilities are perfect and positive-cell boxes are exact.
    """
    if reg_weight is None:
        reg_weight = config.reg_weight
    probs = np.asarray(probs, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    if probs.ndim == 2:
        probs, offsets = probs[None], offsets[None]
        if not boxes_per_image:
            boxes_per_image = [[]]
        elif np.isscalar(boxes_per_image[0][0]):
            # A bare list of boxes for the single image.
            boxes_per_image = [boxes_per_image]  # type: ignore[list-item]
    total = 0.0
    for i, boxes in enumerate(boxes_per_image):
        presence, target = encode_targets(boxes, config, dtype=np.float64)
        p = probs[i]
        with np.errstate(divide="ignore"):
            ce = np.where(presence > 0.5, -np.log(p), -np.log1p(-p))
        residual = (offsets[i] - target)[presence > 0.5]
        total += ce.sum() + reg_weight * _smooth_l1(residual).sum()
    return float(total / len(boxes_per_image))


def loss_and_grads(
    params: dict[str, np.ndarray],
    images: np.ndarray,
    boxes_per_image: list[list[Box]],
    config: ToyDetectorConfig,
    reg_weight: float | None = None,
):
    """Train-mode loss, analytic gradients, and batch statistics.

    Pure: the running statistics in ``params`` are read but never written
    (train mode normalizes with batch statistics). Works in whatever float
    dtype ``params`` carries, which lets the gradient check run in float64.
    """
    if reg_weight is None:
        reg_weight = config.reg_weight
    dtype = params["backbone.norm.w"].dtype
    images = np.asarray(images, dtype=dtype)
    b = images.shape[0]
    g = config.grid

    logits, offsets, cache, (mean, var) = _forward(params, images, config, train=True)

    presence = np.stack(
        [encode_targets(bx, config, dtype=dtype)[0] for bx in boxes_per_image]
    )
    target = np.stack(
        [encode_targets(bx, config, dtype=dtype)[1] for bx in boxes_per_image]
    )

    # Stable cross-entropy from logits: max(z,0) - z*y + log(1 + exp(-|z|)).
    ce = np.maximum(logits, 0) - logits * presence + np.log1p(np.exp(-np.abs(logits)))
    residual = np.where(presence[..., None] > 0.5, offsets - target, 0.0)
    value = float((ce.sum() + reg_weight * _smooth_l1(residual).sum()) / b)

    d_logits = (_sigmoid(logits) - presence) / b
    d_offsets = np.where(
        presence[..., None] > 0.5, np.clip(residual, -1.0, 1.0), 0.0
    ) * (reg_weight / b)
    d_out = np.concatenate([d_logits[..., None], d_offsets], axis=-1)
    d_out = d_out.reshape(b * g * g, 5).astype(dtype)

    grads: dict[str, np.ndarray] = {}

    # Head backward.
    head_acts = cache["head_acts"]
    d_h = d_out
    grads["head.out.w"] = head_acts[-1].T @ d_h
    grads["head.out.b"] = d_h.sum(axis=0)
    d_h = d_h @ params["head.out.w"].T
    for k in range(len(config.head_widths), 0, -1):
        d_z = d_h * (1.0 - head_acts[k] ** 2)
        grads[f"head.l{k}.w"] = head_acts[k - 1].T @ d_z
        grads[f"head.l{k}.b"] = d_z.sum(axis=0)
        d_h = d_z @ params[f"head.l{k}.w"].T

    # Normalization backward (through batch statistics).
    d_scaled = d_h * (1.0 - cache["feat"] ** 2)
    normed = cache["normed"]
    grads["backbone.norm.w"] = (d_scaled * normed).sum(axis=0)
    grads["backbone.norm.b"] = d_scaled.sum(axis=0)
    d_normed = d_scaled * params["backbone.norm.w"]
    n = normed.shape[0]
    d_pre = (
        cache["inv_std"]
        / n
        * (
            n * d_normed
            - d_normed.sum(axis=0)
            - normed * (d_normed * normed).sum(axis=0)
        )
    )

    # Backbone backward.
    acts = cache["acts"]
    d_h = d_pre
    last = len(config.backbone_widths)
    for k in range(last, 0, -1):
        d_z = d_h if k == last else d_h * (1.0 - acts[k] ** 2)
        grads[f"backbone.l{k}.w"] = acts[k - 1].T @ d_z
        if k < last:
            grads[f"backbone.l{k}.b"] = d_z.sum(axis=0)
        if k > 1:
            d_h = d_z @ params[f"backbone.l{k}.w"].T

    return value, grads, (mean, var)


def decode_predictions(
    probs: np.ndarray,
    offsets: np.ndarray,
    config: ToyDetectorConfig,
    confidence_threshold: float = 0.5,
) -> list[Prediction]:
    """Cells at or above the threshold, decoded to in-bounds pixel boxes,
    sorted by confidence descending."""
    h, w = config.image_size
    s = config.cell
    preds = []
    rows, cols = np.nonzero(probs >= confidence_threshold)
    for row, col in zip(rows, cols):
        t_cx, t_cy, t_w, t_h = (float(v) for v in offsets[row, col])
        cx = np.clip((col + 0.5) * s + t_cx * s, 0.5, w - 0.5)
        cy = np.clip((row + 0.5) * s + t_cy * s, 0.5, h - 0.5)
        bw = np.clip(math.exp(t_w) * s, 1.0, 2.0 * w)
        bh = np.clip(math.exp(t_h) * s, 1.0, 2.0 * h)
        box = (
            float(max(0.0, cx - bw / 2)),
            float(max(0.0, cy - bh / 2)),
            float(min(w, cx + bw / 2)),
            float(min(h, cy + bh / 2)),
        )
        preds.append(Prediction(box=box, confidence=float(probs[row, col])))
    preds.sort(key=lambda p: -p.confidence)
    return preds


def flip_sample(image: np.ndarray, boxes: list[Box]) -> tuple[np.ndarray, list[Box]]:
    """Horizontal flip of an image (..., H, W) and its boxes."""
    w = image.shape[-1]
    flipped = np.ascontiguousarray(image[..., ::-1])
    return flipped, [(w - x1, y0, w - x0, y1) for x0, y0, x1, y1 in boxes]


def mirror_outputs(probs: np.ndarray, offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell outputs of the horizontally flipped image: mirror the cell
    columns and negate the x-center offset."""
    probs_m = np.ascontiguousarray(probs[..., ::-1])
    offsets_m = np.ascontiguousarray(offsets[..., ::-1, :])
    offsets_m[..., 0] = -offsets_m[..., 0]
    return probs_m, offsets_m


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class ToyTrainer:
    """Mutable training state for one client: parameters, Adam moments, RNG.

    Statistic-role tensors (the normalization running mean/variance) are
    updated only by the running-average rule during train-mode forwards,
    never by gradient steps.
    """

    def __init__(self, config: ToyDetectorConfig, seed: int | np.random.SeedSequence = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        init = init_params(config, self.rng)
        self._order = init.names()
        self._roles = {e.name: e.role for e in init}
        self._values = {e.name: e.array.copy() for e in init}
        self.adam = AdamState()
        self.epochs_log: list[int] = []

    # -- parameter exchange ------------------------------------------------

    def get_params(self) -> NamedParameterSet:
        return NamedParameterSet(
            (name, self._roles[name], self._values[name]) for name in self._order
        )

    def set_params(self, params: NamedParameterSet) -> None:
        check_same_schema(self.get_params(), params)
        for entry in params:
            self._values[entry.name] = entry.array.copy()

    def param_dict(self) -> dict[str, np.ndarray]:
        return dict(self._values)

    # -- training ----------------------------------------------------------

    def train_epochs(
        self,
        samples: list,
        epochs: int,
        batch_size: int = 16,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        augment: bool = True,
    ) -> None:
        """Adam training with horizontal-flip augmentation (p = 0.5).

        Runs epochs * ceil(len(samples) / batch_size) optimizer steps;
        epochs=0 leaves the state bitwise unchanged.
        """
        if epochs == 0:
            return
        if not samples:
            raise ValueError("empty dataset")
        n = len(samples)
        for _ in range(epochs):
            perm = self.rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = [samples[i] for i in perm[start : start + batch_size]]
                images, boxes_list = [], []
                for sample in batch:
                    image, boxes = sample.image[0], list(sample.boxes)
                    if augment and self.rng.random() < 0.5:
                        image, boxes = flip_sample(image, boxes)
                    images.append(image)
                    boxes_list.append(boxes)
                _, grads, (mean, var) = loss_and_grads(
                    self._values, np.stack(images), boxes_list, self.config
                )
                self.update_running_stats(mean, var)
                self.apply_gradients(grads, lr, beta1, beta2, eps)
        self.epochs_log.append(epochs)

    def update_running_stats(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        """running' = (1 - momentum) * running + momentum * batch statistic."""
        momentum = self.config.norm_momentum
        for name, stat in (
            ("backbone.norm.running_mean", batch_mean),
            ("backbone.norm.running_var", batch_var),
        ):
            self._values[name] = (
                (1.0 - momentum) * self._values[name] + momentum * stat
            ).astype(np.float32)

    def apply_gradients(
        self, grads, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8
    ) -> None:
        """One bias-corrected Adam step on the trainable tensors."""
        self.adam.step += 1
        t = self.adam.step
        for name, grad in grads.items():
            grad = grad.astype(np.float32)
            if name not in self.adam.m:
                self.adam.m[name] = np.zeros_like(grad)
                self.adam.v[name] = np.zeros_like(grad)
            m = self.adam.m[name] = beta1 * self.adam.m[name] + (1 - beta1) * grad
            v = self.adam.v[name] = beta2 * self.adam.v[name] + (1 - beta2) * grad**2
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            self._values[name] = (
                self._values[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
            ).astype(np.float32)

    # -- inference ---------------------------------------------------------

    def predict(self, image: np.ndarray, confidence_threshold: float = 0.5) -> list[Prediction]:
        probs, offsets = forward(self, np.asarray(image), train=False)
        return decode_predictions(probs, offsets, self.config, confidence_threshold)

    def evaluate(
        self,
        samples: list,
        confidence_threshold: float = 0.5,
        iou_threshold: float = 0.5,
    ) -> MetricsReport:
        """Precision/recall/F1 over a test set (eval-mode forward)."""
        images = np.stack([s.image[0] for s in samples])
        probs, offsets = forward(self, images, train=False)
        results = [
            match(
                decode_predictions(probs[i], offsets[i], self.config, confidence_threshold),
                list(samples[i].boxes),
                iou_threshold,
            )
            for i in range(len(samples))
        ]
        return compute_metrics(results)
