"""A small convolutional grid detector in PyTorch, shaped for the federation.

The network mirrors the federation's published parameter schema so the
server's aggregated tensors drop straight into it: a stride-P patch
convolution (expressed as unfold + matmul so its weight keeps the wire
shape (P*P, width)), a second mixing layer without bias, batch
normalization with running statistics, and a two-layer head emitting a
presence logit plus four box offsets per grid cell.

Which wire tensor feeds which module attribute is declared in a manifest
file rather than inferred; `bind_schema` refuses to train unless every
shared tensor maps to exactly one local tensor of identical shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .wire import Entry, ParamTable


@dataclass
class Manifest:
    mapping: dict[str, str]  # wire tensor name -> module attribute
    include_prefixes: tuple[str, ...]
    exclude_roles: frozenset[str]
    exclude_patterns: tuple[str, ...]

    @staticmethod
    def load(path) -> "Manifest":
        raw = json.loads(open(path).read())
        shared = raw.get("shared", {})
        return Manifest(
            mapping=dict(raw["mapping"]),
            include_prefixes=tuple(shared.get("include_prefixes", [])),
            exclude_roles=frozenset(shared.get("exclude_roles", [])),
            exclude_patterns=tuple(shared.get("exclude_patterns", [])),
        )

    def is_shared(self, name: str, role: str) -> bool:
        if self.include_prefixes and not any(
            name.startswith(p) for p in self.include_prefixes
        ):
            return False
        if role in self.exclude_roles:
            return False
        return not any(pat in name for pat in self.exclude_patterns)


class SchemaMismatch(RuntimeError):
    pass


class PatchDetector(nn.Module):
    def __init__(self, image_size: int = 32, grid: int = 4,
                 widths: tuple[int, int] = (32, 32), head_width: int = 32):
        super().__init__()
        self.image_size = image_size
        self.grid = grid
        self.patch = image_size // grid
        self.cells = grid * grid
        d1, d2 = widths
        patch_dim = self.patch * self.patch
        self.patch_embed_w = nn.Parameter(torch.empty(patch_dim, d1).uniform_(-0.05, 0.05))
        self.patch_embed_b = nn.Parameter(torch.zeros(d1))
        self.mix_w = nn.Parameter(torch.empty(d1, d2).uniform_(-0.05, 0.05))
        self.norm_scale = nn.Parameter(torch.ones(d2))
        self.norm_shift = nn.Parameter(torch.zeros(d2))
        self.register_buffer("norm_running_mean", torch.zeros(d2))
        self.register_buffer("norm_running_var", torch.ones(d2))
        self.head_hidden_w = nn.Parameter(torch.empty(d2, head_width).uniform_(-0.05, 0.05))
        self.head_hidden_b = nn.Parameter(torch.zeros(head_width))
        self.head_out_w = nn.Parameter(torch.empty(head_width, 5).uniform_(-0.05, 0.05))
        self.head_out_b = nn.Parameter(torch.zeros(5))
        self._wire_names: dict[str, str] = {}
        self._roles: dict[str, str] = {}

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        batch = images.shape[0]
        patches = F.unfold(images, kernel_size=self.patch, stride=self.patch)
        x = patches.transpose(1, 2).reshape(batch * self.cells, -1)
        h = torch.tanh(x @ self.patch_embed_w + self.patch_embed_b)
        z = h @ self.mix_w
        z = F.batch_norm(
            z,
            self.norm_running_mean,
            self.norm_running_var,
            self.norm_scale,
            self.norm_shift,
            self.training,
            0.1,
            1e-3,
        )
        feat = torch.tanh(z)
        h = torch.tanh(feat @ self.head_hidden_w + self.head_hidden_b)
        out = h @ self.head_out_w + self.head_out_b
        return out.reshape(batch, self.grid, self.grid, 5)

    # -- schema binding ------------------------------------------------------

    def local_tensor(self, attr: str) -> torch.Tensor:
        tensor = getattr(self, attr, None)
        if not isinstance(tensor, torch.Tensor):
            raise SchemaMismatch(f"manifest maps to unknown local tensor {attr!r}")
        return tensor

    def bind_schema(self, table: ParamTable, manifest: Manifest) -> None:
        """Validate the mapping against the received schema and load it.

        Every shared tensor must map onto exactly one local tensor of
        identical shape; otherwise the bridge refuses to train.
        """
        attrs_seen: dict[str, str] = {}
        for entry in table.entries:
            attr = manifest.mapping.get(entry.name)
            shared = manifest.is_shared(entry.name, entry.role)
            if attr is None:
                if shared:
                    raise SchemaMismatch(f"shared tensor {entry.name!r} has no mapping")
                continue
            if attr in attrs_seen:
                raise SchemaMismatch(
                    f"{entry.name!r} and {attrs_seen[attr]!r} both map to {attr!r}"
                )
            attrs_seen[attr] = entry.name
            local = self.local_tensor(attr)
            if tuple(local.shape) != entry.array.shape:
                raise SchemaMismatch(
                    f"{entry.name!r}: wire shape {entry.array.shape} vs "
                    f"local {tuple(local.shape)}"
                )
            self._wire_names[entry.name] = attr
            self._roles[entry.name] = entry.role
        self.load_table(table)

    def load_table(self, table: ParamTable) -> None:
        with torch.no_grad():
            for entry in table.entries:
                attr = self._wire_names.get(entry.name)
                if attr is None:
                    continue
                self.local_tensor(attr).copy_(torch.from_numpy(entry.array.copy()))

    def export_shared(self, manifest: Manifest) -> ParamTable:
        table = ParamTable()
        for name, attr in self._wire_names.items():
            role = self._roles[name]
            if manifest.is_shared(name, role):
                array = self.local_tensor(attr).detach().cpu().numpy().astype(np.float32)
                table.entries.append(Entry(name, role, array))
        return table

    # -- training and evaluation ----------------------------------------------

    def targets(self, boxes: list) -> tuple[torch.Tensor, torch.Tensor]:
        size = self.patch
        presence = torch.zeros(self.grid, self.grid)
        offsets = torch.zeros(self.grid, self.grid, 4)
        for x0, y0, x1, y1 in boxes:
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            col = min(max(int(cx // size), 0), self.grid - 1)
            row = min(max(int(cy // size), 0), self.grid - 1)
            if presence[row, col]:
                continue
            presence[row, col] = 1.0
            offsets[row, col] = torch.tensor(
                [
                    (cx - (col + 0.5) * size) / size,
                    (cy - (row + 0.5) * size) / size,
                    math.log((x1 - x0) / size),
                    math.log((y1 - y0) / size),
                ]
            )
        return presence, offsets

    def train_epochs(self, samples, epochs: int, batch_size: int = 16,
                     lr: float = 1e-4, rng: np.random.Generator | None = None) -> None:
        if epochs == 0:
            return
        rng = rng or np.random.default_rng(0)
        if not hasattr(self, "_optimizer"):
            self._optimizer = torch.optim.Adam(self.parameters(), lr=lr)
        self.train()
        n = len(samples)
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = [samples[i] for i in order[start : start + batch_size]]
                images, presence, offsets = [], [], []
                for sample in batch:
                    image, boxes = sample.image, sample.boxes
                    if rng.random() < 0.5:  # horizontal flip augmentation
                        image = image[..., ::-1].copy()
                        width = image.shape[-1]
                        boxes = [(width - x1, y0, width - x0, y1) for x0, y0, x1, y1 in boxes]
                    images.append(torch.from_numpy(image.copy()))
                    p, o = self.targets(boxes)
                    presence.append(p)
                    offsets.append(o)
                images_t = torch.stack(images)
                presence_t = torch.stack(presence)
                offsets_t = torch.stack(offsets)
                out = self(images_t)
                logits, pred_offsets = out[..., 0], out[..., 1:]
                cls = F.binary_cross_entropy_with_logits(
                    logits, presence_t, reduction="sum"
                )
                mask = presence_t.unsqueeze(-1) > 0.5
                reg = F.smooth_l1_loss(
                    pred_offsets[mask.expand_as(pred_offsets)],
                    offsets_t[mask.expand_as(offsets_t)],
                    reduction="sum",
                )
                loss = (cls + reg) / len(batch)
                self._optimizer.zero_grad()
                loss.backward()
                self._optimizer.step()

    def predict(self, image: np.ndarray, threshold: float = 0.5):
        self.eval()
        with torch.no_grad():
            out = self(torch.from_numpy(image[None].copy()))[0]
        probs = torch.sigmoid(out[..., 0]).numpy()
        offsets = out[..., 1:].numpy()
        size, w = self.patch, self.image_size
        detections = []
        for row, col in zip(*np.nonzero(probs >= threshold)):
            t_cx, t_cy, t_w, t_h = offsets[row, col]
            cx = float(np.clip((col + 0.5) * size + t_cx * size, 0.5, w - 0.5))
            cy = float(np.clip((row + 0.5) * size + t_cy * size, 0.5, w - 0.5))
            bw = float(np.clip(math.exp(t_w) * size, 1.0, 2 * w))
            bh = float(np.clip(math.exp(t_h) * size, 1.0, 2 * w))
            box = (max(0.0, cx - bw / 2), max(0.0, cy - bh / 2),
                   min(w, cx + bw / 2), min(w, cy + bh / 2))
            detections.append((float(probs[row, col]), box))
        detections.sort(key=lambda d: -d[0])
        return detections

    def evaluate(self, samples, iou_threshold: float = 0.5) -> dict:
        tp = fp = fn = 0
        for sample in samples:
            detections = self.predict(sample.image)
            matched = _greedy_match(
                [box for _, box in detections], sample.boxes, iou_threshold
            )
            tp += matched
            fp += len(detections) - matched
            fn += len(sample.boxes) - matched
        precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
        recall = tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        return {"precision": precision, "recall": recall, "f1": f1,
                "tp": tp, "fp": fp, "fn": fn}


def _iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _greedy_match(pred_boxes, gt_boxes, threshold: float) -> int:
    free = set(range(len(gt_boxes)))
    matched = 0
    for box in pred_boxes:  # already confidence-sorted
        best, best_iou = -1, 0.0
        for j in sorted(free):
            value = _iou(box, gt_boxes[j])
            if value > best_iou:
                best, best_iou = j, value
        if best >= 0 and best_iou >= threshold:
            free.remove(best)
            matched += 1
    return matched
