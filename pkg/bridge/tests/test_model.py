"""Manifest binding, schema validation, and local training of the bridge model."""

from pathlib import Path

import numpy as np
import pytest
import torch

from flbridge.data import Sample
from flbridge.model import Manifest, PatchDetector, SchemaMismatch
from flbridge.wire import Entry, ParamTable

MANIFEST_PATH = Path(__file__).resolve().parents[1] / "manifests" / "default.json"


def wire_schema_table(rng=None) -> ParamTable:
    rng = rng or np.random.default_rng(0)

    def t(shape):
        return rng.normal(0, 0.05, shape).astype(np.float32)

    entries = [
        Entry("backbone.l1.w", "trainable", t((64, 32))),
        Entry("backbone.l1.b", "trainable", t((32,))),
        Entry("backbone.l2.w", "trainable", t((32, 32))),
        Entry("backbone.norm.w", "trainable", np.ones(32, np.float32)),
        Entry("backbone.norm.b", "trainable", t((32,))),
        Entry("backbone.norm.running_mean", "statistic", np.zeros(32, np.float32)),
        Entry("backbone.norm.running_var", "statistic", np.ones(32, np.float32)),
        Entry("head.l1.w", "trainable", t((32, 32))),
        Entry("head.l1.b", "trainable", t((32,))),
        Entry("head.out.w", "trainable", t((32, 5))),
        Entry("head.out.b", "trainable", t((5,))),
    ]
    return ParamTable(entries=entries)


def random_samples(rng, n=8):
    samples = []
    for _ in range(n):
        image = rng.uniform(0, 1, (1, 32, 32)).astype(np.float32)
        cx, cy = rng.uniform(6, 26, 2)
        hx, hy = rng.uniform(3.5, 5.5, 2)
        samples.append(
            Sample(
                image=image,
                boxes=[(float(cx - hx), float(cy - hy), float(cx + hx), float(cy + hy))],
                patient_id="p0",
            )
        )
    return samples


def test_bind_schema_loads_wire_tensors():
    manifest = Manifest.load(MANIFEST_PATH)
    table = wire_schema_table()
    model = PatchDetector()
    model.bind_schema(table, manifest)
    np.testing.assert_array_equal(
        model.patch_embed_w.detach().numpy(), table.get("backbone.l1.w").array
    )
    np.testing.assert_array_equal(
        model.norm_running_var.numpy(), np.ones(32, np.float32)
    )


def test_export_shared_matches_manifest_filter():
    manifest = Manifest.load(MANIFEST_PATH)
    model = PatchDetector()
    model.bind_schema(wire_schema_table(), manifest)
    shared = model.export_shared(manifest)
    assert shared.names() == [
        "backbone.l1.w", "backbone.l1.b", "backbone.l2.w",
        "backbone.norm.w", "backbone.norm.b",
        "backbone.norm.running_mean", "backbone.norm.running_var",
    ]


def test_missing_mapping_for_shared_tensor_aborts():
    manifest = Manifest.load(MANIFEST_PATH)
    del manifest.mapping["backbone.l2.w"]
    model = PatchDetector()
    with pytest.raises(SchemaMismatch, match="no mapping"):
        model.bind_schema(wire_schema_table(), manifest)


def test_shape_mismatch_aborts():
    manifest = Manifest.load(MANIFEST_PATH)
    table = wire_schema_table()
    table.get("backbone.l1.w").array = np.zeros((8, 8), np.float32)
    model = PatchDetector()
    with pytest.raises(SchemaMismatch, match="shape"):
        model.bind_schema(table, manifest)


def test_duplicate_mapping_target_aborts():
    manifest = Manifest.load(MANIFEST_PATH)
    manifest.mapping["backbone.l1.b"] = "patch_embed_w"
    model = PatchDetector()
    with pytest.raises(SchemaMismatch, match="both map"):
        model.bind_schema(wire_schema_table(), manifest)


def test_unmapped_private_tensor_is_ignored():
    manifest = Manifest.load(MANIFEST_PATH)
    del manifest.mapping["head.out.b"]  # head is not shared under the default filter
    model = PatchDetector()
    model.bind_schema(wire_schema_table(), manifest)  # must not raise


def test_zero_epoch_training_is_noop():
    manifest = Manifest.load(MANIFEST_PATH)
    model = PatchDetector()
    model.bind_schema(wire_schema_table(), manifest)
    before = model.export_shared(manifest)
    model.train_epochs(random_samples(np.random.default_rng(1)), epochs=0)
    after = model.export_shared(manifest)
    for a, b in zip(before.entries, after.entries):
        assert a.array.tobytes() == b.array.tobytes()


def test_training_moves_parameters_and_evaluate_reports_counts():
    torch.manual_seed(0)
    manifest = Manifest.load(MANIFEST_PATH)
    model = PatchDetector()
    model.bind_schema(wire_schema_table(), manifest)
    rng = np.random.default_rng(2)
    samples = random_samples(rng, n=12)
    before = model.export_shared(manifest)
    model.train_epochs(samples, epochs=2, rng=rng)
    after = model.export_shared(manifest)
    assert any(
        a.array.tobytes() != b.array.tobytes()
        for a, b in zip(before.entries, after.entries)
    )
    scores = model.evaluate(samples)
    assert set(scores) == {"precision", "recall", "f1", "tp", "fp", "fn"}
    assert scores["tp"] + scores["fn"] == sum(len(s.boxes) for s in samples)
    assert 0.0 <= scores["precision"] <= 1.0
    assert 0.0 <= scores["recall"] <= 1.0
