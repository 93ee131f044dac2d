"""Cross-implementation wire conformance against the server-side package.

A full session's frames — InitModel, registration WeightUpdate,
TrainRequest, WeightUpdate, GlobalUpdate, Metrics, Done — are encoded by
one implementation and decoded by the other, in both directions,
frame for frame.
"""

import numpy as np
import pytest

from fedbox import wire as server_wire
from fedbox.params import NamedParameterSet
from flbridge import wire as bridge_wire
from flbridge.wire import Entry, ParamTable


def server_params() -> NamedParameterSet:
    rng = np.random.default_rng(3)
    return NamedParameterSet(
        [
            ("backbone.l1.w", "trainable", rng.normal(size=(4, 3)).astype(np.float32)),
            ("backbone.norm.running_mean", "statistic", rng.normal(size=3).astype(np.float32)),
        ]
    )


def bridge_params() -> ParamTable:
    rng = np.random.default_rng(3)
    return ParamTable(
        entries=[
            Entry("backbone.l1.w", "trainable", rng.normal(size=(4, 3)).astype(np.float32)),
            Entry("backbone.norm.running_mean", "statistic", rng.normal(size=3).astype(np.float32)),
        ]
    )


def server_session() -> list:
    params = server_params()
    return [
        server_wire.InitModel(params),
        server_wire.WeightUpdate(1, "client2", params, 9),
        server_wire.TrainRequest(1, 16),
        server_wire.WeightUpdate(1, "client2", params, 9),
        server_wire.GlobalUpdate(1, params),
        server_wire.Metrics(1, "client2", 0.5, 0.25, 1 / 3, 2, 2, 6),
        server_wire.Done(),
    ]


def bridge_session() -> list[dict]:
    params = bridge_params()
    return [
        {"type": "init_model", "params": params},
        {"type": "weight_update", "round": 1, "client_id": "client2",
         "num_examples": 9, "params": params},
        {"type": "train_request", "round": 1, "epochs": 16},
        {"type": "weight_update", "round": 1, "client_id": "client2",
         "num_examples": 9, "params": params},
        {"type": "global_update", "round": 1, "params": params},
        {"type": "metrics", "round": 1, "client_id": "client2",
         "precision": 0.5, "recall": 0.25, "f1": 1 / 3, "tp": 2, "fp": 2, "fn": 6},
        {"type": "done"},
    ]


def tables_equal(server_set: NamedParameterSet, table: ParamTable) -> bool:
    if server_set.names() != table.names():
        return False
    for entry in table.entries:
        if server_set.role(entry.name) != entry.role:
            return False
        if server_set.get(entry.name).tobytes() != entry.array.astype("<f4").tobytes():
            return False
    return True


def test_identical_sessions_produce_identical_bytes():
    server_frames = [server_wire.encode_message(m) for m in server_session()]
    bridge_frames = [bridge_wire.encode(m) for m in bridge_session()]
    assert server_frames == bridge_frames


def test_bridge_decodes_server_frames():
    for msg in server_session():
        decoded = bridge_wire.decode(server_wire.encode_message(msg))
        if isinstance(msg, server_wire.InitModel):
            assert decoded["type"] == "init_model"
            assert tables_equal(msg.params, decoded["params"])
        elif isinstance(msg, server_wire.WeightUpdate):
            assert decoded["round"] == msg.round
            assert decoded["client_id"] == msg.client_id
            assert decoded["num_examples"] == msg.num_examples
            assert tables_equal(msg.params, decoded["params"])
        elif isinstance(msg, server_wire.TrainRequest):
            assert decoded == {"type": "train_request", "round": 1, "epochs": 16}
        elif isinstance(msg, server_wire.GlobalUpdate):
            assert decoded["round"] == msg.round
            assert tables_equal(msg.params, decoded["params"])
        elif isinstance(msg, server_wire.Metrics):
            assert decoded["precision"] == msg.precision
            assert decoded["tp"] == msg.tp and decoded["fn"] == msg.fn
        else:
            assert decoded == {"type": "done"}


def test_server_decodes_bridge_frames():
    for msg in bridge_session():
        frame = bridge_wire.encode(msg)
        decoded = server_wire.decode_message(frame)
        kind = msg["type"]
        if kind == "init_model":
            assert isinstance(decoded, server_wire.InitModel)
            assert tables_equal(decoded.params, msg["params"])
        elif kind == "weight_update":
            assert isinstance(decoded, server_wire.WeightUpdate)
            assert decoded.client_id == msg["client_id"]
            assert decoded.num_examples == msg["num_examples"]
            assert tables_equal(decoded.params, msg["params"])
        elif kind == "train_request":
            assert decoded == server_wire.TrainRequest(1, 16)
        elif kind == "global_update":
            assert isinstance(decoded, server_wire.GlobalUpdate)
        elif kind == "metrics":
            assert isinstance(decoded, server_wire.Metrics)
            assert decoded.recall == msg["recall"]
        else:
            assert decoded == server_wire.Done()


def test_bridge_rejects_malformed_frames():
    frame = bytearray(bridge_wire.encode({"type": "done"}))
    frame[0:4] = b"XXXX"
    with pytest.raises(bridge_wire.ProtocolError):
        bridge_wire.decode(bytes(frame))
    with pytest.raises(bridge_wire.ProtocolError):
        bridge_wire.decode(bridge_wire.encode({"type": "done"})[:-1])
