"""The bridge client lifecycle: connect, register, obey the server's rounds.

Single-threaded event loop over one TCP connection:

1. receive InitModel, bind the wire schema onto the local PyTorch model via
   the manifest (aborting before training on any mismatch), and register by
   sending a round-1 WeightUpdate with the shared subset;
2. for each TrainRequest, train locally for exactly the requested epochs
   and send back the updated shared subset;
3. for each GlobalUpdate, load the aggregated tensors, evaluate on the
   local test split, and report Metrics;
4. exit cleanly on Done.
"""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass

import numpy as np

from . import wire
from .data import load as load_dataset
from .model import Manifest, PatchDetector


@dataclass
class BridgeConfig:
    server: str  # host:port
    client_id: str
    data_path: str
    manifest_path: str
    seed: int = 0
    connect_timeout: float = 30.0
    batch_size: int = 16
    lr: float = 1e-4


def _connect(address: str, timeout: float) -> socket.socket:
    host, _, port = address.partition(":")
    deadline = time.monotonic() + timeout
    last_error: Exception | None = None
    while time.monotonic() < deadline:
        try:
            return socket.create_connection((host, int(port)), timeout=120.0)
        except OSError as exc:
            last_error = exc
            time.sleep(0.2)
    raise ConnectionError(f"could not reach server at {address}: {last_error}")


def join_federation(config: BridgeConfig) -> int:
    dataset = load_dataset(config.data_path)
    manifest = Manifest.load(config.manifest_path)
    rng = np.random.default_rng(config.seed)

    import torch

    torch.manual_seed(config.seed)
    model = PatchDetector()
    sock = _connect(config.server, config.connect_timeout)
    try:
        while True:
            msg = wire.recv_message(sock)
            kind = msg["type"]
            if kind == "init_model":
                model.bind_schema(msg["params"], manifest)
                wire.send_message(
                    sock,
                    {
                        "type": "weight_update",
                        "round": 1,
                        "client_id": config.client_id,
                        "num_examples": len(dataset.train),
                        "params": model.export_shared(manifest),
                    },
                )
            elif kind == "train_request":
                model.train_epochs(
                    dataset.train,
                    msg["epochs"],
                    batch_size=config.batch_size,
                    lr=config.lr,
                    rng=rng,
                )
                wire.send_message(
                    sock,
                    {
                        "type": "weight_update",
                        "round": msg["round"],
                        "client_id": config.client_id,
                        "num_examples": len(dataset.train),
                        "params": model.export_shared(manifest),
                    },
                )
            elif kind == "global_update":
                model.load_table(msg["params"])
                scores = model.evaluate(dataset.test)
                wire.send_message(
                    sock,
                    {
                        "type": "metrics",
                        "round": msg["round"],
                        "client_id": config.client_id,
                        **scores,
                    },
                )
            elif kind == "done":
                return 0
            else:
                raise wire.ProtocolError(f"unexpected message {kind!r}")
    finally:
        sock.close()
