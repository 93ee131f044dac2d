# The same federation over real TCP sockets, frame by frame, and proof that
# the transport does not change the numbers: in-process queues and TCP yield
# bitwise-identical global models.
#
# External processes can join the TCP federation as long as they speak the
# wire format (see the `bridge/` package for a PyTorch client that does).

import numpy as np

from fedbox import RoundSchedule, ToyDetectorConfig, ToyTrainer, generate, run_federation
from fedbox.data import default_profiles, scaled_profile
from fedbox.detector import init_params
from fedbox.experiments import builtin_plan
from fedbox.protocol import FederatedClient
from fedbox.wire import encode_message, TrainRequest


def build_clients(plan):
    clients = []
    for client_id, profile in zip(("client1", "client2"), default_profiles()):
        dataset = generate(scaled_profile(profile, 0.3), seed=3)
        clients.append(
            FederatedClient(
                client_id,
                ToyTrainer(ToyDetectorConfig(), seed=len(client_id)),
                list(dataset.train),
                list(dataset.test),
                plan.filter,
            )
        )
    return clients


plan = builtin_plan("proposed")
schedule = RoundSchedule(
    total_rounds=2,
    epochs_per_round={"client1": 2, "client2": 1},
    warmup_epochs={"client1": 4, "client2": 2},
)
init = init_params(ToyDetectorConfig(), np.random.default_rng(1))

frame = encode_message(TrainRequest(round=1, epochs=4))
print(f"a TrainRequest frame on the wire ({len(frame)} bytes): {frame.hex()}")

results = {}
for transport in ("inproc", "tcp"):
    result = run_federation(init, plan, schedule, build_clients(plan), transport=transport)
    results[transport] = result
    recalls = {cid: f"{r.recall:.2f}" for cid, r in result.metrics_history[-1].items()}
    print(f"{transport:>7}: {len(result.global_history)} rounds, final recalls {recalls}")

identical = all(
    a == b
    for a, b in zip(results["inproc"].global_history, results["tcp"].global_history)
)
print("global models bitwise identical across transports:", identical)
