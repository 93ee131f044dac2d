"""Federation protocol: schedule, lockstep rounds, transports, failures."""

import numpy as np
import pytest

from fedbox import (
    AggregationPlan,
    ClientWeight,
    FederationError,
    FilterRule,
    NamedParameterSet,
    RoundSchedule,
    ToyDetectorConfig,
    ToyTrainer,
    diff_names,
    epochs_for,
    filter_shared,
    run_federation,
    serialize_params,
)
from fedbox.aggregation import SHARE_ALL
from fedbox.data import ClientProfile, generate
from fedbox.detector import init_params
from fedbox.errors import UnknownClientError
from fedbox.metrics import metrics_from_counts
from fedbox.protocol import FederatedClient

BACKBONE = FilterRule(include_prefixes=("backbone.",))
SMALL = ToyDetectorConfig(image_size=(16, 16), grid=2, backbone_widths=(8, 6), head_widths=(6,))


def tiny_dataset(client_id: str, seed: int):
    profile = ClientProfile(
        client_id=client_id,
        n_patients=4,
        images_per_patient=(2, 3),
        intensity_mean=0.45,
        intensity_std=0.1,
        max_boxes_per_image=2,
        test_fraction=0.25,
        image_size=(16, 16),
    )
    return generate(profile, seed)


def make_client(client_id: str, seed: int, rule=BACKBONE, trainer=None, hook=None):
    dataset = tiny_dataset(client_id, seed)
    if trainer is None:
        trainer = ToyTrainer(SMALL, seed=seed)
    return FederatedClient(
        client_id,
        trainer,
        list(dataset.train),
        list(dataset.test),
        rule,
        snapshot_hook=hook,
    )


def two_client_plan(rule=BACKBONE) -> AggregationPlan:
    return AggregationPlan(
        weights=(ClientWeight("c1", 1.0), ClientWeight("c2", 6.0)), filter=rule
    )


def schedule_for(ids, rounds=2, epochs=1, warmup=1) -> RoundSchedule:
    return RoundSchedule(
        total_rounds=rounds,
        epochs_per_round={cid: epochs for cid in ids},
        warmup_epochs={cid: warmup for cid in ids},
    )


class FrozenTrainer:
    """Duck-typed trainer whose parameters never change."""

    def __init__(self, params: NamedParameterSet):
        self._params = params

    def get_params(self) -> NamedParameterSet:
        return self._params

    def set_params(self, params: NamedParameterSet) -> None:
        self._params = params

    def train_epochs(self, samples, epochs, **kwargs) -> None:
        pass

    def evaluate(self, samples):
        return metrics_from_counts(0, 0, len(samples))


class ExplodingTrainer(FrozenTrainer):
    def train_epochs(self, samples, epochs, **kwargs):
        raise RuntimeError("client hardware gave up")


def result_fingerprint(result) -> bytes:
    chunks = [serialize_params(p) for p in result.global_history]
    for reports in result.metrics_history:
        for cid in sorted(reports):
            r = reports[cid]
            chunks.append(
                f"{cid}:{r.precision}:{r.recall}:{r.f1}:{r.tp}:{r.fp}:{r.fn}".encode()
            )
    return b"".join(chunks)


# -- schedule -------------------------------------------------------------------

def test_epochs_for_reference_values():
    schedule = RoundSchedule(
        total_rounds=20,
        epochs_per_round={"client1": 20, "client2": 4},
        warmup_epochs={"client1": 40, "client2": 16},
    )
    assert epochs_for(schedule, 1, "client1") == 40
    assert epochs_for(schedule, 1, "client2") == 16
    assert epochs_for(schedule, 2, "client2") == 4
    assert epochs_for(schedule, 20, "client1") == 20


def test_epochs_for_flat_schedule():
    schedule = schedule_for(["a"], rounds=3, epochs=5, warmup=5)
    assert [epochs_for(schedule, r, "a") for r in (1, 2, 3)] == [5, 5, 5]


def test_epochs_for_errors():
    schedule = schedule_for(["a"], rounds=3)
    with pytest.raises(UnknownClientError):
        epochs_for(schedule, 1, "zz")
    with pytest.raises(ValueError):
        epochs_for(schedule, 0, "a")
    with pytest.raises(ValueError):
        epochs_for(schedule, 4, "a")


def test_schedule_validation():
    with pytest.raises(ValueError):
        RoundSchedule(0, {"a": 1}, {"a": 1})
    with pytest.raises(ValueError):
        RoundSchedule(2, {"a": 1}, {"b": 1})
    with pytest.raises(ValueError):
        RoundSchedule(2, {"a": 0}, {"a": 1})


# -- single client / frozen trainers ---------------------------------------------

def test_single_client_global_equals_its_shared_params():
    client = make_client("c1", seed=11)
    plan = AggregationPlan(weights=(ClientWeight("c1", 2.5),), filter=BACKBONE)
    result = run_federation(
        client.trainer.get_params(),
        plan,
        schedule_for(["c1"], rounds=1),
        [client],
    )
    assert len(result.global_history) == 1
    assert result.global_history[0] == client.shared_params()


def test_frozen_trainers_global_equals_init():
    init = init_params(SMALL, np.random.default_rng(0))
    clients = [
        make_client(cid, seed, trainer=FrozenTrainer(init))
        for cid, seed in (("c1", 1), ("c2", 2))
    ]
    result = run_federation(init, two_client_plan(), schedule_for(["c1", "c2"]), clients)
    expected = filter_shared(init, BACKBONE)
    for global_shared in result.global_history:
        assert global_shared == expected


def test_two_runs_bitwise_identical():
    def one_run():
        clients = [make_client("c1", 21), make_client("c2", 22)]
        init = init_params(SMALL, np.random.default_rng(5))
        return run_federation(
            init, two_client_plan(), schedule_for(["c1", "c2"], rounds=2), clients
        )

    assert result_fingerprint(one_run()) == result_fingerprint(one_run())


def test_transport_equivalence_inproc_vs_tcp():
    def one_run(transport):
        clients = [make_client("c1", 31), make_client("c2", 32)]
        init = init_params(SMALL, np.random.default_rng(6))
        return run_federation(
            init,
            two_client_plan(),
            schedule_for(["c1", "c2"], rounds=2),
            clients,
            transport=transport,
        )

    assert result_fingerprint(one_run("inproc")) == result_fingerprint(one_run("tcp"))


# -- lockstep and partial sharing -------------------------------------------------

def test_lockstep_shared_subsets_identical_across_clients():
    snapshots = {"c1": [], "c2": []}

    def hook(cid):
        return lambda rnd, before, after: snapshots[cid].append((rnd, before, after))

    clients = [
        make_client("c1", 41, hook=hook("c1")),
        make_client("c2", 42, hook=hook("c2")),
    ]
    init = init_params(SMALL, np.random.default_rng(7))
    result = run_federation(
        init, two_client_plan(), schedule_for(["c1", "c2"], rounds=3), clients
    )
    assert len(snapshots["c1"]) == len(snapshots["c2"]) == 3
    for (r1, _, after1), (r2, _, after2) in zip(snapshots["c1"], snapshots["c2"]):
        assert r1 == r2
        shared1 = filter_shared(after1, BACKBONE)
        shared2 = filter_shared(after2, BACKBONE)
        assert shared1 == shared2
        assert shared1 == result.global_history[r1 - 1]


def test_head_parameters_never_touched_by_global_update():
    records = []
    client = make_client(
        "c1", 51, hook=lambda rnd, before, after: records.append((before, after))
    )
    clients = [client, make_client("c2", 52)]
    init = init_params(SMALL, np.random.default_rng(8))
    run_federation(init, two_client_plan(), schedule_for(["c1", "c2"], rounds=2), clients)
    for before, after in records:
        changed = diff_names(before, after)
        assert all(name.startswith("backbone.") for name in changed)


def test_request_log_rounds_monotonic_and_epochs_match_schedule():
    clients = [make_client("c1", 61), make_client("c2", 62)]
    init = init_params(SMALL, np.random.default_rng(9))
    schedule = RoundSchedule(
        total_rounds=3,
        epochs_per_round={"c1": 2, "c2": 1},
        warmup_epochs={"c1": 3, "c2": 2},
    )
    result = run_federation(init, two_client_plan(), schedule, clients)
    per_client = {"c1": [], "c2": []}
    for rnd, cid, epochs in result.request_log:
        per_client[cid].append((rnd, epochs))
    assert sorted(per_client["c1"]) == [(1, 3), (2, 2), (3, 2)]
    assert sorted(per_client["c2"]) == [(1, 2), (2, 1), (3, 1)]
    for pairs in per_client.values():
        rounds = [r for r, _ in sorted(pairs)]
        assert rounds == sorted(rounds)
    # Trainers saw exactly the scheduled epochs, in round order.
    assert clients[0].trainer.epochs_log == [3, 2, 2]
    assert clients[1].trainer.epochs_log == [2, 1, 1]


def test_metrics_history_complete_per_round():
    clients = [make_client("c1", 71), make_client("c2", 72)]
    init = init_params(SMALL, np.random.default_rng(10))
    result = run_federation(
        init, two_client_plan(), schedule_for(["c1", "c2"], rounds=2), clients
    )
    assert len(result.metrics_history) == 2
    for rnd, reports in enumerate(result.metrics_history, start=1):
        assert set(reports) == {"c1", "c2"}
        for cid, report in reports.items():
            assert report.round == rnd
            assert report.client_id == cid
    assert result.num_examples["c1"] == len(clients[0].train_samples)


# -- failures ----------------------------------------------------------------------

def test_client_failure_aborts_run():
    init = init_params(SMALL, np.random.default_rng(11))
    clients = [
        make_client("c1", 81, trainer=ExplodingTrainer(init)),
        make_client("c2", 82),
    ]
    with pytest.raises(FederationError):
        run_federation(init, two_client_plan(), schedule_for(["c1", "c2"]), clients)


def test_schema_mismatch_aborts_at_registration():
    init = init_params(SMALL, np.random.default_rng(12))
    other_config = ToyDetectorConfig(
        image_size=(16, 16), grid=2, backbone_widths=(4,), head_widths=(3,)
    )
    mismatched = FrozenTrainer(init_params(other_config, np.random.default_rng(0)))

    class NoInitClient(FederatedClient):
        def run(self, channel):  # skip applying InitModel to keep the bad schema
            msg = channel.recv()
            from fedbox.wire import WeightUpdate

            channel.send(WeightUpdate(1, self.client_id, self.shared_params(), 1))
            channel.recv()

    bad = NoInitClient("c1", mismatched, [], [], BACKBONE)
    good = make_client("c2", 92)
    with pytest.raises(FederationError):
        run_federation(init, two_client_plan(), schedule_for(["c1", "c2"]), [bad, good])


def test_unknown_client_rejected_at_registration():
    init = init_params(SMALL, np.random.default_rng(13))
    stranger = make_client("intruder", 99)
    with pytest.raises((FederationError, ValueError)):
        run_federation(
            init,
            two_client_plan(),
            schedule_for(["c1", "c2"]),
            [make_client("c1", 1), stranger],
        )


def test_duplicate_client_ids_rejected():
    init = init_params(SMALL, np.random.default_rng(14))
    with pytest.raises(ValueError, match="duplicate"):
        run_federation(
            init,
            two_client_plan(),
            schedule_for(["c1", "c2"]),
            [make_client("c1", 1), make_client("c1", 2)],
        )


def test_phase_log_barrier_order():
    """Aggregation appears exactly once per round, always after awaiting."""
    from fedbox.protocol import (
        PHASE_AGGREGATING,
        PHASE_AWAITING_UPDATES,
        PHASE_BROADCASTING,
        PHASE_FINISHED,
        FederationCoordinator,
        serve_connection,
        inproc_pair,
    )
    import threading

    init = init_params(SMALL, np.random.default_rng(15))
    schedule = schedule_for(["c1", "c2"], rounds=2)
    coordinator = FederationCoordinator(init, two_client_plan(), schedule, ["c1", "c2"])
    clients = [make_client("c1", 1), make_client("c2", 2)]
    threads = []
    for client in clients:
        server_end, client_end = inproc_pair()
        threads.append(
            threading.Thread(target=serve_connection, args=(coordinator, server_end))
        )
        threads.append(threading.Thread(target=client.run, args=(client_end,)))
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=60)
    phases = coordinator.phase_log
    assert phases[0] == (PHASE_BROADCASTING, 0)
    assert phases[1] == (PHASE_AWAITING_UPDATES, 1)
    assert (PHASE_AGGREGATING, 1) in phases and (PHASE_AGGREGATING, 2) in phases
    assert phases.index((PHASE_AWAITING_UPDATES, 1)) < phases.index((PHASE_AGGREGATING, 1))
    assert phases.index((PHASE_AWAITING_UPDATES, 2)) < phases.index((PHASE_AGGREGATING, 2))
    assert phases[-1] == (PHASE_FINISHED, 2)
    assert coordinator.error is None


def test_share_all_plan_replaces_whole_model():
    records = []
    client = make_client(
        "c1", 101, rule=SHARE_ALL,
        hook=lambda rnd, before, after: records.append((before, after)),
    )
    clients = [client, make_client("c2", 102, rule=SHARE_ALL)]
    init = init_params(SMALL, np.random.default_rng(16))
    result = run_federation(
        init, two_client_plan(SHARE_ALL), schedule_for(["c1", "c2"], rounds=1), clients
    )
    _, after = records[0]
    assert after == result.global_history[0]  # full model replaced by the aggregate
