"""Synchronous round-based server/client federation protocol.

One run proceeds in lockstep:

1. the server sends the full initial model (InitModel) on every connection;
2. each client applies it and registers by replying with a WeightUpdate for
   round 1 carrying its shared parameter subset — this reports both its
   identity and its schema, and registration aborts on any mismatch;
3. per round r: TrainRequest(r, epochs) -> local training -> WeightUpdate(r)
   -> barrier until every client's update arrived -> weighted aggregation ->
   GlobalUpdate(r) -> the client applies it, evaluates on its local test
   set, and reports Metrics(r);
4. after the last round the server sends Done.

Aggregation for round r never starts before all registered clients'
round-r updates are in (synchronous barrier, full participation). A client
dropping out aborts the whole run with a descriptive error; rounds are never
re-weighted around missing clients.

Transports: an in-process channel (queues carrying encoded frames) and TCP
(one frame per message). Both run the byte codec, and both produce bitwise
identical results for identical seeds because aggregation order is fixed by
the plan and each client owns an independent RNG.
"""

from __future__ import annotations

import queue
import socket
import threading
from dataclasses import dataclass, field

from . import wire
from .aggregation import AggregationPlan, apply_global, fedavg, filter_shared
from .errors import FederationError, SchemaMismatchError, UnknownClientError
from .metrics import MetricsReport
from .params import NamedParameterSet
from .wire import (
    Done,
    GlobalUpdate,
    InitModel,
    Message,
    Metrics,
    TrainRequest,
    WeightUpdate,
)

RECV_TIMEOUT = 120.0


@dataclass(frozen=True)
class RoundSchedule:
    """Round count plus per-client epochs; round 1 uses the warm-up counts."""

    total_rounds: int
    epochs_per_round: dict[str, int]
    warmup_epochs: dict[str, int]

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ValueError("total_rounds must be >= 1")
        if set(self.epochs_per_round) != set(self.warmup_epochs):
            raise ValueError("epochs_per_round and warmup_epochs must cover the same clients")
        for mapping in (self.epochs_per_round, self.warmup_epochs):
            for client_id, epochs in mapping.items():
                if epochs < 1:
                    raise ValueError(f"epochs for {client_id!r} must be >= 1")

    def client_ids(self) -> set[str]:
        return set(self.epochs_per_round)


def epochs_for(schedule: RoundSchedule, round: int, client_id: str) -> int:
    """Local epochs for one client in one 1-based round."""
    if client_id not in schedule.epochs_per_round:
        raise UnknownClientError(client_id)
    if not 1 <= round <= schedule.total_rounds:
        raise ValueError(f"round {round} out of range 1..{schedule.total_rounds}")
    if round == 1:
        return schedule.warmup_epochs[client_id]
    return schedule.epochs_per_round[client_id]


# -- transports --------------------------------------------------------------


class InProcChannel:
    """Queue-backed channel endpoint; frames are encoded/decoded like on TCP."""

    def __init__(self, outbox: queue.Queue, inbox: queue.Queue):
        self._outbox = outbox
        self._inbox = inbox

    def send(self, msg: Message) -> None:
        self._outbox.put(wire.encode_message(msg))

    def recv(self) -> Message:
        try:
            frame = self._inbox.get(timeout=RECV_TIMEOUT)
        except queue.Empty:
            raise FederationError("timed out waiting for the peer") from None
        if frame is None:
            raise FederationError("connection closed by peer")
        return wire.decode_message(frame)

    def close(self) -> None:
        self._outbox.put(None)


def inproc_pair() -> tuple[InProcChannel, InProcChannel]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return InProcChannel(a_to_b, b_to_a), InProcChannel(b_to_a, a_to_b)


class SocketChannel:
    """One frame per message over a TCP socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.settimeout(RECV_TIMEOUT)

    def send(self, msg: Message) -> None:
        try:
            self._sock.sendall(wire.encode_message(msg))
        except OSError as exc:
            raise FederationError(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self._sock.recv(n)
            except socket.timeout:
                raise FederationError("timed out waiting for the peer") from None
            except OSError as exc:
                raise FederationError(f"recv failed: {exc}") from exc
            if not chunk:
                raise FederationError("connection closed by peer")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def recv(self) -> Message:
        header = self._read_exact(wire.HEADER.size)
        _, length = wire.parse_header(header)
        return wire.decode_message(header + self._read_exact(length))

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


# -- client side --------------------------------------------------------------


class FederatedClient:
    """Binds a trainer to the protocol: filtering, merging, local evaluation.

    ``trainer`` must provide get_params/set_params, train_epochs(samples,
    epochs, batch_size=..., lr=...) and evaluate(samples) -> MetricsReport.
    ``snapshot_hook(round, before, after)`` observes every GlobalUpdate
    application (used by tests to verify partial-sharing isolation).
    """

    def __init__(
        self,
        client_id: str,
        trainer,
        train_samples,
        test_samples,
        filter_rule,
        batch_size: int = 16,
        lr: float = 1e-4,
        snapshot_hook=None,
    ):
        self.client_id = client_id
        self.trainer = trainer
        self.train_samples = list(train_samples)
        self.test_samples = list(test_samples)
        self.filter_rule = filter_rule
        self.batch_size = batch_size
        self.lr = lr
        self.snapshot_hook = snapshot_hook

    def shared_params(self) -> NamedParameterSet:
        return filter_shared(self.trainer.get_params(), self.filter_rule)

    def run(self, channel) -> None:
        """Full client lifecycle over an open channel."""
        msg = channel.recv()
        if not isinstance(msg, InitModel):
            raise FederationError(f"expected InitModel, got {type(msg).__name__}")
        self.trainer.set_params(msg.params)
        channel.send(
            WeightUpdate(1, self.client_id, self.shared_params(), len(self.train_samples))
        )
        while True:
            msg = channel.recv()
            if isinstance(msg, TrainRequest):
                self.trainer.train_epochs(
                    self.train_samples, msg.epochs, batch_size=self.batch_size, lr=self.lr
                )
                channel.send(
                    WeightUpdate(
                        msg.round, self.client_id, self.shared_params(), len(self.train_samples)
                    )
                )
            elif isinstance(msg, GlobalUpdate):
                before = self.trainer.get_params()
                merged = apply_global(before, msg.params)
                self.trainer.set_params(merged)
                if self.snapshot_hook is not None:
                    self.snapshot_hook(msg.round, before, merged)
                report = self.trainer.evaluate(self.test_samples)
                channel.send(
                    Metrics(
                        msg.round,
                        self.client_id,
                        report.precision,
                        report.recall,
                        report.f1,
                        report.tp,
                        report.fp,
                        report.fn,
                    )
                )
            elif isinstance(msg, Done):
                return
            else:
                raise FederationError(f"unexpected message {type(msg).__name__}")


# -- server side ---------------------------------------------------------------

PHASE_IDLE = "idle"
PHASE_BROADCASTING = "broadcasting"
PHASE_AWAITING_UPDATES = "awaiting_updates"
PHASE_AGGREGATING = "aggregating"
PHASE_FINISHED = "finished"


@dataclass
class FederationResult:
    """Per-round aggregates and per-round, per-client evaluation reports."""

    global_history: list[NamedParameterSet]
    metrics_history: list[dict[str, MetricsReport]]
    request_log: list[tuple[int, str, int]]  # (round, client_id, epochs)
    num_examples: dict[str, int]


@dataclass
class ServerState:
    phase: str = PHASE_IDLE
    round: int = 0
    pending: set[str] = field(default_factory=set)
    global_shared: NamedParameterSet | None = None


class FederationCoordinator:
    """Shared server state behind a condition variable.

    Each client connection is served by its own thread; all mutation happens
    under the lock, and the thread that delivers the last pending update of a
    round performs the aggregation before waking the others (the barrier
    transition AwaitingUpdates -> Aggregating -> next round).
    """

    def __init__(
        self,
        init_params: NamedParameterSet,
        plan: AggregationPlan,
        schedule: RoundSchedule,
        expected_ids: list[str],
    ):
        if schedule.client_ids() != set(expected_ids):
            raise ValueError("schedule clients do not match the expected client ids")
        for client_id in expected_ids:
            plan.coefficient(client_id)  # raises UnknownClientError
        self.init_params = init_params
        self.plan = plan
        self.schedule = schedule
        self.expected = list(expected_ids)
        self.shared_schema = filter_shared(init_params, plan.filter).schema()

        self.state = ServerState(phase=PHASE_BROADCASTING)
        self.phase_log: list[tuple[str, int]] = [(PHASE_BROADCASTING, 0)]
        self.error: BaseException | None = None
        self._cond = threading.Condition()
        self._registered: dict[str, int] = {}
        self._updates: dict[str, NamedParameterSet] = {}
        self.result = FederationResult(
            global_history=[], metrics_history=[], request_log=[], num_examples={}
        )

    def _set_phase(self, phase: str, round: int) -> None:
        self.state.phase = phase
        self.state.round = round
        self.phase_log.append((phase, round))

    def _check_error(self) -> None:
        if self.error is not None:
            raise FederationError(f"federation aborted: {self.error}")

    def fail(self, exc: BaseException) -> None:
        with self._cond:
            if self.error is None:
                self.error = exc
            self._cond.notify_all()

    def _wait_for(self, predicate) -> None:
        while not predicate():
            self._check_error()
            if not self._cond.wait(timeout=RECV_TIMEOUT):
                raise FederationError("timed out at a federation barrier")
        self._check_error()

    def register(self, update: WeightUpdate) -> str:
        """Validate a registration update; blocks until all clients joined."""
        with self._cond:
            self._check_error()
            client_id = update.client_id
            if client_id not in self.expected:
                raise FederationError(f"unknown client {client_id!r} tried to register")
            if client_id in self._registered:
                raise FederationError(f"client {client_id!r} registered twice")
            if update.params.schema() != self.shared_schema:
                raise SchemaMismatchError(
                    f"client {client_id!r} registered with a mismatched schema: "
                    f"{update.params.schema()} vs {self.shared_schema}"
                )
            self._registered[client_id] = update.num_examples
            self.result.num_examples[client_id] = update.num_examples
            if len(self._registered) == len(self.expected):
                self._set_phase(PHASE_AWAITING_UPDATES, 1)
                self.state.pending = set(self.expected)
                self._cond.notify_all()
            else:
                self._wait_for(lambda: len(self._registered) == len(self.expected))
            return client_id

    def log_request(self, round: int, client_id: str, epochs: int) -> None:
        with self._cond:
            self.result.request_log.append((round, client_id, epochs))

    def submit_update(self, update: WeightUpdate) -> NamedParameterSet:
        """Deliver one round update; blocks until the round's aggregate exists."""
        with self._cond:
            self._check_error()
            rnd, client_id = update.round, update.client_id
            if self.state.phase != PHASE_AWAITING_UPDATES or rnd != self.state.round:
                raise FederationError(
                    f"unexpected update for round {rnd} from {client_id!r} "
                    f"in phase {self.state.phase}/{self.state.round}"
                )
            if client_id not in self.state.pending:
                raise FederationError(f"duplicate update from {client_id!r} in round {rnd}")
            if update.params.schema() != self.shared_schema:
                raise SchemaMismatchError(f"update schema mismatch from {client_id!r}")
            self._updates[client_id] = update.params
            self.state.pending.discard(client_id)
            if not self.state.pending:
                # Barrier transition: last update of the round aggregates.
                self._set_phase(PHASE_AGGREGATING, rnd)
                ordered = [
                    (cid, self._updates[cid])
                    for cid in self.plan.client_order()
                    if cid in self._updates
                ]
                global_shared = fedavg(ordered, self.plan)
                self._updates.clear()
                self.state.global_shared = global_shared
                self.result.global_history.append(global_shared)
                self.result.metrics_history.append({})
                if rnd == self.schedule.total_rounds:
                    self._set_phase(PHASE_FINISHED, rnd)
                else:
                    self._set_phase(PHASE_AWAITING_UPDATES, rnd + 1)
                    self.state.pending = set(self.expected)
                self._cond.notify_all()
            else:
                self._wait_for(lambda: len(self.result.global_history) >= rnd)
            return self.result.global_history[rnd - 1]

    def submit_metrics(self, msg: Metrics) -> None:
        with self._cond:
            self._check_error()
            report = MetricsReport(
                precision=msg.precision,
                recall=msg.recall,
                f1=msg.f1,
                tp=msg.tp,
                fp=msg.fp,
                fn=msg.fn,
                round=msg.round,
                client_id=msg.client_id,
            )
            self.result.metrics_history[msg.round - 1][msg.client_id] = report


def serve_connection(coordinator: FederationCoordinator, channel) -> None:
    """Serve one client connection through the whole federation."""
    try:
        _serve_connection(coordinator, channel)
    finally:
        channel.close()


def _serve_connection(coordinator: FederationCoordinator, channel) -> None:
    try:
        channel.send(InitModel(coordinator.init_params))
        registration = channel.recv()
        if not isinstance(registration, WeightUpdate) or registration.round != 1:
            raise FederationError("expected a round-1 registration WeightUpdate")
        client_id = coordinator.register(registration)
        schedule = coordinator.schedule
        for rnd in range(1, schedule.total_rounds + 1):
            epochs = epochs_for(schedule, rnd, client_id)
            coordinator.log_request(rnd, client_id, epochs)
            channel.send(TrainRequest(rnd, epochs))
            reply = channel.recv()
            if not isinstance(reply, WeightUpdate):
                raise FederationError(
                    f"expected WeightUpdate from {client_id!r}, got {type(reply).__name__}"
                )
            if reply.client_id != client_id:
                raise FederationError(
                    f"connection registered as {client_id!r} sent an update "
                    f"for {reply.client_id!r}"
                )
            global_shared = coordinator.submit_update(reply)
            channel.send(GlobalUpdate(rnd, global_shared))
            metrics = channel.recv()
            if not isinstance(metrics, Metrics) or metrics.round != rnd:
                raise FederationError(f"expected Metrics({rnd}) from {client_id!r}")
            coordinator.submit_metrics(metrics)
        channel.send(Done())
    except BaseException as exc:
        coordinator.fail(exc)
        raise


def _run_threads(threads: list[threading.Thread], errors: list[BaseException]) -> None:
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        primary = next(
            (e for e in errors if not isinstance(e, FederationError)), errors[0]
        )
        raise FederationError(f"federated run failed: {primary}") from primary


def _spawn(target, errors: list[BaseException], name: str) -> threading.Thread:
    def wrapper():
        try:
            target()
        except BaseException as exc:  # noqa: BLE001 - collected and re-raised
            errors.append(exc)

    return threading.Thread(target=wrapper, name=name, daemon=True)


def run_federation(
    init_params: NamedParameterSet,
    plan: AggregationPlan,
    schedule: RoundSchedule,
    clients: list[FederatedClient],
    transport: str = "inproc",
    listen: tuple[str, int] = ("127.0.0.1", 0),
    external_ids: tuple[str, ...] = (),
) -> FederationResult:
    """Run a full federation and return its per-round history.

    Built-in ``clients`` run on threads in this process. With the TCP
    transport, ``external_ids`` names additional clients expected to connect
    to ``listen`` from outside (for example a bridge process).
    """
    expected = [c.client_id for c in clients] + list(external_ids)
    if len(set(expected)) != len(expected):
        raise ValueError(f"duplicate client ids: {expected}")
    if not expected:
        raise ValueError("at least one client is required")
    if external_ids and transport != "tcp":
        raise ValueError("external clients require the tcp transport")
    coordinator = FederationCoordinator(init_params, plan, schedule, expected)
    errors: list[BaseException] = []
    threads: list[threading.Thread] = []

    if transport == "inproc":
        for client in clients:
            server_end, client_end = inproc_pair()
            threads.append(
                _spawn(lambda s=server_end: serve_connection(coordinator, s), errors,
                       f"serve-{client.client_id}")
            )
            threads.append(
                _spawn(lambda c=client, ch=client_end: _client_session(c, ch), errors,
                       f"client-{client.client_id}")
            )
    elif transport == "tcp":
        listener = socket.create_server(listen)
        listener.settimeout(RECV_TIMEOUT)
        host, port = listener.getsockname()[:2]

        def accept_loop():
            accepted = []
            try:
                for _ in range(len(expected)):
                    conn, _addr = listener.accept()
                    accepted.append(conn)
                    channel = SocketChannel(conn)
                    thread = _spawn(
                        lambda ch=channel: serve_connection(coordinator, ch),
                        errors,
                        "serve-tcp",
                    )
                    threads.append(thread)
                    thread.start()
            finally:
                listener.close()

        acceptor = _spawn(accept_loop, errors, "acceptor")
        acceptor.start()
        client_threads = []
        for client in clients:
            def connect_and_run(c=client):
                sock = socket.create_connection((host, port), timeout=RECV_TIMEOUT)
                _client_session(c, SocketChannel(sock))

            client_threads.append(_spawn(connect_and_run, errors, f"client-{client.client_id}"))
        for t in client_threads:
            t.start()
        acceptor.join()
        for t in client_threads + threads:
            t.join()
        if errors:
            primary = next(
                (e for e in errors if not isinstance(e, FederationError)), errors[0]
            )
            raise FederationError(f"federated run failed: {primary}") from primary
        _finalize(coordinator)
        return coordinator.result
    else:
        raise ValueError(f"unknown transport {transport!r}")

    _run_threads(threads, errors)
    _finalize(coordinator)
    return coordinator.result


def _client_session(client: FederatedClient, channel) -> None:
    try:
        client.run(channel)
    finally:
        channel.close()


def _finalize(coordinator: FederationCoordinator) -> None:
    result = coordinator.result
    if len(result.global_history) != coordinator.schedule.total_rounds:
        raise FederationError(
            f"run ended after {len(result.global_history)} of "
            f"{coordinator.schedule.total_rounds} rounds"
        )
    for rnd, reports in enumerate(result.metrics_history, start=1):
        missing = set(coordinator.expected) - set(reports)
        if missing:
            raise FederationError(f"missing metrics for round {rnd} from {sorted(missing)}")


