"""Configuration-driven experiment runner and its built-in matrix.

Five named experiments cover the ablation grid:

* ``local``    — each client trains alone, no server;
* ``fl1``      — federate the whole model, coefficients 1:6;
* ``fl2``      — federate backbone only, equal coefficients;
* ``fl3``      — backbone only, excluding statistic-role tensors
                 (running statistics stay local), coefficients 1:6;
* ``proposed`` — backbone only, coefficients 1:6.

A run is a pure function of its configuration: every random choice derives
from the single run seed through ``component_seed`` (one child stream per
purpose and client), so re-running a configuration reproduces its CSV
outputs byte for byte.

Desk-scale epoch defaults keep a full matrix in the minutes range; the
``paper_schedule`` flag switches to the reference schedule (20/4 epochs per
round, 40/16 warm-up, 200/50 local baseline epochs).
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .aggregation import SHARE_ALL, AggregationPlan, ClientWeight, FilterRule
from .data import ClientProfile, SplitDataset, default_profiles, generate, save_dataset
from .detector import ToyDetectorConfig, ToyTrainer, init_params
from .errors import ConfigError
from .metrics import MetricsReport, best_round_per_client, percent, select_best_round
from .params import ROLE_STATISTIC, NamedParameterSet
from .protocol import FederatedClient, FederationResult, RoundSchedule, run_federation

EXPERIMENT_IDS = ("local", "fl1", "fl2", "fl3", "proposed")

ROUNDS_CSV_COLUMNS = ["round", "client_id", "precision", "recall", "f1", "tp", "fp", "fn"]
SUMMARY_CSV_COLUMNS = ["experiment", "client_id", "precision", "recall", "f1", "round"]
COMPARISON_CSV_COLUMNS = SUMMARY_CSV_COLUMNS + [
    "delta_precision",
    "delta_recall",
    "delta_f1",
]

BACKBONE_FILTER = FilterRule(include_prefixes=("backbone.",))
BACKBONE_NO_STATS_FILTER = FilterRule(
    include_prefixes=("backbone.",), exclude_roles=frozenset({ROLE_STATISTIC})
)


def component_seed(seed: int, *labels: str) -> np.random.SeedSequence:
    """Documented seed-splitting rule: one child stream per (seed, labels).

    The child entropy is the run seed followed by the CRC-32 of each label,
    so streams are stable across runs and platforms.
    """
    return np.random.SeedSequence(
        entropy=[int(seed)] + [zlib.crc32(label.encode("utf-8")) for label in labels]
    )


def builtin_plan(
    experiment_id: str,
    client_ids: tuple[str, str] = ("client1", "client2"),
    alpha: float = 1.0,
    beta: float = 6.0,
) -> AggregationPlan:
    """The aggregation plan the named experiment mandates."""
    small, large = client_ids
    proportional = (ClientWeight(small, alpha), ClientWeight(large, beta))
    equal = (ClientWeight(small, 1.0), ClientWeight(large, 1.0))
    if experiment_id == "proposed":
        return AggregationPlan(weights=proportional, filter=BACKBONE_FILTER)
    if experiment_id == "fl1":
        return AggregationPlan(weights=proportional, filter=SHARE_ALL)
    if experiment_id == "fl2":
        return AggregationPlan(weights=equal, filter=BACKBONE_FILTER)
    if experiment_id == "fl3":
        return AggregationPlan(weights=proportional, filter=BACKBONE_NO_STATS_FILTER)
    raise ConfigError(f"no aggregation plan for experiment {experiment_id!r}")


def desk_schedule(client_ids: tuple[str, str] = ("client1", "client2")) -> RoundSchedule:
    """Default schedule: half the reference epochs, same 20 rounds."""
    small, large = client_ids
    return RoundSchedule(
        total_rounds=20,
        epochs_per_round={small: 10, large: 2},
        warmup_epochs={small: 20, large: 8},
    )


def paper_schedule(client_ids: tuple[str, str] = ("client1", "client2")) -> RoundSchedule:
    """The reference schedule: 20 rounds, 20/4 epochs, 40/16 warm-up."""
    small, large = client_ids
    return RoundSchedule(
        total_rounds=20,
        epochs_per_round={small: 20, large: 4},
        warmup_epochs={small: 40, large: 16},
    )


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str = "proposed"
    seed: int = 7
    profiles: tuple[ClientProfile, ...] = ()
    detector: ToyDetectorConfig = ToyDetectorConfig()
    schedule: RoundSchedule | None = None
    local_epochs: dict[str, int] | None = None
    batch_size: int = 16
    lr: float = 1e-4
    paper_schedule: bool = False
    transport: str = "inproc"
    listen: str = "127.0.0.1:0"

    def __post_init__(self):
        if self.experiment_id not in EXPERIMENT_IDS:
            raise ConfigError(f"unknown experiment {self.experiment_id!r}")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        object.__setattr__(
            self, "profiles", tuple(self.profiles) or default_profiles()
        )
        if len(self.profiles) != 2:
            raise ConfigError("exactly two client profiles are required")
        ids = self.client_ids()
        if self.schedule is None:
            preset = paper_schedule(ids) if self.paper_schedule else desk_schedule(ids)
            object.__setattr__(self, "schedule", preset)
        if self.local_epochs is None:
            preset = {ids[0]: 200, ids[1]: 50} if self.paper_schedule else {ids[0]: 100, ids[1]: 25}
            object.__setattr__(self, "local_epochs", preset)
        if self.schedule.client_ids() != set(ids):
            raise ConfigError("schedule clients must match the profile client ids")
        if set(self.local_epochs) != set(ids):
            raise ConfigError("local_epochs must cover exactly the profile client ids")

    def client_ids(self) -> tuple[str, str]:
        return tuple(p.client_id for p in self.profiles)  # type: ignore[return-value]

    def plan(self) -> AggregationPlan:
        return builtin_plan(self.experiment_id, self.client_ids())

    # -- JSON round trip -----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "experiment": self.experiment_id,
            "seed": self.seed,
            "profiles": [asdict(p) for p in self.profiles],
            "detector": asdict(self.detector),
            "schedule": {
                "total_rounds": self.schedule.total_rounds,
                "epochs_per_round": dict(self.schedule.epochs_per_round),
                "warmup_epochs": dict(self.schedule.warmup_epochs),
            },
            "local_epochs": dict(self.local_epochs),
            "batch_size": self.batch_size,
            "lr": self.lr,
            "paper_schedule": self.paper_schedule,
            "transport": self.transport,
            "listen": self.listen,
        }

    @staticmethod
    def from_json(data: dict) -> "ExperimentConfig":
        profiles = tuple(
            ClientProfile(
                **{
                    **p,
                    "images_per_patient": tuple(p["images_per_patient"]),
                    "image_size": tuple(p.get("image_size", (32, 32))),
                }
            )
            for p in data.get("profiles", [])
        )
        detector = data.get("detector")
        detector_cfg = (
            ToyDetectorConfig(
                **{
                    **detector,
                    "image_size": tuple(detector["image_size"]),
                    "backbone_widths": tuple(detector["backbone_widths"]),
                    "head_widths": tuple(detector["head_widths"]),
                }
            )
            if detector
            else ToyDetectorConfig()
        )
        schedule = data.get("schedule")
        return ExperimentConfig(
            experiment_id=data.get("experiment", "proposed"),
            seed=data.get("seed", 7),
            profiles=profiles,
            detector=detector_cfg,
            schedule=RoundSchedule(**schedule) if schedule else None,
            local_epochs=dict(data["local_epochs"]) if "local_epochs" in data else None,
            batch_size=data.get("batch_size", 16),
            lr=data.get("lr", 1e-4),
            paper_schedule=data.get("paper_schedule", False),
            transport=data.get("transport", "inproc"),
            listen=data.get("listen", "127.0.0.1:0"),
        )


@dataclass
class SummaryRow:
    experiment: str
    client_id: str
    precision: float
    recall: float
    f1: float
    round: str  # selected round, "-" for local baselines


@dataclass
class ExperimentResult:
    experiment_id: str
    metrics_history: list[dict[str, MetricsReport]]
    summary: list[SummaryRow]
    best_round: int | None
    best_round_per_client: dict[str, int] | None
    federation: FederationResult | None


def build_datasets(config: ExperimentConfig) -> dict[str, SplitDataset]:
    return {
        profile.client_id: generate(
            profile, component_seed(config.seed, "data", profile.client_id)
        )
        for profile in config.profiles
    }


def build_init_params(config: ExperimentConfig) -> NamedParameterSet:
    rng = np.random.default_rng(component_seed(config.seed, "init"))
    return init_params(config.detector, rng)


def _build_trainer(config: ExperimentConfig, client_id: str, init: NamedParameterSet) -> ToyTrainer:
    trainer = ToyTrainer(config.detector, seed=component_seed(config.seed, "train", client_id))
    trainer.set_params(init)
    return trainer


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    snapshot_hooks: dict[str, object] | None = None,
    external_ids: tuple[str, ...] = (),
) -> ExperimentResult:
    """Run one experiment; optionally write rounds/summary CSVs to out_dir."""
    datasets = build_datasets(config)
    init = build_init_params(config)
    ids = config.client_ids()

    if config.experiment_id == "local":
        history_entry: dict[str, MetricsReport] = {}
        for client_id in ids:
            trainer = _build_trainer(config, client_id, init)
            trainer.train_epochs(
                list(datasets[client_id].train),
                config.local_epochs[client_id],
                batch_size=config.batch_size,
                lr=config.lr,
            )
            report = trainer.evaluate(list(datasets[client_id].test))
            history_entry[client_id] = replace(report, round=0, client_id=client_id)
        result = ExperimentResult(
            experiment_id="local",
            metrics_history=[history_entry],
            summary=[
                _summary_row("local", history_entry[cid], "-") for cid in ids
            ],
            best_round=None,
            best_round_per_client=None,
            federation=None,
        )
    else:
        plan = config.plan()
        clients = []
        for client_id in ids:
            if client_id in external_ids:
                continue
            trainer = _build_trainer(config, client_id, init)
            clients.append(
                FederatedClient(
                    client_id,
                    trainer,
                    list(datasets[client_id].train),
                    list(datasets[client_id].test),
                    plan.filter,
                    batch_size=config.batch_size,
                    lr=config.lr,
                    snapshot_hook=(snapshot_hooks or {}).get(client_id),
                )
            )
        host, _, port = config.listen.partition(":")
        federation = run_federation(
            init,
            plan,
            config.schedule,
            clients,
            transport=config.transport,
            listen=(host or "127.0.0.1", int(port or 0)),
            external_ids=external_ids,
        )
        best = select_best_round(federation.metrics_history)
        per_client = best_round_per_client(federation.metrics_history)
        result = ExperimentResult(
            experiment_id=config.experiment_id,
            metrics_history=federation.metrics_history,
            summary=[
                _summary_row(
                    config.experiment_id,
                    federation.metrics_history[best - 1][cid],
                    str(best),
                )
                for cid in ids
            ],
            best_round=best,
            best_round_per_client=per_client,
            federation=federation,
        )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rounds_csv(out / "rounds.csv", result.metrics_history, ids)
        write_summary_csv(out / "summary.csv", result.summary)
        (out / "config.lock.json").write_text(
            json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n"
        )
    return result


def _summary_row(experiment: str, report: MetricsReport, round_display: str) -> SummaryRow:
    return SummaryRow(
        experiment=experiment,
        client_id=report.client_id,
        precision=report.precision,
        recall=report.recall,
        f1=report.f1,
        round=round_display,
    )


def run_matrix(base_config: ExperimentConfig, out_root: str | Path | None = None):
    """All five experiments with a shared seed, plus a comparison table.

    Returns (results by experiment id, comparison rows). Deltas are the FL
    metric minus the local baseline metric, in percentage points.
    """
    results: dict[str, ExperimentResult] = {}
    for experiment_id in EXPERIMENT_IDS:
        config = replace(base_config, experiment_id=experiment_id)
        out_dir = Path(out_root) / experiment_id if out_root is not None else None
        results[experiment_id] = run_experiment(config, out_dir=out_dir)

    local = {row.client_id: row for row in results["local"].summary}
    comparison: list[dict[str, str]] = []
    for experiment_id in EXPERIMENT_IDS:
        for row in results[experiment_id].summary:
            record = {
                "experiment": row.experiment,
                "client_id": row.client_id,
                "precision": percent(row.precision),
                "recall": percent(row.recall),
                "f1": percent(row.f1),
                "round": row.round,
            }
            if experiment_id == "local":
                record.update(delta_precision="", delta_recall="", delta_f1="")
            else:
                base = local[row.client_id]
                record.update(
                    delta_precision=f"{100 * (row.precision - base.precision):+.2f}",
                    delta_recall=f"{100 * (row.recall - base.recall):+.2f}",
                    delta_f1=f"{100 * (row.f1 - base.f1):+.2f}",
                )
            comparison.append(record)

    if out_root is not None:
        out = Path(out_root)
        out.mkdir(parents=True, exist_ok=True)
        write_summary_csv(
            out / "summary.csv",
            [row for eid in EXPERIMENT_IDS for row in results[eid].summary],
        )
        with open(out / "comparison.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=COMPARISON_CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(comparison)
        (out / "config.lock.json").write_text(
            json.dumps(base_config.to_json(), indent=2, sort_keys=True) + "\n"
        )
    return results, comparison


def export_datasets(config: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    """Write each client's dataset to the binary exchange format."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for client_id, dataset in build_datasets(config).items():
        path = out / f"{client_id}.dat"
        save_dataset(dataset, client_id, path)
        paths.append(path)
    return paths


def write_rounds_csv(path, metrics_history, client_ids) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUNDS_CSV_COLUMNS)
        for reports in metrics_history:
            for client_id in client_ids:
                if client_id not in reports:
                    continue
                r = reports[client_id]
                writer.writerow(
                    [r.round, client_id, percent(r.precision), percent(r.recall),
                     percent(r.f1), r.tp, r.fp, r.fn]
                )


def write_summary_csv(path, rows: list[SummaryRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_CSV_COLUMNS)
        for row in rows:
            writer.writerow(
                [row.experiment, row.client_id, percent(row.precision),
                 percent(row.recall), percent(row.f1), row.round]
            )
