"""Experiment matrix wiring, config round trips, CSV outputs, CLI."""

import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from fedbox import ClientProfile, load_dataset
from fedbox.cli import main as cli_main
from fedbox.errors import ConfigError
from fedbox.experiments import (
    EXPERIMENT_IDS,
    ExperimentConfig,
    builtin_plan,
    component_seed,
    desk_schedule,
    paper_schedule,
    run_experiment,
    run_matrix,
)
from fedbox.params import ROLE_STATISTIC
from fedbox.protocol import RoundSchedule


def tiny_profiles() -> tuple[ClientProfile, ClientProfile]:
    return (
        ClientProfile("client1", 4, (2, 3), 0.35, 0.12, max_boxes_per_image=3,
                      test_fraction=0.25),
        ClientProfile("client2", 6, (3, 4), 0.55, 0.08, max_boxes_per_image=1,
                      test_fraction=0.25, correlated_frames=True),
    )


def tiny_config(experiment_id="proposed", seed=5, **kwargs) -> ExperimentConfig:
    fields = dict(
        experiment_id=experiment_id,
        seed=seed,
        profiles=tiny_profiles(),
        schedule=RoundSchedule(
            total_rounds=2,
            epochs_per_round={"client1": 1, "client2": 1},
            warmup_epochs={"client1": 2, "client2": 1},
        ),
        local_epochs={"client1": 2, "client2": 1},
    )
    fields.update(kwargs)
    return ExperimentConfig(**fields)


# -- built-in matrix ------------------------------------------------------------

def test_builtin_plan_proposed():
    plan = builtin_plan("proposed")
    assert [(w.client_id, w.coefficient) for w in plan.weights] == [
        ("client1", 1.0),
        ("client2", 6.0),
    ]
    assert plan.filter.include_prefixes == ("backbone.",)
    assert plan.filter.exclude_roles == frozenset()
    assert plan.normalize is True


def test_builtin_plan_fl1_shares_everything():
    plan = builtin_plan("fl1")
    assert plan.filter.include_prefixes == ()
    assert plan.filter.exclude_roles == frozenset()
    assert [(w.client_id, w.coefficient) for w in plan.weights] == [
        ("client1", 1.0),
        ("client2", 6.0),
    ]


def test_builtin_plan_fl2_equal_contribution():
    plan = builtin_plan("fl2")
    assert [(w.client_id, w.coefficient) for w in plan.weights] == [
        ("client1", 1.0),
        ("client2", 1.0),
    ]
    assert plan.filter.include_prefixes == ("backbone.",)


def test_builtin_plan_fl3_excludes_statistics():
    plan = builtin_plan("fl3")
    assert plan.filter.include_prefixes == ("backbone.",)
    assert plan.filter.exclude_roles == frozenset({ROLE_STATISTIC})
    assert [(w.client_id, w.coefficient) for w in plan.weights] == [
        ("client1", 1.0),
        ("client2", 6.0),
    ]


def test_builtin_plan_local_has_no_plan():
    with pytest.raises(ConfigError):
        builtin_plan("local")


# -- config ------------------------------------------------------------------------

def test_default_schedules():
    desk = desk_schedule()
    assert desk.total_rounds == 20
    paper = paper_schedule()
    assert paper.epochs_per_round == {"client1": 20, "client2": 4}
    assert paper.warmup_epochs == {"client1": 40, "client2": 16}
    config = ExperimentConfig(paper_schedule=True)
    assert config.schedule == paper
    assert config.local_epochs == {"client1": 200, "client2": 50}


def test_config_json_round_trip():
    config = tiny_config(seed=19, transport="tcp", listen="127.0.0.1:7171")
    data = json.loads(json.dumps(config.to_json()))
    assert ExperimentConfig.from_json(data) == config
    # And for a defaults-only config.
    default = ExperimentConfig()
    assert ExperimentConfig.from_json(json.loads(json.dumps(default.to_json()))) == default


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(experiment_id="nope")
    with pytest.raises(ConfigError):
        ExperimentConfig(transport="carrier-pigeon")
    with pytest.raises(ConfigError):
        tiny_config(local_epochs={"client1": 2})  # missing client2


def test_component_seed_stable_and_distinct():
    a = component_seed(7, "data", "client1")
    b = component_seed(7, "data", "client1")
    assert np.random.default_rng(a).integers(1 << 30) == np.random.default_rng(b).integers(1 << 30)
    c = component_seed(7, "data", "client2")
    assert np.random.default_rng(a).integers(1 << 30) != np.random.default_rng(c).integers(1 << 30)


# -- runs ---------------------------------------------------------------------------

def test_local_experiment_runs_without_server(tmp_path):
    result = run_experiment(tiny_config("local"), out_dir=tmp_path)
    assert result.federation is None
    assert result.best_round is None
    assert len(result.metrics_history) == 1
    assert {row.client_id for row in result.summary} == {"client1", "client2"}
    assert all(row.round == "-" for row in result.summary)
    rows = list(csv.DictReader(open(tmp_path / "rounds.csv")))
    assert len(rows) == 2 and rows[0]["round"] == "0"


def test_federated_experiment_summary_uses_best_round(tmp_path):
    result = run_experiment(tiny_config("proposed"), out_dir=tmp_path)
    assert result.federation is not None
    assert len(result.metrics_history) == 2
    assert result.best_round in (1, 2)
    for row in result.summary:
        report = result.metrics_history[result.best_round - 1][row.client_id]
        assert row.recall == report.recall
        assert row.round == str(result.best_round)
    assert set(result.best_round_per_client) == {"client1", "client2"}
    lock = json.loads((tmp_path / "config.lock.json").read_text())
    assert lock["experiment"] == "proposed"
    rows = list(csv.DictReader(open(tmp_path / "rounds.csv")))
    assert len(rows) == 4  # 2 rounds x 2 clients
    assert [r["round"] for r in rows] == ["1", "1", "2", "2"]


def test_matrix_outputs_and_deltas(tmp_path):
    results, comparison = run_matrix(tiny_config(), out_root=tmp_path)
    assert set(results) == set(EXPERIMENT_IDS)
    for experiment_id in EXPERIMENT_IDS:
        assert (tmp_path / experiment_id / "summary.csv").exists()
        assert (tmp_path / experiment_id / "rounds.csv").exists()
    rows = list(csv.DictReader(open(tmp_path / "comparison.csv")))
    assert len(rows) == 10  # 5 experiments x 2 clients
    local = {r["client_id"]: r for r in rows if r["experiment"] == "local"}
    for row in rows:
        if row["experiment"] == "local":
            assert row["delta_recall"] == ""
            continue
        expected = float(row["recall"]) - float(local[row["client_id"]]["recall"])
        assert abs(float(row["delta_recall"]) - expected) < 0.011  # 2-decimal rounding
    summary_rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert [r["experiment"] for r in summary_rows[::2]] == list(EXPERIMENT_IDS)


def test_matrix_reruns_byte_identical(tmp_path):
    run_matrix(tiny_config(), out_root=tmp_path / "a")
    run_matrix(tiny_config(), out_root=tmp_path / "b")
    for name in ("summary.csv", "comparison.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -- CLI ----------------------------------------------------------------------------

def write_config(tmp_path) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config().to_json()))
    return str(path)


def test_cli_run_and_report(tmp_path, capsys):
    config_path = write_config(tmp_path)
    out = tmp_path / "out"
    assert cli_main([
        "run", "--experiment", "fl2", "--config", config_path,
        "--seed", "9", "--out", str(out),
    ]) == 0
    printed = capsys.readouterr().out
    assert "fl2" in printed and "best round" in printed
    lock = json.loads((out / "config.lock.json").read_text())
    assert lock["experiment"] == "fl2" and lock["seed"] == 9
    assert cli_main(["report", "--in", str(out)]) == 0
    assert "summary.csv" in capsys.readouterr().out


def test_cli_paper_schedule_flag_overrides(tmp_path):
    config_path = write_config(tmp_path)
    from fedbox.cli import build_parser, _load_config

    args = build_parser().parse_args(
        ["run", "--config", config_path, "--paper-schedule", "--out", "unused"]
    )
    config = _load_config(args)
    assert config.schedule == paper_schedule()
    assert config.local_epochs == {"client1": 200, "client2": 50}


def test_cli_export_data(tmp_path):
    config_path = write_config(tmp_path)
    out = tmp_path / "data"
    assert cli_main(["export-data", "--config", config_path, "--out", str(out)]) == 0
    client_id, dataset = load_dataset(out / "client1.dat")
    assert client_id == "client1"
    assert len(dataset.train) > 0 and len(dataset.test) > 0


def test_cli_matrix(tmp_path, capsys):
    config_path = write_config(tmp_path)
    out = tmp_path / "matrix"
    assert cli_main(["matrix", "--config", config_path, "--out", str(out)]) == 0
    assert (out / "comparison.csv").exists()
    assert "comparison.csv" in capsys.readouterr().out
