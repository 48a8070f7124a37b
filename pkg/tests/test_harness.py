import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gradma import cli
from gradma.flcore import ConfigError, MetricsRow
from gradma.harness import (
    parse_config,
    read_metrics_csv,
    read_summary,
    report,
    rounds_to_accuracy,
    run_experiment,
    spec_from_dict,
    top_accuracy,
    write_config,
    write_metrics_csv,
)

BASE = {
    "eta_l": 0.05, "eta_g": 1.0, "I": 2, "S": 3, "N": 6, "T": 6, "omega": 0.5,
    "strategy": "fedavg", "dataset": "synthetic", "hidden_dims": [6], "batch_size": 16,
    "synthetic_classes": 3, "synthetic_dim": 4, "synthetic_per_class": 40, "synthetic_test_per_class": 10,
    "eval_every": 2,
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def row(t, acc):
    return MetricsRow(t=t, test_accuracy=acc, test_loss=1.0, train_loss=1.0, wall_time=0.0,
                      uplink_bytes=8, downlink_bytes=8)


# -- config ---------------------------------------------------------------------------

def test_missing_eta_g(tmp_path):
    raw = {k: v for k, v in BASE.items() if k != "eta_g"}
    with pytest.raises(ConfigError) as err:
        parse_config(write_json(tmp_path / "c.json", raw))
    assert err.value.key == "eta_g"
    assert "eta_g" in str(err.value)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as err:
        spec_from_dict({**BASE, "learning_rate": 0.1})
    assert err.value.key == "learning_rate"


def test_constraint_violation_names_key():
    with pytest.raises(ConfigError) as err:
        spec_from_dict({**BASE, "strategy": "gradma", "m": 2})
    assert err.value.key == "m"


def test_bad_type_names_key():
    with pytest.raises(ConfigError) as err:
        spec_from_dict({**BASE, "I": 2.5})
    assert err.value.key == "I"


def test_seed_override_supersedes_file(tmp_path):
    path = write_json(tmp_path / "c.json", {**BASE, "seeds": [1, 2, 3]})
    assert parse_config(path).seeds == (1, 2, 3)
    assert parse_config(path, {"seed": 9}).seeds == (9,)
    assert parse_config(path, {"seed": None}).seeds == (1, 2, 3)


def test_strategy_grid_from_comma_list():
    spec = spec_from_dict({**BASE, "strategy": "fedavg, mifa"})
    assert spec.strategies == ("fedavg", "mifa")


def test_config_round_trip(tmp_path):
    spec = spec_from_dict({**BASE, "strategy": ["gradma", "fedavg"], "m": 3, "seeds": [4, 5], "beta1": 0.5})
    write_config(spec, tmp_path / "echo.json")
    assert parse_config(tmp_path / "echo.json") == spec


# -- metrics CSV ----------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    rows = [
        MetricsRow(t=5, test_accuracy=0.1 + 0.2, test_loss=np.pi, train_loss=1e-300, wall_time=0.0,
                   uplink_bytes=12345678, downlink_bytes=12345678, lemma1_residual=1.2345678901234567e-17,
                   qp_g_iterations=7),
        MetricsRow(t=10, test_accuracy=1.0, test_loss=0.0, train_loss=2.5, wall_time=3.25,
                   uplink_bytes=1, downlink_bytes=2),
    ]
    write_metrics_csv(rows, tmp_path / "m.csv")
    assert read_metrics_csv(tmp_path / "m.csv") == rows
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "t,test_accuracy,test_loss,train_loss,wall_time,uplink_bytes,downlink_bytes,lemma1_residual,qp_g_iterations"


def test_csv_rejects_foreign_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics_csv(tmp_path / "x.csv")


def test_rounds_to_accuracy():
    rows = [row(5, 0.1), row(10, 0.5), row(15, 0.9)]
    assert rounds_to_accuracy(rows, 0.0) == 5
    assert rounds_to_accuracy(rows, 1.01) is None
    assert rounds_to_accuracy(rows, 0.5) == 10
    assert top_accuracy(rows) == 0.9
    with pytest.raises(ValueError):
        rounds_to_accuracy([], 0.5)


# -- experiments ----------------------------------------------------------------------

def test_three_seeds_three_csvs_and_summary(tmp_path):
    spec = spec_from_dict({**BASE, "seeds": [0, 1, 2], "out": str(tmp_path)})
    summary = run_experiment(spec)
    assert sorted(p.name for p in tmp_path.glob("*.csv")) == [
        "fedavg_seed0.csv", "fedavg_seed1.csv", "fedavg_seed2.csv", "summary.csv"]
    assert json.loads((tmp_path / "config.json").read_text())["seeds"] == [0, 1, 2]
    # recompute the summary from the persisted rows with the csv module only
    tops = []
    for seed in range(3):
        with open(tmp_path / f"fedavg_seed{seed}.csv", newline="") as f:
            tops.append(max(float(r["test_accuracy"]) for r in csv.DictReader(f)))
    (entry,) = read_summary(tmp_path / "summary.csv")
    assert entry["top_accuracy_mean"] == pytest.approx(np.mean(tops), abs=1e-15)
    assert entry["top_accuracy_std"] == pytest.approx(np.std(tops), abs=1e-15)
    assert summary[0]["seeds"] == "0 1 2"


def test_single_seed_has_zero_std(tmp_path):
    (entry,) = run_experiment(spec_from_dict({**BASE, "out": str(tmp_path)}))
    assert entry["top_accuracy_std"] == 0.0


def test_rerun_is_byte_identical(tmp_path):
    spec = spec_from_dict({**BASE, "strategy": ["gradma", "mifam"], "m": 3, "beta1": 0.5, "beta2": 0.5,
                           "out": str(tmp_path)})
    run_experiment(spec)
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    run_experiment(spec)
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == first


def test_diverging_seed_marked_failed(tmp_path):
    spec = spec_from_dict({**BASE, "eta_l": 1e6, "eta_g": 1e6, "strategy": "fedavgm", "T": 40,
                           "seeds": [0], "out": str(tmp_path)})
    with np.errstate(all="ignore"):
        (entry,) = run_experiment(spec)
    assert entry["failed_seeds"] == "0" and entry["top_accuracy_mean"] is None


def test_report_table(tmp_path):
    write_metrics_csv([row(1, 0.2), row(2, 0.7)], tmp_path / "gradma_seed3.csv")
    (entry,) = report(tmp_path, [0.5, 0.9])
    assert entry["strategy"] == "gradma" and entry["seed"] == 3
    assert entry[0.5] == 2 and entry[0.9] is None


# -- CLI ---------------------------------------------------------------------------------

def test_cli_run_and_report(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", BASE)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg), "--seed", "3", "--strategy", "fedavg,fedavgm",
                     "--out", str(out), "--eval-every", "3", "--set", "beta1=0.4"]) == 0
    assert (out / "fedavgm_seed3.csv").exists()
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["beta1"] == 0.4 and echoed["eval_every"] == 3 and echoed["seeds"] == [3]
    assert [r.t for r in read_metrics_csv(out / "fedavg_seed3.csv")] == [3, 6]
    capsys.readouterr()
    assert cli.main(["report", str(out), "--target", "0.0", "1.5"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t") == ["strategy", "seed", "top_acc", ">=0", ">=1.5"]
    assert lines[1].split("\t")[3:] == ["3", "--"]


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {k: v for k, v in BASE.items() if k != "eta_g"})
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert "eta_g" in capsys.readouterr().err


def test_cli_report_empty_dir(tmp_path):
    assert cli.main(["report", str(tmp_path)]) == 1


def test_cli_selftest_via_module():
    proc = subprocess.run([sys.executable, "-m", "gradma", "selftest"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert proc.stdout.count("PASS") == 5
