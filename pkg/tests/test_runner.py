import csv
import io
import itertools
import json
import math

import numpy as np
import pytest
from test_config_cli import TINY

from f2dc.config import parse_config
from f2dc.errors import InvariantViolation
from f2dc.evaluation import RoundReport, avg_std
from f2dc.runner import check_report, run_experiment

BASE = parse_config(TINY)


def rows(csv_text):
    return list(csv.DictReader(io.StringIO(csv_text)))


def test_zero_rounds_reports_only_initial_state(tmp_path):
    res = run_experiment(BASE.with_overrides(rounds=0, output_dir=str(tmp_path)))
    assert res.reports == [] and rows(res.csv_text) == []
    assert res.summary["final"]["round"] == 0
    assert res.summary["final"]["avg"] == res.summary["initial"]["avg"]
    assert json.loads((tmp_path / "summary.json").read_text())["rounds"] == []


def test_csv_schema_and_summary(tmp_path):
    res = run_experiment(BASE.with_overrides(rounds=3, output_dir=str(tmp_path)))
    header = res.csv_text.splitlines()[0].split(",")
    assert header == ["round", "domain", "accuracy", "avg", "std"] + [f"weight_{k}" for k in range(4)] + ["seconds"]
    table = rows(res.csv_text)
    assert len(table) == 3 * 2
    assert all(math.isfinite(float(v)) for r in table for v in r.values())
    last = [float(r["accuracy"]) for r in table if r["round"] == "3"]
    avg, std = avg_std(last)
    assert abs(avg - res.summary["final"]["avg"]) <= 1e-9 and abs(std - res.summary["final"]["std"]) <= 1e-9
    assert (tmp_path / "rounds.csv").read_text() == res.csv_text


def test_rerun_is_byte_identical(tmp_path):
    a = run_experiment(BASE.with_overrides(output_dir=str(tmp_path / "a")))
    b = run_experiment(BASE.with_overrides(output_dir=str(tmp_path / "b")))
    c = run_experiment(BASE.with_overrides(output_dir=str(tmp_path / "c"), workers=3))
    assert (tmp_path / "a/rounds.csv").read_bytes() == (tmp_path / "b/rounds.csv").read_bytes()
    assert (tmp_path / "a/rounds.csv").read_bytes() == (tmp_path / "c/rounds.csv").read_bytes()
    assert a.summary["final"] == b.summary["final"] == c.summary["final"]


def test_seconds_column_is_opt_in():
    res = run_experiment(BASE.with_overrides(rounds=1, record_seconds=True), write=False)
    assert all(float(r["seconds"]) > 0 for r in rows(res.csv_text))
    res = run_experiment(BASE.with_overrides(rounds=1), write=False)
    assert all(float(r["seconds"]) == 0 for r in rows(res.csv_text))


def test_all_switches_off_reproduces_fedavg():
    fedavg = run_experiment(BASE.with_overrides(mode="fedavg"), write=False)
    off = run_experiment(BASE.with_overrides(dfd_on=False, dfc_on=False, daa_on=False), write=False)
    assert off.csv_text == fedavg.csv_text


@pytest.mark.parametrize("dfd,dfc,daa", [s for s in itertools.product([False, True], repeat=3) if s[0] or not s[1]])
def test_ablation_lattice_runs_deterministically(dfd, dfc, daa):
    cfg = BASE.with_overrides(rounds=1, dfd_on=dfd, dfc_on=dfc, daa_on=daa)
    first = run_experiment(cfg, write=False)
    assert first.csv_text == run_experiment(cfg, write=False).csv_text
    assert abs(sum(first.reports[0].weights) - 1) <= 1e-12


@pytest.mark.parametrize("protocol", ["f+", "f-", "f*", "f~"])
def test_feature_protocols_are_reported(protocol):
    res = run_experiment(BASE.with_overrides(rounds=1, protocol=protocol), write=False)
    fp = res.summary["feature_protocol"]
    assert fp["protocol"] == protocol and all(0 <= a <= 1 for a in fp["domain_accuracy"])


def test_check_report_rejects_inconsistent_reports():
    good = RoundReport(1, [0.5, 0.7], 0.6, 0.1, [0.5, 0.5], selected=[0, 1])
    check_report(good, 2)
    for bad in (RoundReport(1, [0.5, 0.7], 0.65, 0.1, [0.5, 0.5], selected=[0, 1]),
                RoundReport(1, [0.5, 1.7], 1.1, 0.6, [0.5, 0.5], selected=[0, 1]),
                RoundReport(1, [0.5, 0.7], 0.6, 0.1, [0.6, 0.5], selected=[0, 1]),
                RoundReport(1, [0.5], 0.5, 0.0, [0.5, 0.5], selected=[0, 1])):
        with pytest.raises(InvariantViolation):
            check_report(bad, 2)
    assert np.isclose(good.avg, 0.6)
