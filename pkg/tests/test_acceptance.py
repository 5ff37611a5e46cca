"""Acceptance gate: eight criteria, each printed as one PASS/FAIL line.

Criteria 5-8 train the desk-scale federation (8 clients, 4 domains, 4 classes,
30 rounds of 2 local epochs) for three seeds in both modes, so this module
takes roughly ten to fifteen minutes on one CPU core.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
from toy import Toy

from f2dc import dfd
from f2dc.config import load_config
from f2dc.data import build_partition
from f2dc.federation import (ClientState, LocalHyper, RoundSettings, aggregation_weights, domain_discrepancy,
                             init_server, run_round)
from f2dc.model import ModelConfig, build_shared
from f2dc.numerics import check_gradients, tensor
from f2dc.runner import feature_protocol_accuracy, run_experiment

DESK = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.ini")
SEEDS = (0, 1, 2)
SIGMAS = (0.01, 0.05, 0.1, 0.3, 0.5, 1.0, 5.0)


# ------------------------------------------------------------------ 1

def test_criterion_1_gradient_oracle(verdict):
    start = time.perf_counter()
    toy = Toy(seed=0)
    params = [p for group in toy.groups().values() for p in group]
    errors = check_gradients(toy.loss, params, step=1e-5)
    worst = max(errors.values())
    elapsed = time.perf_counter() - start
    verdict(1, "total-loss gradients vs central differences", worst < 1e-4 and elapsed < 60,
            f"max rel err {worst:.2e} over {len(params)} tensors (< 1e-4), {elapsed:.1f}s (< 60s)")


# ------------------------------------------------------------------ 2

def test_criterion_2_closed_forms(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_d = worst_p = 0.0
    simplex = True
    for _ in range(1000):
        k = int(rng.integers(1, 16))
        sizes = [int(v) for v in rng.integers(1, 1000, k)]
        total = sum(sizes)
        c, q = int(rng.integers(1, 12)), int(rng.integers(1, 8))
        alpha, beta = float(rng.uniform(0, 5)), float(rng.uniform(0, 5))
        d = [domain_discrepancy(n, total, c, q) for n in sizes]
        direct_d = [math.sqrt(0.5 * sum((n / total - 1 / q) ** 2 for _ in range(c))) for n in sizes]
        worst_d = max(worst_d, max(abs(a - b) for a, b in zip(d, direct_d)))
        p = aggregation_weights(sizes, d, alpha, beta)
        scores = [1 / (1 + math.exp(-(alpha * n / total - beta * dk))) for n, dk in zip(sizes, d)]
        direct_p = [s / sum(scores) for s in scores]
        worst_p = max(worst_p, max(abs(a - b) for a, b in zip(p, direct_p)))
        simplex &= bool(np.all(p > 0)) and abs(p.sum() - 1) <= 1e-12
    elapsed = time.perf_counter() - start
    ok = worst_d <= 1e-12 and worst_p <= 1e-12 and simplex and elapsed < 5
    verdict(2, "discrepancy and aggregation weights vs direct evaluation", ok,
            f"max |d err| {worst_d:.1e}, max |p err| {worst_p:.1e} (<= 1e-12), simplex {simplex}, {elapsed:.2f}s")


# ------------------------------------------------------------------ 3

def _two_exponential(s, sigma, ga, gb):
    a = (-np.logaddexp(0.0, -s) + ga) / sigma
    b = (-np.logaddexp(0.0, s) + gb) / sigma
    return np.exp(a - np.logaddexp(a, b))


def test_criterion_3_structural_identities(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    recon = form = 0.0
    inside = never_y = True
    for trial in range(200):
        f = rng.standard_normal((4, 8, 4, 4))
        s = rng.uniform(-20, 20, f.shape)
        ga, gb = dfd.sample_gumbel(f.shape, rng), dfd.sample_gumbel(f.shape, rng)
        sigma = SIGMAS[trial % len(SIGMAS)]
        mask = dfd.gumbel_mask(tensor(s), sigma, ga, gb)
        m = mask.values.data
        inside &= bool(np.all((m > 0) & (m < 1)))
        form = max(form, float(np.max(np.abs(m - _two_exponential(s, sigma, ga, gb)))))
        parts = dfd.decouple(tensor(f), mask)
        recon = max(recon, float(np.max(np.abs(parts.robust.data + parts.related.data - f))))
        classes = int(rng.integers(2, 11))
        logits = rng.choice([-1.0, 0.0, 1.0], size=(64, classes)) if trial % 2 else rng.standard_normal((64, classes))
        y = rng.integers(0, classes, 64)
        never_y &= bool(np.all(dfd.select_wrong_label(logits, y) != y))
    elapsed = time.perf_counter() - start
    ok = recon <= 1e-15 and form <= 1e-10 and inside and never_y and elapsed < 10
    verdict(3, "reconstruction, mask forms, mask range, wrong label", ok,
            f"recon err {recon:.1e}, form err {form:.1e} (<= 1e-10), M in (0,1) {inside}, "
            f"y never chosen {never_y}, {elapsed:.2f}s")


# ------------------------------------------------------------------ shared desk runs

@pytest.fixture(scope="session")
def desk_runs():
    runs, seconds = {}, {}
    for mode in ("fedavg", "f2dc"):
        start = time.perf_counter()
        for seed in SEEDS:
            cfg = DESK.with_overrides(mode=mode, seed=seed, spectrum=True)
            runs[mode, seed] = run_experiment(cfg, write=False)
        seconds[mode] = time.perf_counter() - start
    return runs, seconds


# ------------------------------------------------------------------ 4

def test_criterion_4_symmetry_and_degeneracy(verdict, desk_runs):
    cfg = ModelConfig(num_classes=4, dtype="float32")
    part = build_partition(4, 2, 4, 16, seed=0, test_size=16)
    x, y = part.clients[0].x, part.clients[0].y
    twins = [ClientState(k, k % 2, x, y, cfg, 0) for k in range(4)]
    server = init_server(cfg, 2, 0)
    ev = build_shared(cfg, np.random.default_rng(0))
    _, report = run_round(server, twins, RoundSettings(epochs=1, hyper=LocalHyper(batch_size=8)), part.tests, ev)
    uniform = float(np.max(np.abs(np.array(report.weights) - 0.25)))

    frozen = True
    for mode in ("f2dc", "fedavg"):
        for settings in (RoundSettings(mode=mode, epochs=0), RoundSettings(mode=mode, hyper=LocalHyper(lr=0.0))):
            clients = [ClientState(c.client_id, c.domain, c.x, c.y, cfg, 0) for c in part.clients]
            after, _ = run_round(server, clients, settings, part.tests, ev)
            frozen &= all(after.params[n].tobytes() == server.params[n].tobytes() for n in server.params)

    runs, _ = desk_runs
    off = run_experiment(DESK.with_overrides(seed=0, dfd_on=False, dfc_on=False, daa_on=False), write=False)
    same = off.csv_text.encode() == runs["fedavg", 0].csv_text.encode()
    ok = uniform <= 1e-12 and frozen and same
    verdict(4, "identical clients, no-op rounds, switches-off equals fedavg", ok,
            f"max |p - 1/K| {uniform:.1e}, E=0/lr=0 bit-exact {frozen}, seed-0 run log byte-identical {same}")


# ------------------------------------------------------------------ 5

def test_criterion_5_directional_accuracy(verdict, desk_runs):
    runs, seconds = desk_runs
    avg = {m: float(np.mean([runs[m, s].summary["final"]["avg"] for s in SEEDS])) for m in ("f2dc", "fedavg")}
    std = {m: float(np.mean([runs[m, s].summary["final"]["std"] for s in SEEDS])) for m in ("f2dc", "fedavg")}
    gap = 100 * (avg["f2dc"] - avg["fedavg"])
    ok = gap >= 2.0 and std["f2dc"] <= std["fedavg"] and max(seconds.values()) < 600
    verdict(5, "F2DC vs FedAvg over 3 seeds", ok,
            f"AVG {100 * avg['f2dc']:.2f} vs {100 * avg['fedavg']:.2f} (gap {gap:+.2f}, need >= +2.00); "
            f"STD {100 * std['f2dc']:.2f} vs {100 * std['fedavg']:.2f} (need <=); "
            f"runtime f2dc {seconds['f2dc']:.0f}s, fedavg {seconds['fedavg']:.0f}s (< 600s)")


# ------------------------------------------------------------------ 6

def test_criterion_6_collapse_diagnostic(verdict, desk_runs):
    runs, _ = desk_runs
    counts = [(runs["f2dc", s].summary["near_zero"], runs["fedavg", s].summary["near_zero"]) for s in SEEDS]
    wins = sum(a < b for a, b in counts)
    verdict(6, "fewer near-zero singular values for F2DC", wins >= 2,
            f"(f2dc, fedavg) near-zero counts per seed {counts}; strict wins {wins}/3 (need >= 2)")


# ------------------------------------------------------------------ 7

def test_criterion_7_feature_protocols(verdict, desk_runs):
    runs, _ = desk_runs
    acc = {}
    for protocol in ("f+", "f-", "f*", "f~"):
        per_seed = []
        for s in SEEDS:
            r = runs["f2dc", s]
            per_seed.append(np.mean(feature_protocol_accuracy(r.clients, r.server, r.partition, protocol,
                                                              DESK.sigma, DESK.dfc_on)))
        acc[protocol] = float(np.mean(per_seed))
    ok = acc["f+"] > acc["f-"] and acc["f~"] >= acc["f*"]
    verdict(7, "feature-protocol ordering", ok,
            f"acc(f+) {100 * acc['f+']:.2f} vs acc(f-) {100 * acc['f-']:.2f} (need >); "
            f"acc(f~) {100 * acc['f~']:.2f} vs acc(f*) {100 * acc['f*']:.2f} (need >=)")


# ------------------------------------------------------------------ 8

def test_criterion_8_determinism(verdict, desk_runs):
    runs, _ = desk_runs
    reference = runs["f2dc", 0].csv_text.encode()
    serial = run_experiment(DESK.with_overrides(mode="f2dc", seed=0, spectrum=True), write=False).csv_text.encode()
    parallel = run_experiment(DESK.with_overrides(mode="f2dc", seed=0, spectrum=True, workers=4),
                              write=False).csv_text.encode()
    ok = serial == reference and parallel == reference
    verdict(8, "byte-identical CSV across reruns", ok,
            f"serial rerun identical {serial == reference}, 4-worker rerun identical {parallel == reference} "
            f"({len(reference)} bytes)")
