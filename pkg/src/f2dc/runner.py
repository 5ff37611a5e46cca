"""Run a full experiment: data, clients, R rounds, reports on disk."""
from __future__ import annotations

import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Partition, build_partition, default_domains
from .errors import InvariantViolation
from .evaluation import RoundReport, avg_std, collapse_spectrum, evaluate_feature_protocol, evaluate_global
from .federation import ClientState, LocalHyper, RoundSettings, ServerState, init_server, run_round
from .model import ModelConfig, build_shared

log = logging.getLogger(__name__)

CSV_NAME = "rounds.csv"
SUMMARY_NAME = "summary.json"


@dataclass
class RunResult:
    reports: list[RoundReport]
    summary: dict
    csv_text: str
    server: ServerState
    clients: list[ClientState] = field(repr=False)
    partition: Partition = field(repr=False)


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(num_classes=cfg.num_classes, image_size=cfg.image_size, channels=tuple(cfg.channels),
                       pool_after=(True, True, False), attach_layers=tuple(cfg.attach_layers), dtype=cfg.dtype)


def round_settings(cfg: ExperimentConfig) -> RoundSettings:
    hyper = LocalHyper(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.sigma, cfg.tau,
                       cfg.lambda1, cfg.lambda2, cfg.dfd_on, cfg.dfc_on)
    return RoundSettings(cfg.mode, cfg.local_epochs, hyper, cfg.alpha, cfg.beta, cfg.daa_on,
                         cfg.participation, cfg.seed, cfg.spectrum)


def check_report(report: RoundReport, num_domains: int) -> None:
    """Raise :class:`InvariantViolation` if a round report is internally inconsistent."""
    acc = np.asarray(report.domain_accuracy)
    w = np.asarray(report.weights)
    if len(acc) != num_domains:
        raise InvariantViolation(f"round {report.round}: {len(acc)} accuracies for {num_domains} domains")
    if not np.all(np.isfinite(acc)) or np.any(acc < 0) or np.any(acc > 1):
        raise InvariantViolation(f"round {report.round}: accuracy outside [0, 1]")
    if report.selected:
        if not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-12 or np.any(w[report.selected] <= 0):
            raise InvariantViolation(f"round {report.round}: aggregation weights off the simplex")
    avg, std = avg_std(acc)
    if abs(avg - report.avg) > 1e-9 or abs(std - report.std) > 1e-9:
        raise InvariantViolation(f"round {report.round}: AVG/STD disagree with per-domain accuracy")


def _fmt(x: float) -> str:
    return repr(float(x))


def format_csv(reports: list[RoundReport], num_clients: int, record_seconds: bool) -> str:
    buf = io.StringIO()
    header = ["round", "domain", "accuracy", "avg", "std"] + [f"weight_{k}" for k in range(num_clients)] + ["seconds"]
    buf.write(",".join(header) + "\n")
    for r in reports:
        seconds = _fmt(r.seconds if record_seconds else 0.0)
        weights = [_fmt(w) for w in r.weights]
        for q, acc in enumerate(r.domain_accuracy):
            row = [str(r.round), str(q), _fmt(acc), _fmt(r.avg), _fmt(r.std)] + weights + [seconds]
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def feature_protocol_accuracy(clients: list[ClientState], server: ServerState, partition: Partition,
                              protocol: str, sigma: float, dfc_on: bool) -> list[float]:
    """Per-domain accuracy of ``protocol`` features, averaged over each domain's clients.

    Each client pairs the global shared model with its own private modules
    and is scored on its domain's test set.
    """
    per_domain: dict[int, list[float]] = {}
    for client in clients:
        if not client.private.initialized and protocol != "plain":
            continue
        bundle = client.local_bundle()
        bundle.shared.load_params(server.params)
        bundle.shared.load_buffers(server.buffers)
        test = partition.tests[client.domain]
        per_domain.setdefault(client.domain, []).append(
            evaluate_feature_protocol(bundle, test.x, test.y, protocol, sigma, dfc_on))
    return [float(np.mean(per_domain[q])) if q in per_domain else math.nan
            for q in range(len(partition.tests))]


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    cfg.validate()
    mcfg = model_config(cfg)
    partition = build_partition(cfg.num_clients, cfg.num_domains, cfg.num_classes, cfg.train_size, cfg.seed,
                                cfg.test_size, default_domains(cfg.num_domains, cfg.noise),
                                image_size=cfg.image_size)
    clients = [ClientState(d.client_id, d.domain, d.x, d.y, mcfg, cfg.seed) for d in partition.clients]
    server = init_server(mcfg, cfg.num_domains, cfg.seed)
    eval_model = build_shared(mcfg, np.random.default_rng(0))
    eval_model.load_params(server.params)
    eval_model.load_buffers(server.buffers)
    init_accs, init_avg, init_std = evaluate_global(eval_model, partition.tests)
    settings = round_settings(cfg)

    reports: list[RoundReport] = []
    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for _ in range(cfg.rounds):
            server, report = run_round(server, clients, settings, partition.tests, eval_model, executor)
            check_report(report, cfg.num_domains)
            reports.append(report)
            log.info("round %d avg=%.4f std=%.4f (%.1fs)", report.round, report.avg, report.std, report.seconds)
    finally:
        if executor is not None:
            executor.shutdown()

    summary = {
        "config": cfg.to_dict(),
        "initial": {"domain_accuracy": init_accs, "avg": init_avg, "std": init_std},
    }
    if reports:
        last = reports[-1]
        summary["final"] = {"round": last.round, "domain_accuracy": last.domain_accuracy, "avg": last.avg,
                            "std": last.std, "weights": last.weights}
    else:
        summary["final"] = dict(summary["initial"], round=0)
    if cfg.spectrum:
        spec = collapse_spectrum(eval_model, partition.tests)
        summary["spectrum"] = spec.values.tolist()
        summary["near_zero"] = spec.near_zero
    if cfg.protocol != "plain":
        accs = feature_protocol_accuracy(clients, server, partition, cfg.protocol, cfg.sigma, cfg.dfc_on)
        summary["feature_protocol"] = {"protocol": cfg.protocol, "domain_accuracy": accs,
                                       "avg": float(np.nanmean(accs))}
    summary["rounds"] = [{"round": r.round, "avg": r.avg, "std": r.std, "seconds": r.seconds,
                          "selected": r.selected} for r in reports]

    csv_text = format_csv(reports, cfg.num_clients, cfg.record_seconds)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / CSV_NAME).write_text(csv_text, encoding="utf-8")
        (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, default=_json_default), encoding="utf-8")
    return RunResult(reports, summary, csv_text, server, clients, partition)


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"not JSON serializable: {type(value)}")


def report_dict(report: RoundReport) -> dict:
    return asdict(report)
