"""Per-round evaluation and accounting: macro-F1, work units, parametric energy.

Energy is a declared linear model, not a measurement: c_train per
(sample x epoch) trained, c_agg per parameter entering an aggregation,
c_comm per byte sent. Only ratios between runs are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MetricError
from .netsim import TrafficLedger


@dataclass(frozen=True)
class MetricsRecord:
    """One client's view of one round."""

    round: int
    client: int
    f1: float
    bytes_sent: int
    bytes_received: int
    action: str
    samples_trained: int  # samples x epochs this round (0 when the client sat out)
    models_aggregated: int  # models entering the mean, own included; 0 if no aggregation

    @property
    def work_units(self) -> int:
        return self.samples_trained + self.models_aggregated


@dataclass
class RunResult:
    method: str
    num_clients: int
    rounds: int
    param_count: int
    records: list[MetricsRecord]
    ledger: TrafficLedger
    final_models: list[np.ndarray]
    model_trace: list[list[np.ndarray]] | None = None  # [round][client] snapshots


@dataclass(frozen=True)
class EnergyCoeffs:
    c_train: float = 1e-7  # kWh per (sample x epoch)
    c_agg: float = 1e-10  # kWh per parameter aggregated
    c_comm: float = 1e-10  # kWh per byte sent

    def __post_init__(self):
        if min(self.c_train, self.c_agg, self.c_comm) < 0:
            raise ConfigError("energy coefficients must be non-negative")


@dataclass
class EnergyReport:
    per_client: dict[int, dict[str, float]] = field(default_factory=dict)
    train: float = 0.0
    agg: float = 0.0
    comm: float = 0.0

    @property
    def total(self) -> float:
        return self.train + self.agg + self.comm


def macro_f1(predictions, truth, num_classes: int) -> float:
    """Unweighted mean of per-class F1.

    Classes absent from both truth and predictions are skipped (non-IID test
    shards routinely lack classes); a class that was predicted but never true
    scores 0.
    """
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.size == 0 or truth.size == 0:
        raise MetricError("empty prediction or truth sequence")
    if predictions.shape != truth.shape:
        raise MetricError("predictions/truth length mismatch")
    scores = []
    for c in range(num_classes):
        in_truth = bool(np.any(truth == c))
        in_pred = bool(np.any(predictions == c))
        if not in_truth and not in_pred:
            continue
        tp = int(np.sum((predictions == c) & (truth == c)))
        fp = int(np.sum((predictions == c) & (truth != c)))
        fn = int(np.sum((predictions != c) & (truth == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    if not scores:
        raise MetricError("no class present in truth or predictions")
    return float(np.mean(scores))


def final_round_f1(result: RunResult) -> list[float]:
    last = result.rounds
    by_client = {r.client: r.f1 for r in result.records if r.round == last}
    return [by_client[c] for c in range(result.num_clients)]


def federation_summary(result: RunResult) -> tuple[float, float, list[float]]:
    """Mean and population std over clients' final-round F1."""
    per_client = final_round_f1(result)
    if not per_client:
        raise MetricError("run has no final-round records")
    arr = np.asarray(per_client)
    return float(arr.mean()), float(arr.std()), per_client


def energy(result: RunResult, coeffs: EnergyCoeffs) -> EnergyReport:
    """Three-phase linear energy model over a run's records."""
    report = EnergyReport()
    for c in range(result.num_clients):
        report.per_client[c] = {"train": 0.0, "agg": 0.0, "comm": 0.0}
    for rec in result.records:
        e_train = coeffs.c_train * rec.samples_trained
        e_agg = coeffs.c_agg * result.param_count * rec.models_aggregated
        e_comm = coeffs.c_comm * rec.bytes_sent
        cell = report.per_client[rec.client]
        cell["train"] += e_train
        cell["agg"] += e_agg
        cell["comm"] += e_comm
        report.train += e_train
        report.agg += e_agg
        report.comm += e_comm
    return report


def work_units(result: RunResult) -> dict[int, int]:
    """Counted-work proxy for elapsed time: samples x epochs trained plus models aggregated."""
    per_client = {c: 0 for c in range(result.num_clients)}
    for rec in result.records:
        per_client[rec.client] += rec.work_units
    return per_client
