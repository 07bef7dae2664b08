"""Evaluation metrics and round bookkeeping."""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass, field

import numpy as np

from .netsim import SECONDS_PER_TICK

log = logging.getLogger(__name__)

VARIANTS = ("centralized", "server_fl", "flow_fl")


def _check_pair(predicted, truth):
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    if predicted.ndim == 2:
        predicted, truth = predicted[None], truth[None]
    if predicted.ndim != 3 or predicted.shape[0] == 0 or predicted.shape[1] == 0:
        raise ValueError("expected a non-empty (n_traj, T, dims) array")
    return predicted, truth


def ade(predicted, truth) -> float:
    """Average displacement error: mean Euclidean error over all trajectories
    and all horizon steps."""
    p, t = _check_pair(predicted, truth)
    return float(np.linalg.norm(p - t, axis=-1).mean())


def fde(predicted, truth) -> float:
    """Final displacement error: mean Euclidean error at the last step."""
    p, t = _check_pair(predicted, truth)
    return float(np.linalg.norm(p[:, -1] - t[:, -1], axis=-1).mean())


def displacement_stats(predicted, truth):
    """Per-trajectory ADE and FDE arrays, for mean +- stdev reporting."""
    p, t = _check_pair(predicted, truth)
    err = np.linalg.norm(p - t, axis=-1)
    return err.mean(axis=1), err[:, -1]


def federated_validation_loss(losses, counts) -> float:
    """Sample-count-weighted mean of per-robot losses."""
    losses = np.asarray(losses, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if losses.shape != counts.shape:
        raise ValueError("one count per loss required")
    total = counts.sum()
    if total <= 0:
        raise ValueError("total sample count must be positive")
    return float(np.sum(counts / total * losses))


@dataclass(frozen=True)
class StoppingCriterion:
    window: int = 5
    threshold: float = 1e-4


def stopping_round(curve, criterion: StoppingCriterion = StoppingCriterion()):
    """First round whose windowed mean loss moved less than the threshold.

    Compares the mean of ``curve[r-w+1 .. r]`` with that of
    ``curve[r-w .. r-1]``. Returns ``None`` if that never happens or the
    curve is too short.
    """
    w = criterion.window
    curve = np.asarray(curve, dtype=np.float64)
    if len(curve) < w + 1:
        log.warning("loss curve of %d points is shorter than window + 1 = %d", len(curve), w + 1)
        return None
    for r in range(w, len(curve)):
        now = curve[r - w + 1:r + 1].mean()
        before = curve[r - w:r].mean()
        if abs(now - before) < criterion.threshold:
            return r
    return None


@dataclass
class RoundRecord:
    """One learning round.

    ``quorum_tick`` is when quorum robots first held a quota; ``start_tick``
    when quorum robots had entered learning; ``end_tick`` when the last
    learner finished sharing. ``barrier_wait_ticks = start_tick -
    quorum_tick`` (zero for the server variant).
    """

    round: int
    variant: str
    quorum_tick: int
    start_tick: int
    end_tick: int
    learners: dict = field(default_factory=dict)  # robot -> n_k
    federated_validation_loss: float | None = None
    complete: bool = True

    @property
    def barrier_wait_ticks(self) -> int:
        return self.start_tick - self.quorum_tick

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.quorum_tick <= self.start_tick <= self.end_tick:
            raise ValueError("need quorum_tick <= start_tick <= end_tick")


ROUND_COLUMNS = ["round", "variant", "quorum_tick", "start_tick", "end_tick", "barrier_wait_ticks",
                 "learners", "n_k", "federated_validation_loss", "complete"]


def write_rounds_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for rec in records:
            ids = sorted(rec.learners)
            loss = rec.federated_validation_loss
            w.writerow([rec.round, rec.variant, rec.quorum_tick, rec.start_tick, rec.end_tick,
                        rec.barrier_wait_ticks, ";".join(map(str, ids)),
                        ";".join(str(rec.learners[i]) for i in ids),
                        "" if loss is None else repr(float(loss)), int(rec.complete)])


def read_rounds_csv(path) -> list[RoundRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids = [int(x) for x in row["learners"].split(";") if x]
            nks = [int(x) for x in row["n_k"].split(";") if x]
            loss = row["federated_validation_loss"]
            out.append(RoundRecord(
                round=int(row["round"]), variant=row["variant"],
                quorum_tick=int(row["quorum_tick"]), start_tick=int(row["start_tick"]),
                end_tick=int(row["end_tick"]), learners=dict(zip(ids, nks)),
                federated_validation_loss=float(loss) if loss else None,
                complete=bool(int(row["complete"]))))
    return out


LOSS_COLUMNS = ["round", "federated_validation_loss", "centralized_validation_loss"]


def write_losses_csv(federated, path, centralized=None):
    n = max(len(federated), len(centralized or ()))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in range(n):
            fed = federated[r] if r < len(federated) else None
            cen = centralized[r] if centralized is not None and r < len(centralized) else None
            w.writerow([r, "" if fed is None else repr(float(fed)),
                        "" if cen is None else repr(float(cen))])


def read_losses_csv(path):
    fed, cen = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            fed.append(float(row["federated_validation_loss"]) if row["federated_validation_loss"] else None)
            cen.append(float(row["centralized_validation_loss"]) if row["centralized_validation_loss"] else None)
    return fed, cen


@dataclass
class TimingReport:
    gaps_ticks: list
    gaps_seconds: list
    mean_barrier_wait: float
    stdev_barrier_wait: float


def timing_report(records) -> TimingReport:
    """Inter-round gaps (between consecutive start ticks) and barrier-wait stats."""
    records = sorted(records, key=lambda r: r.round)
    if len(records) < 2:
        raise ValueError("timing report needs at least two rounds")
    gaps = [b.start_tick - a.start_tick for a, b in zip(records, records[1:])]
    waits = [r.barrier_wait_ticks for r in records]
    return TimingReport(
        gaps_ticks=gaps,
        gaps_seconds=[g * SECONDS_PER_TICK for g in gaps],
        mean_barrier_wait=statistics.fmean(waits),
        stdev_barrier_wait=statistics.stdev(waits),
    )
