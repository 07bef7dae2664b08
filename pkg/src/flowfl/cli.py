"""Experiment runner.

Usage::

    flowfl --synthetic straight-bounce --out runs/demo
    flowfl --trajectory-file traj.csv --comm-graph-file graph.csv --variant server_fl --out runs/x
    flowfl --synthetic circle --sweep --out runs/grid

Configuration is resolved as defaults < ``--config`` JSON file < flags.
Every run directory gets ``config.json`` (resolved config), ``rounds.csv``,
``losses.csv``, ``metrics.json``, ``weights.bin`` and ``manifest.json``.
Errors go to stderr as one JSON object and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learner as L
from .aggregate import (LearnConfig, evaluate, local_models, run_centralized, run_flow_fl,
                        run_server_fl)
from .dataio import (BEHAVIORS, DataFormatError, LoadReport, SyntheticMotionConfig, available_at,
                     load_trajectory_file, split_by_time, stream_by_time, synthesize)
from .flsched import SchedulerConfig
from .metrics import (VARIANTS, RoundRecord, StoppingCriterion, stopping_round, timing_report,
                      write_losses_csv, write_rounds_csv)
from .netsim import load_comm_graph

log = logging.getLogger("flowfl")

SWEEP_GRID = [(0.2, 20), (0.2, 60), (0.6, 20), (0.6, 60)]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    variant: str = "flow_fl"
    robots: int = 15
    quorum_fraction: float = 0.2
    quota: int = 20
    local_epochs: int = 1
    seed: int = 0
    loss_probability: float = 0.0
    trajectory_file: str | None = None
    comm_graph_file: str | None = None
    synthetic: str | None = None
    synthetic_speed: float = 0.05
    synthetic_duration: int = 5000
    synthetic_arena: list = field(default_factory=lambda: [6.0, 6.0])
    synthetic_noise: float = 0.1
    comm_range: float = 2.0
    arch: str = "lstm"
    optimizer: str = "rmsprop"
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    epsilon: float = 1e-7
    minibatch_size: int = 32
    dropout: float = 0.2
    sliding_windows: bool = False
    epochs: int = 15  # centralized variant only
    centralized_baseline: bool = False
    inference_model: str = "aggregate"
    drain_ticks: int = 600
    out: str = "flowfl-out"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.robots < 1:
            raise ConfigError("robots must be >= 1")
        if not 0.0 < self.quorum_fraction <= 1.0:
            raise ConfigError(f"quorum_fraction must be in (0, 1], got {self.quorum_fraction}")
        if self.quota < 1:
            raise ConfigError(f"quota must be >= 1, got {self.quota}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ConfigError("loss_probability must be in [0, 1]")
        if self.synthetic is not None and self.synthetic not in BEHAVIORS:
            raise ConfigError(f"synthetic behaviour must be one of {BEHAVIORS}")
        if self.synthetic is not None and self.trajectory_file is not None:
            raise ConfigError("give either a trajectory file or --synthetic, not both")
        if self.synthetic is None and self.trajectory_file is None:
            raise ConfigError("missing dataset: pass --trajectory-file or --synthetic")
        if (self.trajectory_file is not None and self.variant == "flow_fl"
                and self.comm_graph_file is None):
            raise ConfigError("flow_fl on a trajectory file needs --comm-graph-file")
        if self.arch not in ("lstm", "linear") or self.optimizer not in ("rmsprop", "sgd"):
            raise ConfigError("arch must be lstm|linear and optimizer rmsprop|sgd")
        if self.learning_rate <= 0 or not 0 < self.rms_decay < 1 or self.epsilon <= 0:
            raise ConfigError("invalid optimizer hyperparameters")
        if self.minibatch_size < 0 or not 0 <= self.dropout < 1 or self.epochs < 1:
            raise ConfigError("minibatch_size >= 0 (0 = full batch), dropout in [0, 1), epochs >= 1")
        if self.inference_model not in ("aggregate", "per-robot"):
            raise ConfigError("inference_model must be aggregate or per-robot")
        if self.synthetic_duration < 1 or self.synthetic_speed < 0 or self.synthetic_noise < 0:
            raise ConfigError("invalid synthetic motion parameters")
        return self

    def learn_config(self) -> LearnConfig:
        return LearnConfig(arch=L.Arch(kind=self.arch), optimizer=self.optimizer,
                           learning_rate=self.learning_rate, rms_decay=self.rms_decay,
                           epsilon=self.epsilon, minibatch_size=self.minibatch_size or None,
                           dropout=self.dropout, sliding_windows=self.sliding_windows)

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(self.robots, self.quorum_fraction, self.quota, self.local_epochs)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowfl", description="Run federated trajectory-prediction experiments.",
                argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file of config values (flags take precedence)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--robots", type=int)
    p.add_argument("--quorum-fraction", type=float)
    p.add_argument("--quota", type=int)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--trajectory-file")
    p.add_argument("--comm-graph-file")
    p.add_argument("--synthetic", metavar="BEHAVIOR", help=f"one of {', '.join(BEHAVIORS)}")
    p.add_argument("--synthetic-speed", type=float, help="m/s")
    p.add_argument("--synthetic-duration", type=int, help="ticks")
    p.add_argument("--synthetic-arena", type=float, nargs=2, metavar=("W", "H"))
    p.add_argument("--synthetic-noise", type=float, help="position noise std (m)")
    p.add_argument("--comm-range", type=float)
    p.add_argument("--loss-probability", type=float)
    p.add_argument("--arch", choices=("lstm", "linear"))
    p.add_argument("--optimizer", choices=("rmsprop", "sgd"))
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--rms-decay", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--minibatch-size", type=int, help="0 means full batch")
    p.add_argument("--dropout", type=float)
    p.add_argument("--sliding-windows", action="store_true")
    p.add_argument("--epochs", type=int, help="epochs for --variant centralized")
    p.add_argument("--centralized-baseline", action="store_true",
                   help="also train the pooled baseline for as many epochs as there were rounds")
    p.add_argument("--inference-model", choices=("aggregate", "per-robot"))
    p.add_argument("--drain-ticks", type=int)
    p.add_argument("--sweep", action="store_true",
                   help="run the (quorum fraction, quota) grid into subdirectories of --out")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_NON_CONFIG = {"config", "sweep", "verbose"}


def parse_config(argv=None):
    """Resolve defaults, an optional JSON file and flags into a RunConfig.

    Returns ``(config, options)`` where options holds the runner switches
    that are not part of the experiment config (``sweep``, ``verbose``).
    """
    ns = vars(build_parser().parse_args(argv))
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values = {}
    if "config" in ns:
        try:
            loaded = json.loads(Path(ns["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {ns['config']}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in loaded.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            values[name] = value
    values.update({k: v for k, v in ns.items() if k not in _NON_CONFIG})
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    options = {"sweep": ns.get("sweep", False), "verbose": ns.get("verbose", False)}
    return cfg.validate(), options


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _samples_digest(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.array([s.observer, s.subject, s.start_tick], dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(s.points, dtype="<f8").tobytes())
    return h.hexdigest()


def load_dataset(cfg: RunConfig):
    """Return ``(samples, timeline or None, duration_ticks, dataset_info)``."""
    if cfg.synthetic is not None:
        motion = SyntheticMotionConfig(
            n_robots=cfg.robots, arena=tuple(cfg.synthetic_arena), speed=cfg.synthetic_speed,
            behavior=cfg.synthetic, comm_range=cfg.comm_range, sensing_range=cfg.comm_range,
            noise_std=cfg.synthetic_noise, duration=cfg.synthetic_duration, seed=cfg.seed)
        data = synthesize(motion)
        info = {"source": "synthetic", "motion": dataclasses.asdict(motion),
                "samples_sha256": _samples_digest(data.samples)}
        return data.samples, data.timeline, motion.duration, info

    report = LoadReport()
    samples = load_trajectory_file(cfg.trajectory_file, report)
    bad = [s.observer for s in samples if not 0 <= s.observer < cfg.robots]
    if bad:
        raise DataFormatError(f"trajectory file has observer ids up to {max(bad)} but robots={cfg.robots}")
    info = {"source": "files", "trajectory_file": str(cfg.trajectory_file),
            "trajectory_sha256": _sha256(cfg.trajectory_file),
            "load_report": dataclasses.asdict(report)}
    timeline = None
    duration = max(available_at(s) for s in samples)
    if cfg.comm_graph_file is not None:
        graph_report = {}
        timeline = load_comm_graph(cfg.comm_graph_file, n_robots=cfg.robots, report=graph_report)
        info["comm_graph_file"] = str(cfg.comm_graph_file)
        info["comm_graph_sha256"] = _sha256(cfg.comm_graph_file)
        info["comm_graph_report"] = graph_report
        duration = max(duration, timeline.n_ticks)
    return samples, timeline, duration, info


def _centralized_records(losses, tick):
    return [RoundRecord(e, "centralized", tick, tick, tick, {}, loss) for e, loss in enumerate(losses)]


def run(cfg: RunConfig) -> dict:
    """Execute one configured experiment and write its artifacts."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")

    samples, timeline, duration, info = load_dataset(cfg)
    train_val, test = split_by_time(samples, duration)
    streams = stream_by_time(train_val)
    learn = cfg.learn_config()
    metrics = {"variant": cfg.variant, "n_samples": len(samples), "n_test": len(test)}
    centralized = None

    if cfg.variant == "centralized":
        res = run_centralized(streams, cfg.epochs, learn, cfg.seed)
        last = max((available_at(s) for s in train_val), default=0)
        records = _centralized_records(res.losses, last)
        federated = res.losses
        final = res.weights
    else:
        sched = cfg.scheduler_config()
        if cfg.variant == "server_fl":
            res = run_server_fl(streams, sched, learn, cfg.seed)
        else:
            res = run_flow_fl(streams, timeline, sched, learn, cfg.seed,
                              loss_probability=cfg.loss_probability, drain_ticks=cfg.drain_ticks)
        records = res.records
        federated = res.loss_curve
        final = res.final_weights
        metrics["n_rounds"] = res.n_rounds
        metrics["incomplete_rounds"] = sum(not r.complete for r in records)
        if len(records) >= 2:
            tr = timing_report(records)
            metrics["mean_round_gap_seconds"] = float(np.mean(tr.gaps_seconds))
            metrics["mean_barrier_wait_ticks"] = tr.mean_barrier_wait
            metrics["stdev_barrier_wait_ticks"] = tr.stdev_barrier_wait
        if cfg.centralized_baseline and res.n_rounds:
            centralized = run_centralized(streams, res.n_rounds, learn, cfg.seed).losses
        if cfg.variant == "flow_fl" and cfg.inference_model == "per-robot":
            metrics["per_robot"] = _per_robot_eval(res, test, learn)

    curve = [x for x in federated if x is not None]
    metrics["stopping_round"] = stopping_round(curve, StoppingCriterion())
    metrics["final_validation_loss"] = curve[-1] if curve else None
    metrics["test"] = evaluate(final, test, learn) if test else None

    write_rounds_csv(records, out / "rounds.csv")
    write_losses_csv(federated, out / "losses.csv", centralized)
    (out / "weights.bin").write_bytes(final.to_bytes("f4"))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    manifest = {
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "dataset": info,
        "arch": learn.arch.descriptor(),
        "arch_digest": learn.arch.digest().hex(),
        "artifacts": {name: _sha256(out / name) for name in
                      ("rounds.csv", "losses.csv", "metrics.json", "weights.bin")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return metrics


def _per_robot_eval(res, test, learn):
    models = local_models(res, learn)
    by_robot = stream_by_time(test)
    out = {}
    for k, w in sorted(models.items()):
        if by_robot.get(k):
            out[str(k)] = evaluate(w, by_robot[k], learn)
    return out


def sweep(cfg: RunConfig) -> dict:
    """Run every (quorum fraction, quota) cell of the grid into its own directory."""
    results = {}
    for qf, quota in SWEEP_GRID:
        name = f"qf{qf}_quota{quota}"
        cell = dataclasses.replace(cfg, quorum_fraction=qf, quota=quota, out=str(Path(cfg.out) / name))
        results[name] = run(cell.validate())
    return results


def _fail(kind, message, status):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return status


def main(argv=None) -> int:
    try:
        cfg, options = parse_config(argv)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    logging.basicConfig(level=logging.INFO if options["verbose"] else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if options["sweep"]:
            result = sweep(cfg)
        else:
            result = run(cfg)
    except (DataFormatError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except (L.TrainingDiverged, ArithmeticError, OSError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
