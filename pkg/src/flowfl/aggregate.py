"""FedAvg and the three experiment variants.

* :func:`run_centralized` pools every robot's data and trains one model.
* :func:`run_server_fl` has an omniscient server start a round the instant a
  quorum of robots hold a quota of samples, and average instantly.
* :func:`run_flow_fl` runs the serverless protocol over the network
  simulator; rounds are scheduled and weights exchanged through the tuple
  space.

Both federated runners share :class:`RobotLearner`, so for the same data,
seed and learner sets they train bit-identically.
"""

from __future__ import annotations

import logging
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import learner as L
from .dataio import available_at, make_pairs, split_round
from .flsched import FlowRobot, LearningPhase, LearningTier, SchedulerConfig
from .metrics import RoundRecord, ade, displacement_stats, fde, federated_validation_loss
from .netsim import World
from .rng import stream

log = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


@dataclass
class WeightContribution:
    robot: int
    round: int
    weights: L.ModelWeights
    n_k: int


def fedavg(contributions) -> L.ModelWeights:
    """Element-wise mean of the weights, each weighted by ``n_k / sum(n_k)``.

    Contributions are reduced in ascending robot order so the floating-point
    result does not depend on list order.
    """
    contributions = sorted(contributions, key=lambda c: c.robot)
    if not contributions:
        raise AggregationError("fedavg needs at least one contribution")
    arch = contributions[0].weights.arch
    if any(c.weights.arch != arch for c in contributions):
        raise AggregationError("architecture mismatch between contributions")
    if len(contributions) == 1:
        return contributions[0].weights.copy()
    total = float(sum(c.n_k for c in contributions))
    if total <= 0:
        raise AggregationError("total sample count must be positive")
    acc = np.zeros(arch.count)
    for c in contributions:
        acc += (c.n_k / total) * c.weights.values
    return L.ModelWeights(arch, acc)


@dataclass(frozen=True)
class LearnConfig:
    arch: L.Arch = L.DEFAULT_ARCH
    optimizer: str = "rmsprop"
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    epsilon: float = 1e-7
    minibatch_size: int | None = 32
    dropout: float = 0.2
    sliding_windows: bool = False
    train_fraction: float = 0.8

    def new_optimizer(self) -> L.OptimizerState:
        return L.OptimizerState(self.optimizer, self.learning_rate, self.rms_decay, self.epsilon)

    def pairs(self, samples):
        return make_pairs(samples, self.arch.history, self.arch.horizon, self.sliding_windows)


def shared_init(learn: LearnConfig, seed: int) -> L.ModelWeights:
    """The one random initialisation every robot starts from."""
    return L.init_weights(learn.arch, stream(seed, "init"))


@dataclass
class LocalUpdate:
    robot: int
    round: int
    weights: L.ModelWeights
    n_k: int  # training pairs used for the update
    n_observed: int  # samples the robot brought to the round
    train_loss: float
    val_inputs: np.ndarray
    val_targets: np.ndarray


class RobotLearner:
    """A robot's local model training; keeps its optimizer state across rounds."""

    def __init__(self, robot: int, learn: LearnConfig, seed: int, local_epochs: int = 1):
        self.robot = robot
        self.learn = learn
        self.seed = seed
        self.local_epochs = local_epochs
        self.optimizer = learn.new_optimizer()

    def train(self, round_, base: L.ModelWeights, samples) -> LocalUpdate:
        train_s, val_s = split_round(list(samples), self.learn.train_fraction)
        X, Y = self.learn.pairs(train_s)
        Xv, Yv = self.learn.pairs(val_s)
        rng = stream(self.seed, "train", self.robot, round_)
        w, loss = base, float("nan")
        for _ in range(self.local_epochs):
            w, loss = L.train_epoch(w, X, Y, self.optimizer, rng,
                                    self.learn.minibatch_size, self.learn.dropout)
        return LocalUpdate(self.robot, round_, w, len(X), len(samples), loss, Xv, Yv)


def round_validation_loss(global_weights, updates):
    """Federated validation loss of ``global_weights`` over the learners'
    validation samples, weighted by the samples each learner observed."""
    losses, counts = [], []
    for u in updates:
        if len(u.val_inputs):
            losses.append(L.validation_loss(global_weights, u.val_inputs, u.val_targets))
            counts.append(u.n_observed)
    if not losses:
        return None
    return federated_validation_loss(losses, counts)


@dataclass
class FLResult:
    variant: str
    records: list
    global_weights: list  # aggregated model after each round
    updates: list  # per round: list of LocalUpdate
    init_weights: L.ModelWeights
    events: list = field(default_factory=list)
    end_tick: int = 0
    robots: list = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.records)

    @property
    def final_weights(self) -> L.ModelWeights:
        return self.global_weights[-1] if self.global_weights else self.init_weights

    @property
    def loss_curve(self):
        return [r.federated_validation_loss for r in self.records]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FLOWFL_THREADS", "1")))
    except ValueError:
        return 1


def run_server_fl(streams, sched: SchedulerConfig, learn: LearnConfig, seed: int) -> FLResult:
    """Server-scheduled FL over per-robot sample streams ``{robot: [samples]}``."""
    init = shared_init(learn, seed)
    tiers = {k: LearningTier(k, sched) for k in range(sched.n_robots)}
    learners = {k: RobotLearner(k, learn, seed, sched.local_epochs) for k in range(sched.n_robots)}
    arrivals = defaultdict(list)
    for k, samples in streams.items():
        for s in samples:
            arrivals[available_at(s)].append((k, s))

    records, globals_, rounds_updates = [], [], []
    current = init
    workers = _threads()
    for tick in sorted(arrivals):
        for k, s in sorted(arrivals[tick], key=lambda ks: (ks[0], ks[1].start_tick, ks[1].subject)):
            tiers[k].on_sample_collected(s)
        ready = [k for k in sorted(tiers) if tiers[k].phase is LearningPhase.READY_WAITING]
        if len(ready) < sched.quorum:
            continue
        plans = [tiers[k].on_quorum_passed() for k in ready]
        base = current

        def work(plan):
            return learners[plan.robot].train(plan.round, base, plan.samples)

        if workers > 1 and len(plans) > 1:
            with ThreadPoolExecutor(workers) as pool:
                updates = list(pool.map(work, plans))
        else:
            updates = [work(p) for p in plans]
        current = fedavg(WeightContribution(u.robot, u.round, u.weights, u.n_k) for u in updates)
        for u in updates:
            tiers[u.robot].on_training_done(u.n_k)
            tiers[u.robot].on_all_learners_shared()
        rnd = len(records)
        for tier in tiers.values():
            tier.skip_to(rnd + 1)
        records.append(RoundRecord(rnd, "server_fl", tick, tick, tick,
                                   {u.robot: u.n_k for u in updates},
                                   round_validation_loss(current, updates)))
        globals_.append(current)
        rounds_updates.append(updates)
    if not records:
        log.warning("sample streams ended before the first quorum: zero rounds")
    return FLResult("server_fl", records, globals_, rounds_updates, init,
                    end_tick=max(arrivals, default=0))


class _FlowObserver:
    """Collects what the robots train, for offline records and metrics."""

    def __init__(self):
        self.updates = defaultdict(dict)

    def add(self, update: LocalUpdate):
        self.updates[update.round][update.robot] = update


def _flow_trainer(robot_learner, arch, init, observer):
    def trainer(plan, payloads):
        if payloads:
            contribs = []
            for k, data in payloads:
                w, n = L.decode_contribution(arch, data)
                contribs.append(WeightContribution(k, plan.round - 1, w, n))
            base = fedavg(contribs)
        else:
            base = init
        update = robot_learner.train(plan.round, base, plan.samples)
        observer.add(update)
        return L.encode_contribution(update.weights, update.n_k), update.n_k
    return trainer


def run_flow_fl(streams, timeline, sched: SchedulerConfig, learn: LearnConfig, seed: int,
                loss_probability: float = 0.0, drain_ticks: int = 600,
                anti_entropy: bool = True) -> FLResult:
    """Serverless FL over the network simulator.

    The run stops ``drain_ticks`` after the last sample becomes available, or
    when the timeline ends; rounds still sharing at that point are flagged
    incomplete.
    """
    init = shared_init(learn, seed)
    observer = _FlowObserver()
    events = []
    robots = []
    for k in range(sched.n_robots):
        rl = RobotLearner(k, learn, seed, sched.local_epochs)
        robots.append(FlowRobot(k, sched, streams.get(k, []), _flow_trainer(rl, learn.arch, init, observer),
                                events=events, anti_entropy=anti_entropy))
    world = World(timeline, robots, loss_probability, rng=stream(seed, "loss"))
    last = max((available_at(s) for ss in streams.values() for s in ss), default=0)
    stop = min(timeline.n_ticks, last + drain_ticks + 1)
    while world.tick < stop:
        world.step()
        if world.tick > last and world.quiescent and all(
                r.phase in (LearningPhase.IDLE, LearningPhase.READY_WAITING) for r in robots):
            # nothing in flight and nobody sharing: further ticks change nothing
            # unless topology changes reconnect someone, so keep going only if
            # a ready robot could still pass
            if not any(r.phase is LearningPhase.READY_WAITING for r in robots):
                break
    if world.tick >= timeline.n_ticks and any(r.phase is LearningPhase.SHARING for r in robots):
        log.warning("timeline exhausted mid-round")

    return _assemble_flow(events, observer, sched, init, world.tick, robots)


def _assemble_flow(events, observer, sched, init, end_tick, robots):
    by_round = defaultdict(lambda: defaultdict(list))
    for tick, robot, kind, rnd, value in events:
        by_round[rnd][kind].append((tick, robot, value))

    records, globals_, rounds_updates = [], [], []
    for rnd in sorted(observer.updates):
        updates = [observer.updates[rnd][k] for k in sorted(observer.updates[rnd])]
        ev = by_round[rnd]
        ready_ticks = sorted(t for t, _, _ in ev["ready"])
        pass_ticks = sorted(t for t, _, _ in ev["pass"])
        q = sched.quorum
        quorum_tick = ready_ticks[min(q, len(ready_ticks)) - 1]
        start_tick = pass_ticks[min(q, len(pass_ticks)) - 1]
        learner_ids = {u.robot for u in updates}
        done = {r: t for t, r, _ in ev["done"] if r in learner_ids}
        complete = set(done) == learner_ids
        end = max(done.values()) if complete else end_tick
        glob = fedavg(WeightContribution(u.robot, u.round, u.weights, u.n_k) for u in updates)
        records.append(RoundRecord(rnd, "flow_fl", quorum_tick, start_tick, max(end, start_tick),
                                   {u.robot: u.n_k for u in updates},
                                   round_validation_loss(glob, updates), complete))
        globals_.append(glob)
        rounds_updates.append(updates)
    if not records:
        log.warning("no Flow-FL round completed a quorum")
    return FLResult("flow_fl", records, globals_, rounds_updates, init, events, end_tick, robots)


def local_models(result: FLResult, learn: LearnConfig):
    """Each robot's own view of the latest shared model at the end of a
    Flow-FL run (fedavg of the newest weights round in its replica)."""
    out = {}
    for robot in result.robots:
        rounds = [r for r, ks in robot.published.items() if ks]
        if not rounds:
            out[robot.id] = result.init_weights
            continue
        src = max(rounds)
        contribs = []
        for k in sorted(robot.published[src]):
            w, n = L.decode_contribution(learn.arch, robot.replica.peek(f"weights/{src}/{k}").value)
            contribs.append(WeightContribution(k, src, w, n))
        out[robot.id] = fedavg(contribs)
    return out


@dataclass
class CentralizedResult:
    losses: list
    weights: L.ModelWeights
    n_train: int
    n_val: int
    n_samples: int


def run_centralized(streams, epochs: int, learn: LearnConfig, seed: int) -> CentralizedResult:
    """Train one model on everybody's data at once for ``epochs`` epochs.

    Each robot's samples are split in time order like a learner's round
    (first part training, rest validation) and then pooled.
    """
    train_s, val_s = [], []
    for k in sorted(streams):
        tr, va = split_round(sorted(streams[k], key=available_at), learn.train_fraction)
        train_s.extend(tr)
        val_s.extend(va)
    X, Y = learn.pairs(train_s)
    Xv, Yv = learn.pairs(val_s)
    w = shared_init(learn, seed)
    opt = learn.new_optimizer()
    losses = []
    for epoch in range(epochs):
        w, _ = L.train_epoch(w, X, Y, opt, stream(seed, "centralized", epoch),
                             learn.minibatch_size, learn.dropout)
        losses.append(L.validation_loss(w, Xv, Yv))
    return CentralizedResult(losses, w, len(X), len(Xv), len(train_s) + len(val_s))


def evaluate(weights: L.ModelWeights, samples, learn: LearnConfig):
    """ADE/FDE (metres) of ``weights`` on ``samples`` (one pair per sample)."""
    X, Y = make_pairs(samples, learn.arch.history, learn.arch.horizon)
    if not len(X):
        return None
    pred = L.forward(weights, X)
    per_ade, per_fde = displacement_stats(pred, Y)
    return {"ade": ade(pred, Y), "fde": fde(pred, Y),
            "ade_std": float(per_ade.std()), "fde_std": float(per_fde.std()),
            "test_loss": L.mse_loss(pred, Y), "n_test": int(len(X))}
