"""Data-driven round scheduling.

:class:`LearningTier` is the per-robot learning state machine
(Idle -> ReadyWaiting -> Learning -> Sharing -> Idle) with its sample buffer.
:class:`FlowRobot` drives it over the tuple space for the serverless variant.

Tuple-space keys used by a round ``r`` (all values opaque bytes):

``ready/r/k``
    robot ``k`` holds a quota of samples; gossip of these keys is the quorum
    barrier.
``weights/r/k``
    robot ``k``'s trained weights and sample count.
``done/r/k``
    robot ``k`` has left round ``r``, either after the share-completion
    barrier or by withdrawing.

Round ``r`` is closed once a robot sees any ``done/r/*`` key or a
``weights``/``done`` key of a later round. A robot that has not registered
for ``r`` also stays out once it sees any ``weights/r/*`` key. A robot still sharing in a round that later rounds
have overtaken stops waiting for stragglers.
"""

from __future__ import annotations

import enum
import logging
from collections import defaultdict
from dataclasses import dataclass

from .barrier import Barrier, BarrierPhase, quorum_size
from .dataio import available_at
from .stigmergy import StigReplica

log = logging.getLogger(__name__)


class SchedulerError(RuntimeError):
    pass


class LearningPhase(enum.Enum):
    IDLE = "idle"
    READY_WAITING = "ready_waiting"
    LEARNING = "learning"
    SHARING = "sharing"


@dataclass(frozen=True)
class SchedulerConfig:
    n_robots: int = 15
    quorum_fraction: float = 0.2
    quota: int = 20
    local_epochs: int = 1

    def __post_init__(self):
        if self.n_robots < 1:
            raise ValueError("need at least one robot")
        if not 0.0 < self.quorum_fraction <= 1.0:
            raise ValueError(f"quorum fraction {self.quorum_fraction} outside (0, 1]")
        if self.quota < 1:
            raise ValueError("quota must be at least 1")
        if self.local_epochs < 1:
            raise ValueError("local epochs must be at least 1")

    @property
    def quorum(self) -> int:
        return quorum_size(self.quorum_fraction, self.n_robots)


@dataclass(frozen=True)
class LearnerPlan:
    robot: int
    round: int
    samples: tuple
    aggregate: bool  # pull and average earlier weights before training


class LearningTier:
    def __init__(self, robot: int, config: SchedulerConfig):
        self.robot = robot
        self.config = config
        self.phase = LearningPhase.IDLE
        self.round = 0
        self.buffer: list = []
        self.n_shared = None

    def __repr__(self):
        return (f"LearningTier(robot={self.robot}, {self.phase.value}, round={self.round}, "
                f"buffered={len(self.buffer)})")

    @property
    def buffered_samples(self) -> int:
        return len(self.buffer)

    def on_sample_collected(self, sample) -> bool:
        """Buffer a sample; True when this call made the robot ready.

        During Learning/Sharing samples accrue for the next round.
        """
        self.buffer.append(sample)
        return self.poll_ready()

    def poll_ready(self) -> bool:
        if self.phase is LearningPhase.IDLE and len(self.buffer) >= self.config.quota:
            self.phase = LearningPhase.READY_WAITING
            return True
        return False

    def on_quorum_passed(self) -> LearnerPlan:
        if self.phase is not LearningPhase.READY_WAITING:
            raise SchedulerError(f"robot {self.robot} not ready ({self.phase.value}); non-learner this round")
        self.phase = LearningPhase.LEARNING
        taken, self.buffer = tuple(self.buffer), []
        return LearnerPlan(self.robot, self.round, taken, aggregate=self.round > 0)

    def on_training_done(self, n_k: int):
        if self.phase is not LearningPhase.LEARNING:
            raise SchedulerError("training finished outside Learning")
        self.n_shared = n_k
        self.phase = LearningPhase.SHARING

    def on_all_learners_shared(self):
        if self.phase is not LearningPhase.SHARING:
            raise SchedulerError("share completion outside Sharing")
        self.phase = LearningPhase.IDLE
        self.round += 1
        self.n_shared = None
        self.poll_ready()

    def skip_to(self, round_: int):
        """Follow the swarm past rounds this robot did not learn in."""
        if self.phase not in (LearningPhase.IDLE, LearningPhase.READY_WAITING):
            raise SchedulerError(f"cannot skip rounds while {self.phase.value}")
        self.round = max(self.round, round_)
        self.phase = LearningPhase.IDLE
        self.poll_ready()


def _parse_key(key):
    kind, r, k = key.split("/")
    return kind, int(r), int(k)


class FlowRobot:
    """A robot in the serverless variant.

    ``trainer(plan, payloads)`` performs local learning: ``payloads`` is a
    list of ``(robot, bytes)`` weight tuples pulled from the most recent
    round with published weights (empty for the first round). It returns
    ``(payload_bytes, n_k)`` to publish.

    ``events`` collects ``(tick, robot, kind, round, value)`` rows for
    offline analysis.
    """

    def __init__(self, robot_id, config: SchedulerConfig, samples, trainer, events=None,
                 anti_entropy=True):
        self.id = robot_id
        self.config = config
        self.tier = LearningTier(robot_id, config)
        self.replica = StigReplica(robot_id)
        self.trainer = trainer
        self.events = events if events is not None else []
        self.anti_entropy = anti_entropy
        self._samples = sorted(samples, key=available_at)
        self._next = 0
        self.quorum_barrier: Barrier | None = None
        self.share_barrier: Barrier | None = None
        self.ready = defaultdict(set)
        self.published = defaultdict(set)
        self.done = defaultdict(set)
        self.max_seen_round = -1
        self.max_started_round = -1  # latest round with weights or done keys

    def __repr__(self):
        return f"FlowRobot({self.id}, {self.tier!r})"

    @property
    def phase(self):
        return self.tier.phase

    @property
    def round(self):
        return self.tier.round

    @property
    def pending_samples(self) -> int:
        return len(self._samples) - self._next

    def receive(self, tick, sender, payload):
        self.replica.on_message(payload)

    def collect(self):
        return self.replica.drain_outbox()

    def _live(self, key):
        return _parse_key(key)[1] >= self.tier.round - 1

    def _ingest(self):
        index = {"ready": self.ready, "weights": self.published, "done": self.done}
        for key in self.replica.pop_changes():
            kind, r, k = _parse_key(key)
            index[kind][r].add(k)
            self.max_seen_round = max(self.max_seen_round, r)
            if kind != "ready":
                self.max_started_round = max(self.max_started_round, r)

    def _closed(self, r) -> bool:
        # a later round that has started means somebody already left round r;
        # later ready keys alone prove nothing, early skippers write those
        return bool(self.done[r]) or self.max_started_round > r

    def _started_without_us(self, r) -> bool:
        # published weights mean the quorum already formed; joining late would
        # let a round keep growing while its learners wait on each other
        return self.quorum_barrier is None and bool(self.published[r])

    def _log(self, tick, kind, round_, value=None):
        self.events.append((tick, self.id, kind, round_, value))

    def on_tick(self, tick, neighbors, new_neighbors):
        if self.anti_entropy and new_neighbors:
            self.replica.push_all(self._live)
        while self._next < len(self._samples) and available_at(self._samples[self._next]) <= tick:
            self.tier.on_sample_collected(self._samples[self._next])
            self._next += 1
        self._ingest()
        # a share completion can free the robot for the next round within the tick
        for _ in range(2):
            if not self._advance(tick):
                break

    def _advance(self, tick) -> bool:
        tier = self.tier
        P = LearningPhase
        while tier.phase in (P.IDLE, P.READY_WAITING) and (
                self._closed(tier.round) or self._started_without_us(tier.round)):
            r = tier.round
            if tier.phase is P.READY_WAITING and self.quorum_barrier is not None:
                self.replica.write(f"done/{r}/{self.id}", b"")
                self._log(tick, "withdraw", r)
            self.quorum_barrier = None
            tier.skip_to(r + 1)
            self._ingest()

        if tier.phase is P.IDLE:
            tier.poll_ready()
        if tier.phase is P.READY_WAITING and self.quorum_barrier is None:
            r = tier.round
            self.quorum_barrier = Barrier(self.config.quorum).barrier_set()
            self.replica.write(f"ready/{r}/{self.id}", b"")
            self._ingest()
            self._log(tick, "ready", r, tier.buffered_samples)

        if tier.phase is P.READY_WAITING:
            b = self.quorum_barrier
            # a robot that published in this round was ready in it
            b.on_barrier_update(self.ready[tier.round] | self.published[tier.round])
            if b.barrier_ready(self.id):
                self._learn(tick)

        if tier.phase is P.SHARING:
            r = tier.round
            b = self.share_barrier
            finished = self.published[r] | self.done[r]
            b.on_barrier_update(finished)
            b.require(len(self.ready[r] | b.members))
            if b.barrier_ready(self.id) or self.max_started_round > r:
                self.replica.write(f"done/{r}/{self.id}", b"")
                self._ingest()
                self._log(tick, "done", r)
                self.quorum_barrier = self.share_barrier = None
                tier.on_all_learners_shared()
                return True
        return False

    def _learn(self, tick):
        tier = self.tier
        plan = tier.on_quorum_passed()
        self._log(tick, "pass", plan.round)
        payloads = []
        if plan.aggregate:
            earlier = [r for r, ks in self.published.items() if r < plan.round and ks]
            if earlier:
                src = max(earlier)
                for k in sorted(self.published[src]):
                    payloads.append((k, self.replica.read(f"weights/{src}/{k}")))
        payload, n_k = self.trainer(plan, payloads)
        self.replica.write(f"weights/{plan.round}/{self.id}", payload)
        self._ingest()
        tier.on_training_done(n_k)
        self._log(tick, "publish", plan.round, n_k)
        self.share_barrier = Barrier(1).barrier_set()
