"""Count-based gossip barrier.

:class:`Barrier` is the per-robot state machine: a member set that only grows,
and a phase that moves ``INACTIVE -> WAITING -> PASSED``. It does not transmit
anything. :class:`BarrierNode` runs it over the tuple space, where marking
oneself ready is a write to ``<prefix>/<id>`` and membership gossip is plain
flooding of those keys.
"""

from __future__ import annotations

import enum
import math

from .stigmergy import StigReplica


class BarrierError(RuntimeError):
    """Barrier used out of protocol order."""


class BarrierPhase(enum.Enum):
    INACTIVE = "inactive"
    WAITING = "waiting"
    PASSED = "passed"


def quorum_size(quorum_fraction: float, n_robots: int) -> int:
    if not 0.0 < quorum_fraction <= 1.0:
        raise ValueError(f"quorum fraction {quorum_fraction} outside (0, 1]")
    # guard against 0.6 * 15 = 9.000000000000002
    return min(n_robots, math.ceil(round(quorum_fraction * n_robots, 9)))


class Barrier:
    def __init__(self, threshold: int):
        if threshold < 1:
            raise ValueError("threshold must be positive")
        self.threshold = int(threshold)
        self.members: set[int] = set()
        self.phase = BarrierPhase.INACTIVE

    def __repr__(self):
        return f"Barrier({self.phase.value}, {len(self.members)}/{self.threshold})"

    def barrier_set(self) -> "Barrier":
        if self.phase is not BarrierPhase.INACTIVE:
            raise BarrierError(f"barrier_set while {self.phase.value}")
        self.members = set()
        self.phase = BarrierPhase.WAITING
        return self

    def on_barrier_update(self, incoming_ids) -> set[int]:
        """Absorb gossiped ids; return the ones not seen before.

        The caller forwards the returned ids. A passed barrier keeps absorbing
        so stragglers' traffic is still relayed.
        """
        if self.phase is BarrierPhase.INACTIVE:
            raise BarrierError("on_barrier_update on an inactive barrier")
        new = set(incoming_ids) - self.members
        self.members |= new
        return new

    def barrier_ready(self, self_id: int) -> bool:
        if self.phase is BarrierPhase.INACTIVE:
            raise BarrierError("barrier_ready before barrier_set")
        self.members.add(self_id)
        if self.phase is BarrierPhase.WAITING and len(self.members) >= self.threshold:
            self.phase = BarrierPhase.PASSED
        return self.phase is BarrierPhase.PASSED

    def require(self, threshold: int):
        """Raise the threshold (never lowers it)."""
        self.threshold = max(self.threshold, int(threshold))

    @property
    def passed(self) -> bool:
        return self.phase is BarrierPhase.PASSED


def barrier_set(state: Barrier) -> Barrier:
    return state.barrier_set()


def on_barrier_update(state: Barrier, incoming_ids) -> set[int]:
    return state.on_barrier_update(incoming_ids)


def barrier_ready(state: Barrier, self_id: int) -> bool:
    return state.barrier_ready(self_id)


def member_ids(replica: StigReplica, prefix: str) -> set[int]:
    """Robot ids that have a ``<prefix>/<id>`` key in the replica."""
    cut = len(prefix) + 1
    return {int(k[cut:]) for k in replica.keys(prefix + "/")}


class BarrierNode:
    """A robot that joins one barrier instance at ``ready_at``.

    Non-ready robots relay the membership keys like any other tuple.
    ``passed_at`` records the tick the local barrier opened.
    """

    def __init__(self, robot_id, threshold, ready_at=None, name="barrier/0", anti_entropy=True):
        self.id = robot_id
        self.replica = StigReplica(robot_id)
        self.barrier = Barrier(threshold)
        self.ready_at = ready_at
        self.name = name
        self.anti_entropy = anti_entropy
        self.passed_at = None

    def receive(self, tick, sender, payload):
        self.replica.on_message(payload)

    def on_tick(self, tick, neighbors, new_neighbors):
        if self.anti_entropy and new_neighbors:
            self.replica.push_all()
        b = self.barrier
        if self.ready_at is not None and tick >= self.ready_at and b.phase is BarrierPhase.INACTIVE:
            b.barrier_set()
            self.replica.write(f"{self.name}/{self.id}", b"")
        if b.phase is not BarrierPhase.INACTIVE:
            b.on_barrier_update(member_ids(self.replica, self.name))
            if b.barrier_ready(self.id) and self.passed_at is None:
                self.passed_at = tick

    def collect(self):
        return self.replica.drain_outbox()
