"""Replicated (key, value) tuple space with Lamport-clock conflict resolution.

Every robot holds a :class:`StigReplica`. Local writes bump the per-key clock;
updates travel by flooding: whatever a replica accepts is queued once for
rebroadcast on the next network tick. Conflicts resolve on ``(lamport,
writer)`` compared lexicographically, so the greatest pair wins on every
replica regardless of arrival order.

The replica never touches the network itself. The simulator drains
:meth:`StigReplica.drain_outbox` after each tick and delivers the tuples to the
sender's neighbours, who call :meth:`StigReplica.on_message`.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class StigTuple:
    key: str
    value: bytes
    lamport: int
    writer: int

    @property
    def stamp(self) -> tuple[int, int]:
        return (self.lamport, self.writer)


class StigReplica:
    """One robot's copy of the tuple space."""

    def __init__(self, owner: int):
        self.owner = owner
        self.store: dict[str, StigTuple] = {}
        # key -> None; insertion-ordered set, one pending broadcast per key
        self._outbox: dict[str, None] = {}
        self._changes: list[str] = []

    def __repr__(self):
        return f"StigReplica(owner={self.owner}, keys={len(self.store)})"

    def write(self, key: str, value: bytes) -> StigTuple:
        prev = self.store.get(key)
        lamport = (prev.lamport if prev is not None else 0) + 1
        tup = StigTuple(key, bytes(value), lamport, self.owner)
        self._accept(tup)
        return tup

    def read(self, key: str) -> bytes | None:
        """Local value for ``key`` or ``None``.

        A successful read also queues the local tuple for broadcast, which is
        how reads help stale neighbours catch up.
        """
        tup = self.store.get(key)
        if tup is None:
            return None
        self._outbox[key] = None
        return tup.value

    def peek(self, key: str) -> StigTuple | None:
        """Inspect without triggering propagation."""
        return self.store.get(key)

    def on_message(self, incoming: StigTuple) -> bool:
        local = self.store.get(incoming.key)
        if local is None or incoming.stamp > local.stamp:
            self._accept(incoming)
            return True
        if incoming.stamp < local.stamp:
            # sender is stale: push our newer copy back
            self._outbox[incoming.key] = None
        return False

    def push_all(self, predicate=None) -> int:
        """Queue every stored tuple (or those whose key passes ``predicate``).

        Used as anti-entropy when a new neighbour shows up, since a pure
        flood can miss a robot that was out of range when it passed by.
        """
        n = 0
        for key in self.store:
            if predicate is None or predicate(key):
                self._outbox[key] = None
                n += 1
        return n

    def drain_outbox(self) -> list[StigTuple]:
        out = [self.store[k] for k in self._outbox]
        self._outbox.clear()
        return out

    @property
    def has_pending(self) -> bool:
        return bool(self._outbox)

    def pop_changes(self) -> list[str]:
        """Keys whose stored tuple changed since the previous call."""
        changes = self._changes
        self._changes = []
        return changes

    def keys(self, prefix: str = ""):
        return [k for k in self.store if k.startswith(prefix)]

    def _accept(self, tup: StigTuple):
        self.store[tup.key] = tup
        self._outbox[tup.key] = None
        self._changes.append(tup.key)


def write(replica: StigReplica, key: str, value: bytes) -> StigTuple:
    return replica.write(key, value)


def read(replica: StigReplica, key: str) -> bytes | None:
    return replica.read(key)


def on_message(replica: StigReplica, incoming: StigTuple) -> bool:
    return replica.on_message(incoming)


class StigNode:
    """Network node that does nothing but replicate the tuple space.

    Handy on its own for convergence experiments; the federated robots embed
    a replica the same way.
    """

    def __init__(self, robot_id: int, anti_entropy: bool = True):
        self.id = robot_id
        self.replica = StigReplica(robot_id)
        self.anti_entropy = anti_entropy

    def receive(self, tick, sender, payload):
        self.replica.on_message(payload)

    def on_tick(self, tick, neighbors, new_neighbors):
        if self.anti_entropy and new_neighbors:
            self.replica.push_all()

    def collect(self):
        return self.replica.drain_outbox()
