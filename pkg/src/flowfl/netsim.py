"""Deterministic tick-based network simulator.

A :class:`World` owns a set of nodes and a :class:`CommGraphTimeline`. Each
call to :meth:`World.step` performs, for the current tick ``t``:

1. delivery of every message sent at ``t - 1`` to the sender's neighbours *at
   tick t* (a link that vanished in between swallows the message);
2. each node's ``on_tick`` handler, in ascending node id;
3. collection of every node's outbox into messages due at ``t + 1``.

Nodes are duck-typed: they need an ``id`` plus ``receive(tick, sender,
payload)``, ``on_tick(tick, neighbors, new_neighbors)`` and ``collect()``.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SECONDS_PER_TICK = 0.1

_EMPTY = frozenset()


class TimelineExhausted(IndexError):
    """The communication graph has no data for the requested tick."""


class CommGraphTimeline:
    """Per-tick directed adjacency: ``neighbors(t, r)`` are the robots that
    hear a broadcast from ``r`` at tick ``t``.

    Records are honoured as given; no symmetric closure is applied.
    """

    def __init__(self, n_robots: int, n_ticks: int, adjacency=None):
        self.n_robots = int(n_robots)
        self.n_ticks = int(n_ticks)
        # tick -> {robot: frozenset(neighbours)}; missing tick means no links
        self._adj: dict[int, dict[int, frozenset]] = dict(adjacency or {})
        for t, table in self._adj.items():
            for r, nbrs in table.items():
                if r in nbrs:
                    raise ValueError(f"robot {r} listed as its own neighbour at t={t}")
                if r >= self.n_robots or any(n >= self.n_robots for n in nbrs):
                    raise ValueError(f"robot id out of range at t={t}")

    @classmethod
    def from_edges(cls, n_robots, n_ticks, records):
        """Build from ``(t, robot, neighbour)`` triples; duplicates collapse."""
        table = defaultdict(lambda: defaultdict(set))
        for t, r, n in records:
            table[int(t)][int(r)].add(int(n))
        adjacency = {t: {r: frozenset(ns) for r, ns in rows.items()} for t, rows in table.items()}
        return cls(n_robots, n_ticks, adjacency)

    @classmethod
    def static(cls, n_robots, n_ticks, edges, symmetric=True):
        rows = defaultdict(set)
        for a, b in edges:
            rows[a].add(b)
            if symmetric:
                rows[b].add(a)
        frozen = {r: frozenset(ns) for r, ns in rows.items()}
        return cls(n_robots, n_ticks, {t: frozen for t in range(n_ticks)})

    @classmethod
    def fully_connected(cls, n_robots, n_ticks):
        edges = [(a, b) for a in range(n_robots) for b in range(a + 1, n_robots)]
        return cls.static(n_robots, n_ticks, edges)

    @classmethod
    def from_positions(cls, positions, comm_range):
        """Range-limited graph from positions shaped ``(ticks, robots, 2)``."""
        positions = np.asarray(positions, dtype=float)
        n_ticks, n_robots = positions.shape[:2]
        adjacency = {}
        eye = np.eye(n_robots, dtype=bool)
        for t in range(n_ticks):
            diff = positions[t, :, None, :] - positions[t, None, :, :]
            close = (np.einsum("ijk,ijk->ij", diff, diff) <= comm_range**2) & ~eye
            adjacency[t] = {r: frozenset(np.flatnonzero(close[r]).tolist())
                            for r in range(n_robots) if close[r].any()}
        return cls(n_robots, n_ticks, adjacency)

    def neighbors(self, tick: int, robot: int) -> frozenset:
        if not 0 <= tick < self.n_ticks:
            raise TimelineExhausted(f"tick {tick} outside timeline [0, {self.n_ticks})")
        table = self._adj.get(tick)
        if table is None:
            return _EMPTY
        return table.get(robot, _EMPTY)

    def edges(self, tick: int):
        table = self._adj.get(tick, {})
        return sorted((r, n) for r, ns in table.items() for n in ns)

    def records(self):
        """All ``(t, robot, neighbour)`` triples in file order."""
        for t in sorted(self._adj):
            yield from ((t, r, n) for r, n in self.edges(t))

    def asymmetric_pairs(self) -> list[tuple[int, int, int]]:
        """Records ``(t, a, b)`` whose reverse ``(t, b, a)`` is missing."""
        out = []
        for t in sorted(self._adj):
            table = self._adj[t]
            for r, ns in sorted(table.items()):
                out.extend((t, r, n) for n in sorted(ns) if r not in table.get(n, _EMPTY))
        return out

    def diameter(self, tick: int) -> float:
        """Hop diameter of the graph at ``tick``; ``inf`` when disconnected."""
        worst = 0
        for src in range(self.n_robots):
            dist = {src: 0}
            frontier = [src]
            while frontier:
                nxt = []
                for u in frontier:
                    for v in self.neighbors(tick, u):
                        if v not in dist:
                            dist[v] = dist[u] + 1
                            nxt.append(v)
                frontier = nxt
            if len(dist) < self.n_robots:
                return float("inf")
            worst = max(worst, max(dist.values()))
        return worst


def neighbors(timeline: CommGraphTimeline, tick: int, robot: int) -> frozenset:
    return timeline.neighbors(tick, robot)


def load_comm_graph(path, n_robots=None, n_ticks=None, report=None) -> CommGraphTimeline:
    """Read ``t,robot_id,neighbor_id`` lines.

    Blank lines and ``#`` comments are skipped; fields may carry whitespace.
    Asymmetric records are kept and counted in ``report`` (a dict) if given.
    """
    records = []
    bad = []
    try:
        fh = open(path)
    except OSError as exc:
        raise OSError(f"cannot read communication graph {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                t, r, n = (int(p) for p in parts)
            except ValueError:
                bad.append(lineno)
                continue
            records.append((t, r, n))
    if bad:
        log.warning("%s: %d malformed lines (first at line %d)", path, len(bad), bad[0])
    if n_robots is None:
        n_robots = 1 + max((max(r, n) for _, r, n in records), default=-1)
    if n_ticks is None:
        n_ticks = 1 + max((t for t, _, _ in records), default=-1)
    timeline = CommGraphTimeline.from_edges(n_robots, n_ticks, records)
    asym = timeline.asymmetric_pairs()
    if asym:
        log.info("%s: %d asymmetric records", path, len(asym))
    if report is not None:
        report.update(records=len(records), malformed_lines=bad, asymmetric=len(asym))
    return timeline


def write_comm_graph(timeline: CommGraphTimeline, path):
    with open(path, "w") as fh:
        for t, r, n in timeline.records():
            fh.write(f"{t},{r},{n}\n")


@dataclass(frozen=True)
class MessageEvent:
    sender: int
    payload: object
    deliver_at: int
    recipient: int | None = None


def apply_loss(rng, events, loss_probability):
    """Drop each event independently with ``loss_probability``."""
    if not 0.0 <= loss_probability <= 1.0:
        raise ValueError(f"loss probability {loss_probability} outside [0, 1]")
    events = list(events)
    if loss_probability == 0.0 or not events:
        return events
    if loss_probability == 1.0:
        return []
    keep = rng.random(len(events)) >= loss_probability
    return [ev for ev, k in zip(events, keep) if k]


@dataclass(frozen=True)
class TickReport:
    tick: int
    delivered: int
    dropped: int
    sent: int


class World:
    def __init__(self, timeline: CommGraphTimeline, nodes, loss_probability=0.0, rng=None):
        if not 0.0 <= loss_probability <= 1.0:
            raise ValueError(f"loss probability {loss_probability} outside [0, 1]")
        self.timeline = timeline
        self.nodes = sorted(nodes, key=lambda n: n.id)
        self._by_id = {n.id: n for n in self.nodes}
        self.loss_probability = loss_probability
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.tick = 0
        self._in_flight: list[MessageEvent] = []
        self._prev_neighbors: dict[int, frozenset] = {}

    @property
    def seconds(self) -> float:
        return self.tick * SECONDS_PER_TICK

    @property
    def quiescent(self) -> bool:
        return not self._in_flight

    def step(self) -> TickReport:
        t = self.tick
        if t >= self.timeline.n_ticks:
            raise TimelineExhausted(f"timeline ends at tick {self.timeline.n_ticks}")
        tl = self.timeline

        deliveries = []
        for ev in self._in_flight:
            for r in sorted(tl.neighbors(t, ev.sender)):
                if r in self._by_id:
                    deliveries.append(MessageEvent(ev.sender, ev.payload, t, r))
        survivors = apply_loss(self.rng, deliveries, self.loss_probability)
        for ev in survivors:
            self._by_id[ev.recipient].receive(t, ev.sender, ev.payload)

        for node in self.nodes:
            nbrs = tl.neighbors(t, node.id)
            new = nbrs - self._prev_neighbors.get(node.id, _EMPTY)
            self._prev_neighbors[node.id] = nbrs
            node.on_tick(t, nbrs, new)

        sent = []
        for node in self.nodes:
            sent.extend(MessageEvent(node.id, p, t + 1) for p in node.collect())
        self._in_flight = sent
        self.tick = t + 1
        return TickReport(t, len(survivors), len(deliveries) - len(survivors), len(sent))

    def run(self, n_ticks=None, until=None):
        """Step ``n_ticks`` times, or until ``until(world)`` is true.

        Stops quietly at the end of the timeline.
        """
        reports = []
        while n_ticks is None or len(reports) < n_ticks:
            if until is not None and until(self):
                break
            if self.tick >= self.timeline.n_ticks:
                break
            reports.append(self.step())
        return reports
