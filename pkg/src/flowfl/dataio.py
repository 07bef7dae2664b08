"""Trajectory datasets: file formats, windowing, splits and a synthetic swarm.

Trajectory files hold one record per line, ``robot_id,neighbor_id,t,x,y,z``,
with a blank line between samples. Each sample is 100 consecutive ticks of a
neighbour's position in the observer's frame frozen at the first tick.
Communication graph files hold ``t,robot_id,neighbor_id`` lines (see
:mod:`flowfl.netsim`).
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netsim import SECONDS_PER_TICK, CommGraphTimeline, load_comm_graph, write_comm_graph
from .rng import stream

log = logging.getLogger(__name__)

SAMPLE_LENGTH = 100
HISTORY = 32
HORIZON = 48

__all__ = [
    "SAMPLE_LENGTH", "TrajectorySample", "DataFormatError", "LoadReport",
    "load_trajectory_file", "write_trajectory_file", "load_comm_graph", "write_comm_graph",
    "make_pairs", "stream_by_time", "available_at", "split_by_time", "split_round",
    "SyntheticMotionConfig", "SyntheticDataset", "synthesize", "rate_per_10min",
]


class DataFormatError(ValueError):
    pass


@dataclass(eq=False)
class TrajectorySample:
    observer: int
    subject: int
    start_tick: int
    points: np.ndarray  # (100, 2) metres in the observer's start frame

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, TrajectorySample):
            return NotImplemented
        return (self.observer, self.subject, self.start_tick) == (
            other.observer, other.subject, other.start_tick
        ) and np.array_equal(self.points, other.points)

    def __repr__(self):
        return (f"TrajectorySample(observer={self.observer}, subject={self.subject}, "
                f"start_tick={self.start_tick}, n={len(self.points)})")


@dataclass
class LoadReport:
    samples: int = 0
    rejected_length: int = 0
    rejected_mixed: int = 0
    malformed_lines: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.rejected_length or self.rejected_mixed or self.malformed_lines)


def load_trajectory_file(path, report: LoadReport | None = None) -> list[TrajectorySample]:
    report = report if report is not None else LoadReport()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read trajectory file {path}: {exc}") from exc

    samples = []
    block = []

    def flush():
        if not block:
            return
        ids = {(r, n) for r, n, *_ in block}
        if len(ids) != 1:
            report.rejected_mixed += 1
            log.warning("%s: block ending at line %d mixes robot pairs", path, lineno)
        elif len(block) != SAMPLE_LENGTH:
            report.rejected_length += 1
            log.warning("%s: block ending at line %d has %d points, need %d",
                        path, lineno, len(block), SAMPLE_LENGTH)
        else:
            r, n, t0 = block[0][:3]
            pts = np.array([(x, y) for *_, x, y in block])
            samples.append(TrajectorySample(r, n, t0, pts))
        block.clear()

    lineno = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line.startswith("#"):
            continue
        if not line:
            flush()
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            if len(parts) != 6:
                raise ValueError
            r, n, t = int(parts[0]), int(parts[1]), int(parts[2])
            x, y = float(parts[3]), float(parts[4])
            float(parts[5])  # z: validated, unused
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError
        except ValueError:
            report.malformed_lines.append(lineno)
            continue
        block.append((r, n, t, x, y))
    flush()

    if report.malformed_lines:
        log.warning("%s: %d malformed lines, first at %d", path,
                    len(report.malformed_lines), report.malformed_lines[0])
    report.samples = len(samples)
    if not samples:
        raise DataFormatError(f"{path}: no valid samples")
    return samples


def write_trajectory_file(samples, path):
    with open(path, "w") as fh:
        for k, s in enumerate(samples):
            if k:
                fh.write("\n")
            for i, (x, y) in enumerate(s.points):
                fh.write(f"{s.observer},{s.subject},{s.start_tick + i},{float(x)!r},{float(y)!r},0.0\n")


def make_pairs(samples, history=HISTORY, horizon=HORIZON, sliding=False):
    """Cut samples into ``(inputs, targets)`` arrays.

    Default is one pair per sample taken from the first ``history + horizon``
    points; ``sliding=True`` uses every offset.
    """
    span = history + horizon
    X, Y = [], []
    for s in samples:
        offsets = range(len(s.points) - span + 1) if sliding else (0,)
        for o in offsets:
            X.append(s.points[o:o + history])
            Y.append(s.points[o + history:o + span])
    if not X:
        return np.empty((0, history, 2)), np.empty((0, horizon, 2))
    return np.stack(X), np.stack(Y)


def available_at(sample: TrajectorySample) -> int:
    """Tick at which the recording is complete and the sample usable."""
    return sample.start_tick + SAMPLE_LENGTH


def stream_by_time(samples) -> dict[int, list[TrajectorySample]]:
    streams = defaultdict(list)
    for s in samples:
        streams[s.observer].append(s)
    for lst in streams.values():
        lst.sort(key=lambda s: (s.start_tick, s.subject))
    return dict(streams)


def split_by_time(samples, duration, train_fraction=0.8):
    """Split at ``train_fraction * duration`` by sample start tick."""
    cut = train_fraction * duration
    early = [s for s in samples if s.start_tick < cut]
    late = [s for s in samples if s.start_tick >= cut]
    return early, late


def split_round(samples, train_fraction=0.8):
    """First ``train_fraction`` of a learner's samples train, the rest validate."""
    n = len(samples)
    n_train = min(n, max(1, int(math.floor(train_fraction * n + 1e-9))))
    return samples[:n_train], samples[n_train:]


def rate_per_10min(samples, n_robots, duration_ticks):
    """Mean and stdev over robots of samples per 10-minute window."""
    windows = duration_ticks * SECONDS_PER_TICK / 600.0
    counts = np.zeros(n_robots)
    for s in samples:
        counts[s.observer] += 1
    rates = counts / windows
    return float(rates.mean()), float(rates.std(ddof=1) if n_robots > 1 else 0.0)


BEHAVIORS = ("straight-bounce", "circle", "waypoint")


@dataclass
class SyntheticMotionConfig:
    n_robots: int = 15
    arena: tuple = (6.0, 6.0)
    speed: float = 0.05  # m/s
    behavior: str = "straight-bounce"
    comm_range: float = 2.0
    sensing_range: float = 2.0
    noise_std: float = 0.1  # variance 0.01 m^2
    duration: int = 5000  # ticks
    circle_radius: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"behaviour must be one of {BEHAVIORS}")
        if self.n_robots < 1 or self.duration < 1:
            raise ValueError("need at least one robot and one tick")
        if min(self.arena) <= 0 or self.speed < 0 or self.noise_std < 0:
            raise ValueError("arena, speed and noise must be non-negative")


@dataclass
class SyntheticDataset:
    config: SyntheticMotionConfig
    positions: np.ndarray  # (ticks, robots, 2) world frame
    headings: np.ndarray  # (ticks, robots)
    samples: list
    timeline: CommGraphTimeline

    @property
    def duration(self) -> int:
        return self.config.duration

    def write(self, directory, stem="synthetic"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        traj = directory / f"{stem}_trajectories.csv"
        graph = directory / f"{stem}_comm_graph.csv"
        write_trajectory_file(self.samples, traj)
        write_comm_graph(self.timeline, graph)
        return traj, graph


def _simulate_motion(cfg: SyntheticMotionConfig, rng):
    K, T = cfg.n_robots, cfg.duration
    W, H = cfg.arena
    step = cfg.speed * SECONDS_PER_TICK
    pos = np.empty((T, K, 2))
    if cfg.behavior == "straight-bounce":
        p = rng.uniform((0, 0), (W, H), size=(K, 2))
        ang = rng.uniform(-np.pi, np.pi, size=K)
        v = step * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        for t in range(T):
            pos[t] = p
            p = p + v
            for axis, lim in ((0, W), (1, H)):
                low = p[:, axis] < 0
                high = p[:, axis] > lim
                p[low, axis] = -p[low, axis]
                p[high, axis] = 2 * lim - p[high, axis]
                v[low | high, axis] *= -1
    elif cfg.behavior == "circle":
        r = min(cfg.circle_radius, 0.5 * min(W, H))
        centre = rng.uniform((r, r), (W - r, H - r), size=(K, 2))
        phase = rng.uniform(-np.pi, np.pi, size=K)
        omega = (step / r) * rng.choice((-1.0, 1.0), size=K)
        ang = phase[None, :] + omega[None, :] * np.arange(T)[:, None]
        pos[:] = centre[None] + r * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    else:
        p = rng.uniform((0, 0), (W, H), size=(K, 2))
        goal = rng.uniform((0, 0), (W, H), size=(K, 2))
        for t in range(T):
            pos[t] = p
            d = goal - p
            dist = np.hypot(d[:, 0], d[:, 1])
            arrived = dist <= step
            p = np.where(arrived[:, None], goal, p + step * d / np.maximum(dist, 1e-12)[:, None])
            if arrived.any():
                goal[arrived] = rng.uniform((0, 0), (W, H), size=(int(arrived.sum()), 2))

    vel = np.zeros_like(pos)
    vel[:-1] = pos[1:] - pos[:-1]
    if T > 1:
        vel[-1] = vel[-2]
    headings = np.arctan2(vel[..., 1], vel[..., 0])
    # a parked robot keeps its previous heading
    still = np.hypot(vel[..., 0], vel[..., 1]) < 1e-12
    for t in range(1, T):
        headings[t, still[t]] = headings[t - 1, still[t]]
    return pos, headings


def to_local_frame(world_points, origin, heading):
    """Express world points in the frame at ``origin`` rotated by ``heading``."""
    c, s = math.cos(heading), math.sin(heading)
    d = np.asarray(world_points, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def _in_range_runs(mask):
    """``(start, length)`` of every run of True in a 1-D boolean array."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(a), int(b - a)) for a, b in zip(edges[::2], edges[1::2])]


def synthesize(config: SyntheticMotionConfig) -> SyntheticDataset:
    """Point-robot swarm with range-limited sensing and communication.

    Every uninterrupted stretch during which one robot senses another is cut
    into consecutive 100-tick samples; leftover tails are dropped.
    """
    cfg = config
    if math.hypot(*cfg.arena) <= cfg.comm_range:
        log.warning("arena diagonal %.2f m within comm range %.2f m: graph is always complete",
                    math.hypot(*cfg.arena), cfg.comm_range)
    pos, headings = _simulate_motion(cfg, stream(cfg.seed, "synth", "motion"))
    noise_rng = stream(cfg.seed, "synth", "noise")
    K = cfg.n_robots
    samples = []
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            d = pos[:, j] - pos[:, i]
            sensed = np.einsum("tk,tk->t", d, d) <= cfg.sensing_range**2
            for start, length in _in_range_runs(sensed):
                for s0 in range(start, start + length - SAMPLE_LENGTH + 1, SAMPLE_LENGTH):
                    pts = to_local_frame(pos[s0:s0 + SAMPLE_LENGTH, j], pos[s0, i], headings[s0, i])
                    samples.append(TrajectorySample(i, j, s0, pts))
    samples.sort(key=lambda s: (s.observer, s.start_tick, s.subject))
    if cfg.noise_std > 0:
        for s in samples:
            s.points = s.points + noise_rng.normal(0.0, cfg.noise_std, size=s.points.shape)
    timeline = CommGraphTimeline.from_positions(pos, cfg.comm_range)
    return SyntheticDataset(cfg, pos, headings, samples, timeline)
