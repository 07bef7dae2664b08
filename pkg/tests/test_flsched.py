import pytest

from flowfl.flsched import (FlowRobot, LearningPhase, LearningTier, SchedulerConfig,
                            SchedulerError)
from flowfl.learner import Arch, decode_contribution, encode_contribution, zero_weights
from flowfl.netsim import CommGraphTimeline, World
from flowfl.stigmergy import StigTuple

from _util import straight_sample


def _tier(quota=20, k=15, qf=0.2):
    return LearningTier(0, SchedulerConfig(k, qf, quota))


def test_config_validation():
    assert SchedulerConfig().quorum == 3
    assert SchedulerConfig(15, 0.6, 60).quorum == 9
    for bad in (dict(quorum_fraction=0), dict(quorum_fraction=1.5), dict(quota=0),
                dict(local_epochs=0), dict(n_robots=0)):
        with pytest.raises(ValueError):
            SchedulerConfig(**bad)


def test_quota_gates_readiness():
    t = _tier()
    for i in range(19):
        assert not t.on_sample_collected(i)
    assert t.phase is LearningPhase.IDLE and t.buffered_samples == 19
    assert t.on_sample_collected(19)
    assert t.phase is LearningPhase.READY_WAITING


def test_samples_during_learning_go_to_next_round():
    t = _tier(quota=2)
    t.on_sample_collected("a")
    t.on_sample_collected("b")
    plan = t.on_quorum_passed()
    t.on_sample_collected("c")
    assert plan.samples == ("a", "b")
    assert t.buffer == ["c"]
    t.on_training_done(2)
    t.on_sample_collected("d")  # during Sharing
    t.on_all_learners_shared()
    assert t.round == 1 and t.phase is LearningPhase.READY_WAITING
    assert t.on_quorum_passed().samples == ("c", "d")


def test_first_round_starts_from_init_later_rounds_aggregate():
    t = _tier(quota=1)
    t.on_sample_collected(0)
    assert not t.on_quorum_passed().aggregate
    t.on_training_done(1)
    t.on_all_learners_shared()
    t.skip_to(2)
    t.on_sample_collected(1)
    plan = t.on_quorum_passed()
    assert plan.round == 2 and plan.aggregate


def test_non_ready_robot_cannot_learn():
    t = _tier()
    with pytest.raises(SchedulerError):
        t.on_quorum_passed()
    with pytest.raises(SchedulerError):
        t.on_training_done(3)
    with pytest.raises(SchedulerError):
        t.on_all_learners_shared()


def test_skip_refused_mid_round():
    t = _tier(quota=1)
    t.on_sample_collected(0)
    t.on_quorum_passed()
    with pytest.raises(SchedulerError):
        t.skip_to(3)


class SpyTrainer:
    def __init__(self, n_k=23):
        self.calls = []
        self.n_k = n_k
        self.arch = Arch(kind="linear", history=2, horizon=1)

    def __call__(self, plan, payloads):
        self.calls.append((plan, payloads))
        return encode_contribution(zero_weights(self.arch), self.n_k), self.n_k


def _robot(rid, n_samples, quota=2, k=3, qf=1.0, start=0, trainer=None, events=None):
    samples = [straight_sample(rid, 9, start + 100 * i) for i in range(n_samples)]
    cfg = SchedulerConfig(k, qf, quota)
    return FlowRobot(rid, cfg, samples, trainer or SpyTrainer(), events=events)


def test_ready_marker_written_at_quota():
    r = _robot(0, 2)
    r.on_tick(100, frozenset(), frozenset())
    assert r.replica.peek("ready/0/0") is None
    r.on_tick(200, frozenset(), frozenset())
    assert r.replica.peek("ready/0/0") is not None
    assert r.phase is LearningPhase.READY_WAITING  # quorum 3 not met alone


def _inject(robot, key):
    robot.replica.on_message(StigTuple(key, b"", 1, int(key.split("/")[-1])))


def test_learner_publishes_weights_and_count():
    spy = SpyTrainer(23)
    r = _robot(0, 2, trainer=spy)
    r.on_tick(200, frozenset(), frozenset())
    _inject(r, "ready/0/1")
    _inject(r, "ready/0/2")
    r.on_tick(201, frozenset(), frozenset())
    assert r.phase is LearningPhase.SHARING
    w, n = decode_contribution(spy.arch, r.replica.peek("weights/0/0").value)
    assert n == 23
    assert spy.calls[0][1] == []  # round 0: shared init, nothing to pull
    assert r.tier.buffered_samples == 0


def test_share_barrier_waits_for_every_learner():
    r = _robot(0, 2)
    r.on_tick(200, frozenset(), frozenset())
    for k in (1, 2):
        _inject(r, f"ready/0/{k}")
    r.on_tick(201, frozenset(), frozenset())
    r.replica.on_message(StigTuple("weights/0/1", b"", 1, 1))
    r.on_tick(202, frozenset(), frozenset())
    assert r.phase is LearningPhase.SHARING  # robot 2 has not published
    r.replica.on_message(StigTuple("weights/0/2", b"", 1, 2))
    r.on_tick(203, frozenset(), frozenset())
    assert r.phase is not LearningPhase.SHARING
    assert r.round == 1
    assert r.replica.peek("done/0/0") is not None


def test_closed_round_is_skipped_by_latecomer():
    events = []
    r = _robot(0, 4, qf=0.5, events=events)
    _inject(r, "done/0/1")
    r.on_tick(200, frozenset(), frozenset())
    assert r.round == 1
    assert r.replica.peek("ready/0/0") is None
    assert r.replica.peek("ready/1/0") is not None


def _swarm(k=3, qf=1.0, quota=2, n_samples=6, ticks=1200):
    spies = [SpyTrainer() for _ in range(k)]
    events = []
    robots = [_robot(i, n_samples, quota=quota, k=k, qf=qf, start=i, trainer=spies[i], events=events)
              for i in range(k)]
    World(CommGraphTimeline.fully_connected(k, ticks), robots).run()
    return robots, spies, events


def test_full_swarm_cycles_rounds():
    robots, spies, events = _swarm()
    assert all(r.round == 3 and r.phase is LearningPhase.IDLE for r in robots)
    for spy in spies:
        rounds = [p.round for p, _ in spy.calls]
        assert rounds == [0, 1, 2]
        # round r > 0 pulls every round r-1 publication
        for plan, payloads in spy.calls[1:]:
            assert sorted(k for k, _ in payloads) == [0, 1, 2]


def test_next_round_quota_fills_during_sharing():
    r = _robot(0, 3, quota=2)
    r.on_tick(200, frozenset(), frozenset())
    for k in (1, 2):
        _inject(r, f"ready/0/{k}")
    r.on_tick(201, frozenset(), frozenset())
    assert r.phase is LearningPhase.SHARING
    r.on_tick(300, frozenset(), frozenset())  # third sample lands while sharing
    assert r.phase is LearningPhase.SHARING and r.tier.buffered_samples == 1
    for k in (1, 2):
        r.replica.on_message(StigTuple(f"weights/0/{k}", b"", 1, k))
    r.on_tick(301, frozenset(), frozenset())
    assert r.round == 1 and r.tier.buffered_samples == 1


def test_rounds_stay_sequential():
    _, _, events = _swarm(k=5, qf=0.4, quota=1, n_samples=8, ticks=2000)
    passes = {}
    dones = {}
    for tick, robot, kind, rnd, _ in events:
        if kind == "pass":
            passes.setdefault(rnd, []).append(tick)
        if kind == "done":
            dones.setdefault(rnd, []).append(tick)
    rounds = sorted(passes)
    assert rounds == list(range(len(rounds)))
    for r in rounds[1:]:
        assert min(passes[r]) >= max(passes[r - 1])
