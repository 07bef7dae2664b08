"""A quorum barrier over gossip on a ring of eight robots.

Robots become ready at different ticks; each passes once it has heard of
three ready robots, itself included.
"""

from flowfl.barrier import BarrierNode
from flowfl.netsim import CommGraphTimeline, World

K, threshold = 8, 3
ring = [(i, (i + 1) % K) for i in range(K)]
ready_at = {0: 0, 3: 5, 5: 12, 6: 30}
nodes = [BarrierNode(i, threshold, ready_at=ready_at.get(i)) for i in range(K)]
world = World(CommGraphTimeline.static(K, 100, ring), nodes)
world.run(n_ticks=60)

print(f"ring diameter {CommGraphTimeline.static(K, 1, ring).diameter(0):.0f}, threshold {threshold}")
for n in nodes:
    status = "not ready" if n.ready_at is None else f"ready at {n.ready_at:2d}, passed at {n.passed_at}"
    print(f"robot {n.id}: {status}")
