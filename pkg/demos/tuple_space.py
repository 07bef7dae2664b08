"""Three robots on a line write the same key concurrently.

Robot 0 and robot 2 cannot hear each other; robot 1 relays. After the
updates spread, every replica holds the write with the highest
(Lamport clock, writer id) stamp.
"""

from flowfl.netsim import CommGraphTimeline, World
from flowfl.stigmergy import StigNode

timeline = CommGraphTimeline.static(3, 50, [(0, 1), (1, 2)])
nodes = [StigNode(i) for i in range(3)]
world = World(timeline, nodes)

nodes[0].replica.write("colour", b"red")
nodes[2].replica.write("colour", b"blue")
nodes[2].replica.write("colour", b"green")  # clock 2 at robot 2

world.run(until=lambda w: w.tick > 0 and w.quiescent)
print(f"quiescent after {world.tick} ticks")
for n in nodes:
    t = n.replica.peek("colour")
    print(f"robot {n.id}: {t.value.decode():6s} stamp={t.stamp}")
