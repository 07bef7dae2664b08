"""Serverless federated learning for robot swarms over a gossiped tuple space.

Submodules:

stigmergy   Lamport-stamped replicated tuple space
netsim      tick-driven message passing over a time-varying comm graph
barrier     gossiped count barrier
flsched     per-robot learning state machine and round scheduling
learner     LSTM/linear models, losses and optimizers in plain numpy
aggregate   FedAvg plus centralized, server-FL and Flow-FL runners
dataio      dataset files, windowing, splits, synthetic swarm motion
metrics     ADE/FDE, stopping round, round records and CSV output
cli         experiment runner
"""

from . import aggregate, barrier, dataio, flsched, learner, metrics, netsim, stigmergy
from .aggregate import LearnConfig, fedavg, run_centralized, run_flow_fl, run_server_fl
from .flsched import SchedulerConfig

__version__ = "0.1.0"

__all__ = [
    "aggregate", "barrier", "dataio", "flsched", "learner", "metrics", "netsim", "stigmergy",
    "LearnConfig", "SchedulerConfig", "fedavg", "run_centralized", "run_flow_fl", "run_server_fl",
]
