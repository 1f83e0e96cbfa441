"""Node runtime: message codecs, pure node transitions, simulator and sockets."""

from .cluster import ClusterRun, resident_floats, run_cluster
from .messages import Kind, Message
from .nodes import ClientState, WorkerState, build_cells, build_nodes, node_step
from .sim import SimConfig, SimResult, Simulator, TrafficLedger, sim_run
from .sockets import socket_run

__all__ = [
    "ClientState",
    "ClusterRun",
    "Kind",
    "Message",
    "SimConfig",
    "SimResult",
    "Simulator",
    "TrafficLedger",
    "WorkerState",
    "build_cells",
    "build_nodes",
    "node_step",
    "resident_floats",
    "run_cluster",
    "sim_run",
    "socket_run",
]
