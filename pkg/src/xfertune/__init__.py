"""Transfer-parameter tuning from historical logs plus online adaptive sampling."""

from .core import (DatasetProfile, Lattice, NetworkProfile, ParamTriple, TransferLogEntry,
                   ValidationError)
from .kb import KBConfig, KnowledgeBase, build, update
from .sampler import SamplerConfig, accuracy, adaptive_sampling, plan_chunks
from .simulator import SimBackend, SimScenario, oracle_optimum, sim_throughput
from .surface import ThroughputSurface, fit_surface

__all__ = [
    "DatasetProfile", "Lattice", "NetworkProfile", "ParamTriple", "TransferLogEntry",
    "ValidationError", "KBConfig", "KnowledgeBase", "build", "update", "SamplerConfig",
    "accuracy", "adaptive_sampling", "plan_chunks", "SimBackend", "SimScenario",
    "oracle_optimum", "sim_throughput", "ThroughputSurface", "fit_surface",
]
__version__ = "0.1.0"
