"""Crash-consistency experiments for iterative kernels on a simulated NVM cache hierarchy."""
from .plan import EVERY_VISIT, NEVER, PersistencePlan
from .simcache import CacheConfig, FlushKind, SimMachine
from .workloads import KernelSpec

__version__ = "0.1.0"

__all__ = [
    "CacheConfig",
    "EVERY_VISIT",
    "FlushKind",
    "KernelSpec",
    "NEVER",
    "PersistencePlan",
    "SimMachine",
    "__version__",
]
