"""Embedded in-memory transactional key-value engine with parallel logging and recovery."""

from .engine import Engine, EngineConfig
from .recovery import Recovery, compute_elv, recover
from .storage import Database, TableSpec

__all__ = ["Database", "Engine", "EngineConfig", "Recovery", "TableSpec", "compute_elv", "recover"]
