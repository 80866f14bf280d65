"""Data-oriented robot control runtime: vectorized state, composable control blocks."""

from statebus.state import IndexMap, Snapshot, StateArray, StateSpace

__version__ = "0.1.0"

__all__ = ["IndexMap", "Snapshot", "StateArray", "StateSpace", "__version__"]
