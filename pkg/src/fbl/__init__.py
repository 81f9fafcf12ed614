"""Deterministic simulator of federated learning with client-side class rebalancing."""

from .config import FederationConfig
from .federation import FederationRun, RoundMetrics, run_federation

__all__ = ["FederationConfig", "FederationRun", "RoundMetrics", "run_federation"]
__version__ = "0.1.0"
