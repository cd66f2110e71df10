"""Peer-to-peer electricity market clearing with transmission and distribution operators."""
from .agents import Agent, TradeGraph
from .clearing import ClearingOptions, ClearingProblem, ClearingSolution, assemble, extract_prices, solve, verify_kkt
from .grid import AcLine, Bus, ConnectionPoint, DistLine, GridModel, HvdcLine
from .policy import AllocationMatrix, PolicyConfig, build_policy

__version__ = "0.1.0"

__all__ = [
    "AcLine", "Agent", "AllocationMatrix", "Bus", "ClearingOptions", "ClearingProblem", "ClearingSolution",
    "ConnectionPoint", "DistLine", "GridModel", "HvdcLine", "PolicyConfig", "TradeGraph", "assemble",
    "build_policy", "extract_prices", "solve", "verify_kkt",
]
