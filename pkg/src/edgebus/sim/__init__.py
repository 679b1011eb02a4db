"""Deterministic virtual-time runtime: drop-in Loop/Network replacements."""

from .loop import SimLoop
from .net import LinkParams, SimNetwork

__all__ = ["SimLoop", "SimNetwork", "LinkParams"]
