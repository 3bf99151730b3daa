"""Certainty-driven early termination and scheduling for reasoning programs."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_trace() -> Path:
    """Path of the packaged 50-program synthetic probe trace."""
    return Path(str(resources.files(__package__).joinpath("data/synthetic_trace.jsonl")))
