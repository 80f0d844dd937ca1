"""Lewis signaling games trained as a β-VAE with a learned message prior."""

from .agents import Agents, Baseline, Receiver, Sender
from .game import GameConfig, ObjectDistribution
from .objectives import BetaSchedule, ObjectiveSpec

__version__ = "0.1.0"

__all__ = [
    "Agents",
    "Baseline",
    "BetaSchedule",
    "GameConfig",
    "ObjectDistribution",
    "ObjectiveSpec",
    "Receiver",
    "Sender",
]
