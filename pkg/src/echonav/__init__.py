"""Desk-scale audio-goal navigation laboratory.

Submodules: world (simulator), mapping (global maps + crops), planner
(Dijkstra + transitions), autodiff/nets (minimal tensor engine and the
waypoint policies), distill (confidence-weighted cross-task distillation),
rl (PPO training), oig (omnidirectional gathering + stop policy), evalx
(metrics, ensembling, baselines), config and cli.
"""

from .config import LabConfig, load_config
from .world import (Action, AgentPose, BinauralAudio, Episode, GridWorld,
                    generate_world, perceive_visibility, render_audio, step)

__all__ = [
    "Action", "AgentPose", "BinauralAudio", "Episode", "GridWorld",
    "LabConfig", "generate_world", "load_config", "perceive_visibility",
    "render_audio", "step",
]

__version__ = "0.1.0"
