"""Experiment configuration: one flat, JSON-serializable record of every knob.

A config file is a flat JSON object; missing keys take the documented
defaults, unknown keys are rejected (no silent typos), and every value is
range-checked with all violations reported at once.  ``ORAN_LAB_SEED`` in the
environment overrides ``seed`` when configs are loaded through the CLI.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

SEED_ENV_VAR = "ORAN_LAB_SEED"


@dataclass(frozen=True)
class LabConfig:
    # master seed; every subsystem derives its own stream from it
    seed: int = 1

    # -- worlds ------------------------------------------------------------
    world_height: int = 13
    world_width: int = 13
    obstacle_density: float = 0.18
    cell_size: float = 0.5
    train_worlds: int = 12
    eval_worlds: int = 6
    world_seed: int = 90210

    # -- audio -------------------------------------------------------------
    audio_bands: int = 4
    base_intensity: float = 1.0
    attenuation: float = 1.0
    band_gains: tuple = (1.0, 0.8, 0.6, 0.4)
    train_profiles: int = 6
    eval_profiles: int = 4
    profile_seed: int = 314159
    audio_noise_std: float = 0.02

    # -- episodes ----------------------------------------------------------
    min_start_distance: int = 3
    max_start_distance: int = 9
    waypoint_limit: int = 12
    success_radius: int = 1

    # -- perception --------------------------------------------------------
    fov_deg: int = 90
    view_range: int = 6

    # -- policy network ----------------------------------------------------
    map_size: int = 9            # action-map side m; crop side is 2m-1
    hidden_size: int = 128
    encoder_hidden: int = 128
    map_features: int = 64
    cue_features: int = 32
    goal_scale: float = 0.125
    init_scale: float = 0.01     # action/value head weight scale

    # -- planner -----------------------------------------------------------
    replan_budget: int = 3

    # -- PPO ---------------------------------------------------------------
    learning_rate: float = 2.5e-4
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    grad_clip: float = 0.5
    workers: int = 4
    rollout_len: int = 128       # waypoint steps per worker per update
    ppo_epochs: int = 4
    minibatches: int = 4
    chunk_len: int = 16          # recurrent minibatch sequence length
    updates: int = 150

    # -- distillation ------------------------------------------------------
    lambda_cd: float = 0.3
    distill_k: int = 30
    distill_mode: str = "off"    # off | ccpd | plain
    kl_direction: str = "forward"
    entropy_floor: float = 1e-3  # clamp for 1/H confidence
    kl_floor: float = 1e-8       # floor on q before the log

    # -- teacher training --------------------------------------------------
    teacher_target_sr: float = 0.95
    probe_interval: int = 5
    probe_episodes: int = 30

    # -- OIG ---------------------------------------------------------------
    oig_directions: tuple = (0, 90, 180, 270)
    stop_threshold: float = 0.5

    # -- evaluation --------------------------------------------------------
    eval_episodes: int = 200
    greedy_eval: bool = True

    @property
    def crop_size(self) -> int:
        return 2 * self.map_size - 1

    @property
    def waypoint_cells(self) -> int:
        return self.map_size * self.map_size


class ConfigError(ValueError):
    """Raised for unknown keys, bad types or out-of-range values."""


_RANGES = {
    "obstacle_density": (0.0, 0.4),
    "cell_size": (1e-6, 10.0),
    "base_intensity": (0.0, None),
    "attenuation": (0.0, None),
    "audio_noise_std": (0.0, None),
    "learning_rate": (0.0, 1.0),
    "discount": (0.0, 1.0),
    "gae_lambda": (0.0, 1.0),
    "clip_eps": (1e-6, 1.0),
    "entropy_coef": (0.0, None),
    "value_coef": (0.0, None),
    "grad_clip": (0.0, None),
    "lambda_cd": (0.0, None),
    "entropy_floor": (1e-12, 1.0),
    "kl_floor": (1e-300, 1e-2),
    "teacher_target_sr": (0.0, 1.0),
    "stop_threshold": (0.0, 1.0),
    "goal_scale": (1e-6, None),
    "init_scale": (1e-8, None),
}

_POSITIVE_INTS = {
    "world_height", "world_width", "train_worlds", "eval_worlds",
    "audio_bands", "train_profiles", "eval_profiles", "min_start_distance",
    "max_start_distance", "waypoint_limit", "view_range", "map_size",
    "hidden_size", "encoder_hidden", "map_features", "cue_features",
    "workers", "rollout_len", "ppo_epochs", "minibatches", "chunk_len",
    "updates", "distill_k", "probe_interval", "probe_episodes",
    "eval_episodes",
}

_NONNEG_INTS = {"seed", "world_seed", "profile_seed", "success_radius",
                "replan_budget"}

_CHOICES = {
    "distill_mode": ("off", "ccpd", "plain"),
    "kl_direction": ("forward", "reverse"),
    "fov_deg": (90,),
}


def validate(cfg: LabConfig) -> None:
    """Check every field; raise ConfigError listing all violations."""
    problems = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _POSITIVE_INTS:
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                problems.append(f"{f.name}: expected positive integer, got {v!r}")
        elif f.name in _NONNEG_INTS:
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                problems.append(f"{f.name}: expected nonnegative integer, got {v!r}")
        elif f.name in _RANGES:
            lo, hi = _RANGES[f.name]
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                problems.append(f"{f.name}: expected number, got {v!r}")
            elif (lo is not None and v < lo) or (hi is not None and v > hi):
                problems.append(f"{f.name}: {v!r} outside [{lo}, {hi}]")
        elif f.name in _CHOICES:
            if v not in _CHOICES[f.name]:
                problems.append(f"{f.name}: {v!r} not one of {_CHOICES[f.name]}")
        elif f.name == "band_gains":
            if (not isinstance(v, tuple) or len(v) != cfg.audio_bands
                    or any(not isinstance(g, (int, float)) or g < 0 for g in v)):
                problems.append(f"band_gains: need {cfg.audio_bands} nonnegative numbers, got {v!r}")
        elif f.name == "oig_directions":
            ok = (isinstance(v, tuple) and len(v) >= 1 and len(set(v)) == len(v)
                  and all(isinstance(a, int) and a % 90 == 0 and 0 <= a < 360 for a in v))
            if not ok:
                problems.append(f"oig_directions: {v!r} must be distinct right-angle "
                                "multiples in [0, 360)")
        elif f.name == "greedy_eval":
            if not isinstance(v, bool):
                problems.append(f"greedy_eval: expected bool, got {v!r}")
    if cfg.world_height < 8 or cfg.world_width < 8:
        problems.append("world dimensions must be at least 8x8")
    if cfg.map_size % 2 == 0:
        problems.append("map_size must be odd (center cell is the stop choice)")
    if cfg.min_start_distance > cfg.max_start_distance:
        problems.append("min_start_distance exceeds max_start_distance")
    if cfg.rollout_len % cfg.chunk_len != 0:
        problems.append("rollout_len must be a multiple of chunk_len")
    n_chunks = cfg.workers * (cfg.rollout_len // cfg.chunk_len)
    if n_chunks % cfg.minibatches != 0:
        problems.append(f"minibatches ({cfg.minibatches}) must divide the chunk "
                        f"count ({n_chunks})")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


def load_config(path: str | Path | None = None,
                overrides: dict | None = None,
                apply_env_seed: bool = False) -> LabConfig:
    """Build a validated LabConfig from a JSON file and/or override dict.

    An empty or missing-content file yields all defaults.  Unknown keys are
    rejected with every offending key named.
    """
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            loaded = json.loads(text)
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
            data.update(loaded)
    if overrides:
        data.update(overrides)

    known = {f.name for f in fields(LabConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))

    # JSON has no tuples; normalize list-valued fields
    for key in ("band_gains", "oig_directions"):
        if key in data and isinstance(data[key], list):
            data[key] = tuple(data[key])

    cfg = LabConfig(**data)
    if apply_env_seed and SEED_ENV_VAR in os.environ:
        cfg = dataclasses.replace(cfg, seed=int(os.environ[SEED_ENV_VAR]))
    validate(cfg)
    return cfg


def to_dict(cfg: LabConfig) -> dict:
    d = dataclasses.asdict(cfg)
    for key in ("band_gains", "oig_directions"):
        d[key] = list(d[key])
    return d


def dump_config(cfg: LabConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def config_hash(cfg: LabConfig) -> str:
    """Stable content hash used by manifests and checkpoint metadata."""
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
