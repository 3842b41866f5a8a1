"""The observe -> decide -> transition loop shared by training and evaluation.

One EpisodeRun owns the per-episode mutable state: pose, the two global
maps, and the action/path bookkeeping the metrics need.  Episodes end when
the policy picks the center cell (an explicit stop; success iff within the
success radius of the source), when the agent walks onto the source cell
(distance zero is success everywhere), or at the waypoint step limit
(failure even if adjacent).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LabConfig
from .mapping import AcousticMap, GeometryMap, crop_observation_planes, update_acoustic, update_geometry
from .oig import DirectionSet, gather_observations
from .planner import oracle_shortest, plan_to_waypoint, execute_transition
from .world import (Action, AgentPose, Episode, GridWorld, HEADINGS,
                    perceive_visibility, render_audio)


@dataclass
class EpisodeRun:
    world: GridWorld
    episode: Episode
    pose: AgentPose
    gmap: GeometryMap
    amap: AcousticMap
    waypoints: int = 0
    actions: int = 0        # low-level actions; OIG perception turns excluded
    cells_moved: int = 0
    collisions: int = 0
    done: bool = False
    success: bool = False
    stop_issued: bool = False
    d_init: float = 0.0
    trajectory: list = field(default_factory=list)
    waypoint_cells: list = field(default_factory=list)

    @property
    def distance(self) -> float:
        return self.world.distance(self.pose.cell)


def start_episode(world: GridWorld, episode: Episode) -> EpisodeRun:
    run = EpisodeRun(world, episode, episode.start,
                     GeometryMap.empty(world.shape), AcousticMap(world.shape))
    run.d_init = run.distance
    run.trajectory.append((*episode.start.cell, episode.start.heading))
    return run


def observe(run: EpisodeRun, cfg: LabConfig, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Forward-only perception at the current pose: update both maps, return
    ((3, c, c) crop planes, 2K audio feature)."""
    vis = perceive_visibility(run.world, run.pose, cfg.fov_deg, cfg.view_range)
    update_geometry(run.gmap, vis)
    audio = render_audio(run.world, run.pose, cfg.audio_noise_std, rng,
                         run.episode.band_gains, cfg.base_intensity, cfg.attenuation)
    update_acoustic(run.amap, run.pose.cell, audio)
    planes = crop_observation_planes(run.gmap, run.amap, run.pose, cfg.crop_size)
    return planes, np.concatenate([audio.left, audio.right])


def observe_omni(run: EpisodeRun, cfg: LabConfig, rng=None,
                 directions: DirectionSet | None = None):
    """OIG perception sweep; returns (planes list, audio list, rel angles)."""
    dirs = directions or DirectionSet(cfg.oig_directions)
    return gather_observations(
        run.world, run.pose, run.gmap, run.amap, dirs, crop=cfg.crop_size,
        fov_deg=cfg.fov_deg, view_range=cfg.view_range,
        noise_std=cfg.audio_noise_std, rng=rng,
        band_gains=run.episode.band_gains, base_intensity=cfg.base_intensity,
        attenuation=cfg.attenuation)


def student_features(planes: np.ndarray, audio: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(planes).ravel(), audio])


def teacher_features(planes: np.ndarray, goal_vec: np.ndarray) -> np.ndarray:
    """Point-policy features: the two geometry planes plus the scaled goal."""
    geom = np.asarray(planes)[:2]
    return np.concatenate([geom.ravel(), goal_vec])


def policy_features(net, run: EpisodeRun, planes, audio, cfg: LabConfig,
                    heading: int | None = None) -> np.ndarray:
    """Feature vector for either policy kind; ``heading`` overrides the pose
    heading when the observation was gathered while facing elsewhere."""
    if net.kind == "audio":
        return student_features(planes, audio)
    from dataclasses import replace
    from .distill import teacher_goal_vector
    pose = run.pose if heading is None else replace(run.pose, heading=heading)
    goal = teacher_goal_vector(run.episode.target, pose, cfg.goal_scale)
    return teacher_features(planes, goal)


def finish_stop(run: EpisodeRun, cfg: LabConfig) -> None:
    """Explicit stop decision (center cell or stop-policy fire)."""
    run.stop_issued = True
    run.done = True
    run.success = run.distance <= cfg.success_radius


def apply_waypoint(run: EpisodeRun, offset: tuple[int, int], cfg: LabConfig) -> None:
    """Execute one waypoint decision against the world.

    Center offset stops the episode.  Otherwise plan optimistically through
    the known map, walk the plan (perceiving after every low-level action,
    replanning on collision), and terminate successfully the moment the
    agent stands on the source cell.
    """
    run.waypoints += 1
    if offset == (0, 0):
        finish_stop(run, cfg)
        return

    plan = plan_to_waypoint(run.gmap.known_blocked(), run.pose, offset)
    run.waypoint_cells.append(plan.target)

    def on_step(pose: AgentPose, act: Action, collided: bool) -> bool:
        run.actions += 1
        if act is Action.FORWARD and not collided:
            run.cells_moved += 1
        run.trajectory.append((*pose.cell, pose.heading))
        update_geometry(run.gmap,
                        perceive_visibility(run.world, pose, cfg.fov_deg, cfg.view_range))
        if run.world.distance(pose.cell) == 0:
            run.done = True
            run.success = True
            return True
        return False

    pose, _, collided = execute_transition(
        run.world, run.pose, plan, run.gmap.known_blocked,
        replan_budget=cfg.replan_budget, on_step=on_step)
    run.pose = pose
    run.collisions += collided
    if not run.done and run.waypoints >= run.episode.step_limit:
        run.done = True


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------

def sample_episode(world: GridWorld, rng: np.random.Generator, cfg: LabConfig,
                   band_gains=None) -> Episode:
    """Random start pose with geodesic distance in the configured band."""
    d = world.geodesic_field
    ok = np.isfinite(d) & (d >= cfg.min_start_distance) & (d <= cfg.max_start_distance)
    cand = np.argwhere(ok)
    if len(cand) == 0:
        cand = np.argwhere(np.isfinite(d) & (d >= 1))
    if len(cand) == 0:
        raise ValueError("world has no free cell at positive distance from the source")
    r, c = cand[rng.integers(len(cand))]
    heading = HEADINGS[rng.integers(4)]
    start = AgentPose((int(r), int(c)), int(heading))
    l, n_star = oracle_shortest(world, start, world.source)
    return Episode(world.world_id, start, world.source, cfg.waypoint_limit,
                   l, n_star, tuple(band_gains or (1.0, 0.8, 0.6, 0.4)))


def episode_stream(worlds, rng: np.random.Generator, cfg: LabConfig, profiles):
    """Endless deterministic generator over (world, episode) pairs."""
    while True:
        world = worlds[rng.integers(len(worlds))]
        gains = profiles[rng.integers(len(profiles))]
        yield world, sample_episode(world, rng, cfg, gains)


def fixed_episode_set(worlds, rng: np.random.Generator, cfg: LabConfig,
                      profiles, n: int) -> list[tuple[GridWorld, Episode]]:
    """Deterministic evaluation set cycling worlds and sound profiles."""
    out = []
    for i in range(n):
        world = worlds[i % len(worlds)]
        gains = profiles[i % len(profiles)]
        out.append((world, sample_episode(world, rng, cfg, gains)))
    return out
