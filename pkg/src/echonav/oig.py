"""Omnidirectional information gathering: perceive from every direction in a
direction set, derotate each resulting action map into a common frame and
average, plus the auxiliary stop policy.

Pure inference-time machinery: it wraps a trained policy without touching
its parameters.  Map rotation is counterclockwise-positive (`rotate_map(M,
90)` turns a 3x3 [[a,b,c],[d,e,f],[g,h,i]] into [[c,f,i],[b,e,h],[a,d,g]]);
headings are compass-style, and a map produced while facing relative angle
w comes back to the common frame as rotate_map(M, -w).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .mapping import crop_observation_planes, ego_crop, update_acoustic, update_geometry
from .world import GridWorld, perceive_visibility, render_audio


@dataclass(frozen=True)
class DirectionSet:
    """Ordered absolute gather headings; right-angle multiples, distinct."""
    angles: tuple = (0, 90, 180, 270)

    def __post_init__(self):
        if len(self.angles) == 0 or len(set(self.angles)) != len(self.angles):
            raise ValueError("direction set must be nonempty and distinct")
        for a in self.angles:
            if a % 90 != 0 or not 0 <= a < 360:
                raise ValueError(f"direction {a} is not a right-angle multiple in [0, 360)")


def rotate_map(action_map: np.ndarray, theta: int) -> np.ndarray:
    """Exact grid rotation of a square map about its center; theta a multiple
    of 90 degrees, counterclockwise-positive.  Mass is preserved exactly."""
    if theta % 90 != 0:
        raise ValueError(f"rotation {theta} is not a right-angle multiple")
    return np.ascontiguousarray(np.rot90(action_map, (theta // 90) % 4))


def aggregate(maps, rel_angles) -> np.ndarray:
    """Mean of action maps after derotating each by its relative gather angle.

    ``rel_angles[i]`` is the heading of maps[i] relative to the common frame;
    each map is brought home with rotate_map(M, -angle).  The mean of
    normalized maps is normalized by construction.
    """
    maps = list(maps)
    rel_angles = list(rel_angles)
    if len(maps) != len(rel_angles):
        raise ValueError("one relative angle per map is required")
    if not maps:
        raise ValueError("aggregate needs at least one map")
    out = np.zeros_like(np.asarray(maps[0], dtype=np.float64))
    for m, w in zip(maps, rel_angles):
        out += rotate_map(np.asarray(m, dtype=np.float64), -w)
    return out / len(maps)


def gather_observations(world: GridWorld, pose, gmap, amap, directions: DirectionSet,
                        *, crop: int, fov_deg: int = 90, view_range: int = 6,
                        noise_std: float = 0.0, rng=None,
                        band_gains=(1.0, 0.8, 0.6, 0.4), base_intensity: float = 1.0,
                        attenuation: float = 1.0):
    """Perceive from every absolute heading in the set, updating the shared
    global maps, and snapshot one egocentric observation per direction.

    Returns (list of (3, c, c) map-plane stacks, list of 2K audio features,
    list of relative angles w.r.t. the agent's original heading).  The agent
    ends back at its original heading; the perception turns are free —
    callers must not count them in action metrics.
    """
    planes, audios, rels = [], [], []
    for angle in directions.angles:
        look = replace(pose, heading=angle)
        update_geometry(gmap, perceive_visibility(world, look, fov_deg, view_range))
        audio = render_audio(world, look, noise_std, rng, band_gains,
                             base_intensity, attenuation)
        update_acoustic(amap, look.cell, audio)
        planes.append(crop_observation_planes(gmap, amap, look, crop))
        audios.append(np.concatenate([audio.left, audio.right]))
        rels.append((angle - pose.heading) % 360)
    return planes, audios, rels


def omni_action_map(policy, hidden: np.ndarray, feats_list, rels
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Forward the policy once per gathered direction and average the
    derotated maps (the omnidirectional decision rule).

    ``feats_list[i]`` is the policy's feature vector for the observation
    gathered at relative angle ``rels[i]``.  Each directional pass forks a
    read-only copy of the recurrent state; only the original-heading pass
    (relative angle 0) commits its hidden update.
    """
    maps = []
    next_hidden = hidden
    for feats, rel in zip(feats_list, rels):
        amap, _, h = policy.action_map(feats, hidden)
        maps.append(amap)
        if rel == 0:
            next_hidden = h
    return aggregate(maps, rels), next_hidden


# ---------------------------------------------------------------------------
# stop policy
# ---------------------------------------------------------------------------

def stop_feature(acoustic_crop: np.ndarray, audio_feature: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(acoustic_crop).ravel(), audio_feature])


def stop_policy(stop_net, acoustic_crop: np.ndarray, audio_feature: np.ndarray) -> float:
    """Probability that the agent currently stands within the success radius."""
    with ad.no_grad():
        logit = stop_net.forward(stop_feature(acoustic_crop, audio_feature)[None, :])
        prob = ad.sigmoid(logit).data[0, 0]
    return float(prob)


def stop_dataset(worlds, cfg, rng: np.random.Generator, profiles,
                 n_episodes: int = 150):
    """Labeled stop-net observations from geodesic-following walks.

    Each walk records one (acoustic crop, audio feature) pair per waypoint
    step plus one at the source after arrival; label = within the success
    radius.  Walks pass through every distance down to zero, so both classes
    are naturally covered.
    """
    from .nav import apply_waypoint, observe, sample_episode, start_episode
    from .planner import world_to_ego_delta
    X, y = [], []

    def record(run):
        planes, audio = observe(run, cfg, rng)
        X.append(stop_feature(planes[2], audio))
        y.append(1.0 if run.distance <= cfg.success_radius else 0.0)

    for _ in range(n_episodes):
        world = worlds[rng.integers(len(worlds))]
        gains = profiles[rng.integers(len(profiles))]
        run = start_episode(world, sample_episode(world, rng, cfg, gains))
        while not run.done:
            record(run)
            step_vec = world.first_step_toward_source(run.pose.cell)
            if step_vec is None:
                break
            apply_waypoint(run, world_to_ego_delta(step_vec, run.pose.heading), cfg)
        if run.distance == 0:
            record(run)
    return np.stack(X), np.asarray(y)


def train_stop_net(worlds, cfg, rng: np.random.Generator, profiles,
                   n_episodes: int = 150, epochs: int = 40, batch: int = 128,
                   lr: float = 1e-3):
    """Supervised stop policy: sigmoid head over audio + acoustic crop,
    binary cross-entropy on the at-goal label."""
    from .nets import Adam, DenseNet
    X, yv = stop_dataset(worlds, cfg, rng, profiles, n_episodes)
    net = DenseNet(X.shape[1], (64, 32), 1, seed=int(rng.integers(2 ** 31)),
                   kind="stopnet")
    opt = Adam(net, lr=lr, grad_clip=1.0)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch):
            idx = order[s:s + batch]
            target = yv[idx][:, None]
            p = ad.sigmoid(net.forward(X[idx]))
            loss = ad.mul((target * ad.log(p) + (1.0 - target) * ad.log(1.0 - p)).mean(), -1.0)
            net.zero_grad()
            loss.backward()
            opt.step()
    return net
