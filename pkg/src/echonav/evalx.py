"""Episode evaluation, navigation metrics, ensembling and baselines.

Metrics follow the embodied-navigation conventions: SR is the success rate,
SPL weights success by l/max(p, l), SoftSPL replaces the binary success with
goal progress, SNA weights success by N*/max(N, N*), NE is the mean final
geodesic distance and NA the mean action count.  OIG perception turns are
never counted in N or p.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import LabConfig
from .nav import (EpisodeRun, apply_waypoint, finish_stop, observe,
                  observe_omni, policy_features, start_episode,
                  student_features, teacher_features)
from .nets import DenseNet, WaypointPolicy, Adam, sample_waypoint
from .oig import DirectionSet, omni_action_map, stop_policy
from .world import GridWorld


@dataclass
class EpisodeResult:
    success: bool
    path_cells: int          # p: cells actually traversed
    shortest_cells: int      # l
    actions: int             # N: low-level actions (no OIG turns, no stop)
    shortest_actions: int    # N*
    d_init: float
    d_final: float
    waypoints: int
    stop_issued: bool = False

    @classmethod
    def from_run(cls, run: EpisodeRun) -> "EpisodeResult":
        return cls(run.success, run.cells_moved, run.episode.shortest_cells,
                   run.actions, run.episode.shortest_actions, run.d_init,
                   run.distance, run.waypoints, run.stop_issued)


def success(result: EpisodeResult, radius: int = 1) -> bool:
    """Independent success re-check: the agent either walked onto the source
    (distance 0) or issued an explicit stop within the radius.  A step-limit
    end without a stop is a failure even when adjacent."""
    if result.d_final == 0:
        return True
    return bool(result.stop_issued and result.d_final <= radius)


def metrics(results: list[EpisodeResult]) -> dict:
    if not results:
        raise ValueError("metrics need at least one episode result")
    sr, spl, soft, sna, ne, na = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    for r in results:
        s = 1.0 if r.success else 0.0
        denom_p = max(r.path_cells, r.shortest_cells, 1)
        denom_n = max(r.actions, r.shortest_actions, 1)
        ratio = r.shortest_cells / denom_p
        progress = max(0.0, 1.0 - r.d_final / r.d_init) if r.d_init > 0 \
            else (1.0 if r.d_final == 0 else 0.0)
        sr += s
        spl += s * ratio
        soft += progress * ratio
        sna += s * (r.shortest_actions / denom_n)
        ne += r.d_final
        na += r.actions
    n = len(results)
    return {"SR": sr / n, "SPL": spl / n, "SoftSPL": soft / n, "SNA": sna / n,
            "NE": ne / n, "NA": na / n, "episodes": n}


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------

def ensemble_forward(nets, hiddens, feats: np.ndarray):
    """Element-wise mean of the per-model action maps; each model keeps its
    own recurrent state.  Returns (mean m x m map, new hidden list)."""
    maps, new_hiddens = [], []
    for net, h in zip(nets, hiddens):
        amap, _, h2 = net.action_map(feats, h)
        maps.append(amap)
        new_hiddens.append(h2)
    return np.mean(maps, axis=0), new_hiddens


class PolicyAgent:
    """Single or ensembled waypoint policies, optionally wrapped with OIG."""

    def __init__(self, nets, greedy: bool = True, oig: bool = False,
                 stop_net: DenseNet | None = None,
                 directions: DirectionSet | None = None):
        self.nets = list(nets)
        self.greedy = greedy
        self.oig = oig
        self.stop_net = stop_net
        self.directions = directions
        self.hiddens: list[np.ndarray] = []

    def begin_episode(self):
        self.hiddens = [net.init_hidden(1)[0] for net in self.nets]

    def decide(self, run: EpisodeRun, cfg: LabConfig, rng) -> tuple[int, int] | None:
        """One waypoint decision; None means an explicit stop."""
        if self.oig:
            dirs = self.directions or DirectionSet(cfg.oig_directions)
            planes, audios, rels = observe_omni(run, cfg, rng, dirs)
            if self.stop_net is not None:
                try:
                    i0 = rels.index(0)
                    acoustic, audio = planes[i0][2], audios[i0]
                except ValueError:
                    pl, audio = observe(run, cfg, rng)
                    acoustic = pl[2]
                if stop_policy(self.stop_net, acoustic, audio) > cfg.stop_threshold:
                    return None
            maps = []
            for i, net in enumerate(self.nets):
                feats_list = [
                    policy_features(net, run, pl, au, cfg,
                                    heading=(run.pose.heading + rel) % 360)
                    for pl, au, rel in zip(planes, audios, rels)]
                omni, h = omni_action_map(net, self.hiddens[i], feats_list, rels)
                maps.append(omni)
                self.hiddens[i] = h
            amap = np.mean(maps, axis=0)
        else:
            planes, audio = observe(run, cfg, rng)
            maps, new_hiddens = [], []
            for net, h in zip(self.nets, self.hiddens):
                feats = policy_features(net, run, planes, audio, cfg)
                m, _, h2 = net.action_map(feats, h)
                maps.append(m)
                new_hiddens.append(h2)
            amap = np.mean(maps, axis=0)
            self.hiddens = new_hiddens
        offset, _ = sample_waypoint(amap, rng, greedy=self.greedy)
        return offset


class RandomAgent:
    """Uniform random waypoints: the no-skill reference regime."""

    def begin_episode(self):
        pass

    def decide(self, run: EpisodeRun, cfg: LabConfig, rng) -> tuple[int, int]:
        half = cfg.map_size // 2
        return (int(rng.integers(-half, half + 1)), int(rng.integers(-half, half + 1)))


class OracleAgent:
    """Follows the true geodesic one cell at a time; definitionally SPL = 1."""

    def begin_episode(self):
        pass

    def decide(self, run: EpisodeRun, cfg: LabConfig, rng):
        from .planner import world_to_ego_delta
        step_vec = run.world.first_step_toward_source(run.pose.cell)
        if step_vec is None:
            return None
        observe(run, cfg, rng)   # keep the known map fresh like a real agent
        return world_to_ego_delta(step_vec, run.pose.heading)


class PseudoGpsAgent:
    """Point-goal teacher fed goal vectors predicted from audio alone."""

    def __init__(self, teacher: WaypointPolicy, direction_net: DenseNet,
                 greedy: bool = True):
        self.teacher = teacher
        self.direction_net = direction_net
        self.greedy = greedy
        self.hidden = None

    def begin_episode(self):
        self.hidden = self.teacher.init_hidden(1)[0]

    def decide(self, run: EpisodeRun, cfg: LabConfig, rng):
        planes, audio = observe(run, cfg, rng)
        goal = predict_goal_vector(self.direction_net, audio) * cfg.goal_scale
        feats = teacher_features(planes, goal)
        amap, _, self.hidden = self.teacher.action_map(feats, self.hidden)
        offset, _ = sample_waypoint(amap, rng, greedy=self.greedy)
        return offset


# ---------------------------------------------------------------------------
# episode runner
# ---------------------------------------------------------------------------

def run_episodes(agent, episode_set, cfg: LabConfig,
                 rng: np.random.Generator | None = None,
                 collect_trajectories: bool = False):
    """Evaluate the agent over a fixed episode set.

    Deterministic given the rng seed (greedy agents with zero audio noise
    need no rng at all).  Returns the EpisodeResult list, and the trajectory
    records too when requested.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    results = []
    trajectories = []
    for world, episode in episode_set:
        run = start_episode(world, episode)
        agent.begin_episode()
        while not run.done:
            offset = agent.decide(run, cfg, rng)
            if offset is None:
                run.waypoints += 1
                finish_stop(run, cfg)
                break
            apply_waypoint(run, offset, cfg)
        results.append(EpisodeResult.from_run(run))
        if collect_trajectories:
            trajectories.append({
                "world_id": world.world_id,
                "start": [*episode.start.cell, episode.start.heading],
                "target": list(episode.target),
                "trajectory": [list(p) for p in run.trajectory],
                "waypoints": [list(wp) for wp in run.waypoint_cells],
                "stop_issued": run.stop_issued,
                "success": run.success,
            })
    if collect_trajectories:
        return results, trajectories
    return results


def recheck_from_trajectory(world: GridWorld, record: dict,
                            cfg: LabConfig) -> dict:
    """Replay-oracle recomputation of outcome quantities from a logged
    trajectory (used to audit the runner's bookkeeping)."""
    traj = record["trajectory"]
    cells = [(r, c) for r, c, _ in traj]
    p = sum(1 for a, b in zip(cells, cells[1:]) if a != b)
    d_final = world.distance(cells[-1])
    succ = d_final == 0 or (record["stop_issued"] and d_final <= cfg.success_radius)
    return {"p": p, "n": len(traj) - 1, "d_final": d_final, "success": succ}


# ---------------------------------------------------------------------------
# audio direction predictor (pseudo-GPS baseline)
# ---------------------------------------------------------------------------

def direction_dataset(worlds, cfg: LabConfig, rng: np.random.Generator,
                      profiles, n_samples: int):
    """(audio feature, [unit ego direction, geodesic distance]) pairs from
    random poses; the supervised data for the pseudo-GPS predictor."""
    from .planner import world_to_ego_delta
    from .world import AgentPose, HEADINGS, render_audio
    X = np.zeros((n_samples, 2 * cfg.audio_bands))
    Y = np.zeros((n_samples, 3))
    made = 0
    while made < n_samples:
        world = worlds[rng.integers(len(worlds))]
        gains = profiles[rng.integers(len(profiles))]
        free = np.argwhere(np.isfinite(world.geodesic_field)
                           & (world.geodesic_field > 0))
        r, c = free[rng.integers(len(free))]
        pose = AgentPose((int(r), int(c)), int(HEADINGS[rng.integers(4)]))
        audio = render_audio(world, pose, cfg.audio_noise_std, rng, gains,
                             cfg.base_intensity, cfg.attenuation)
        delta = (world.source[0] - pose.cell[0], world.source[1] - pose.cell[1])
        ego = world_to_ego_delta(delta, pose.heading)
        norm = float(np.hypot(*ego))
        X[made] = np.concatenate([audio.left, audio.right])
        Y[made] = [ego[0] / norm, ego[1] / norm, world.distance(pose.cell)]
        made += 1
    return X, Y


def train_direction_net(worlds, cfg: LabConfig, rng: np.random.Generator,
                        profiles, n_samples: int = 4000, epochs: int = 60,
                        batch: int = 128, lr: float = 1e-3) -> DenseNet:
    """Fit audio -> (unit goal direction, distance) by plain MSE."""
    from . import autodiff as ad
    X, Y = direction_dataset(worlds, cfg, rng, profiles, n_samples)
    net = DenseNet(X.shape[1], (64, 32), 3, seed=int(rng.integers(2 ** 31)),
                   kind="dirpred")
    opt = Adam(net, lr=lr, grad_clip=1.0)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch):
            idx = order[s:s + batch]
            pred = net.forward(X[idx])
            loss = ad.square(pred - Y[idx]).mean()
            net.zero_grad()
            loss.backward()
            opt.step()
    return net


def predict_goal_vector(net: DenseNet, audio_feature: np.ndarray) -> np.ndarray:
    """Predicted ego goal displacement: unit direction scaled by distance."""
    from . import autodiff as ad
    with ad.no_grad():
        out = net.forward(audio_feature[None, :]).data[0]
    direction = out[:2]
    norm = float(np.hypot(*direction))
    if norm > 1e-9:
        direction = direction / norm
    dist = max(float(out[2]), 0.0)
    return direction * dist


def direction_angular_error(net: DenseNet, X: np.ndarray, Y: np.ndarray) -> float:
    """Mean angular error (radians) of the predicted goal direction."""
    from . import autodiff as ad
    with ad.no_grad():
        pred = net.forward(X).data[:, :2]
    norms = np.linalg.norm(pred, axis=1, keepdims=True).clip(1e-9)
    cosang = np.clip((pred / norms * Y[:, :2]).sum(axis=1), -1.0, 1.0)
    return float(np.mean(np.arccos(cosang)))


# ---------------------------------------------------------------------------
# artifacts: metrics CSV, trajectory JSONL, SVG renders
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("SR", "SPL", "SoftSPL", "SNA", "NE", "NA", "episodes")


def metrics_csv_rows(rows: list[tuple[str, dict]]) -> str:
    """Fixed-format CSV (label + metric columns); byte-stable on replay."""
    out = ["config," + ",".join(METRIC_COLUMNS)]
    for label, m in rows:
        out.append(label + "," + ",".join(_fmt(m[k]) for k in METRIC_COLUMNS))
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".10g")


def write_trajectories(records: list[dict], path: str | Path) -> None:
    with Path(path).open("w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def _age_color(frac: float) -> str:
    r = int(round(220 * (1.0 - frac) + 30 * frac))
    g = int(round(40 * (1.0 - frac) + 180 * frac))
    return f"rgb({r},{g},60)"


def render_trajectory_svg(world: GridWorld, record: dict, path: str | Path,
                          scale: int = 24) -> None:
    """Occupancy plus the agent path, colored red (old) to green (recent)."""
    h, w = world.shape
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{w * scale}" height="{h * scale}" '
             f'viewBox="0 0 {w * scale} {h * scale}">',
             f'<rect width="{w * scale}" height="{h * scale}" fill="white"/>']
    for r in range(h):
        for c in range(w):
            if world.occupancy[r, c]:
                lines.append(f'<rect x="{c * scale}" y="{r * scale}" '
                             f'width="{scale}" height="{scale}" fill="#444"/>')
    sr, sc = world.source
    lines.append(f'<circle cx="{(sc + 0.5) * scale}" cy="{(sr + 0.5) * scale}" '
                 f'r="{scale * 0.38}" fill="gold" stroke="black"/>')
    traj = record["trajectory"]
    cells = [(r, c) for r, c, _ in traj]
    segs = max(len(cells) - 1, 1)
    for i, (a, b) in enumerate(zip(cells, cells[1:])):
        if a == b:
            continue
        color = _age_color(i / segs)
        lines.append(
            f'<line x1="{(a[1] + 0.5) * scale}" y1="{(a[0] + 0.5) * scale}" '
            f'x2="{(b[1] + 0.5) * scale}" y2="{(b[0] + 0.5) * scale}" '
            f'stroke="{color}" stroke-width="{scale * 0.22:.1f}" '
            f'stroke-linecap="round"/>')
    r0, c0, _ = traj[0]
    lines.append(f'<circle cx="{(c0 + 0.5) * scale}" cy="{(r0 + 0.5) * scale}" '
                 f'r="{scale * 0.3}" fill="none" stroke="red" stroke-width="2"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")
