"""Procedural grid worlds, agent kinematics, ray-cast vision and binaural audio.

Conventions used throughout the package:

* grids are indexed (row, col); row 0 is the top;
* headings are compass-style right-angle multiples: 0 = north (row-1),
  90 = east, 180 = south, 270 = west;
* motion is 4-connected, one Forward = one cell.

The acoustic model is first-arrival geodesic attenuation with an interaural
level difference: intensity ``A0 / (1 + d)^alpha`` with ``d`` the geodesic
distance in cells, split between ears by the bearing of the first geodesic
step toward the source, so sound bends around corners the way real
propagation grossly does.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

HEADINGS = (0, 90, 180, 270)
HEADING_VECS = {0: (-1, 0), 90: (0, 1), 180: (1, 0), 270: (0, -1)}
# neighbor probe order everywhere a deterministic tie-break is needed
NEIGHBOR_ORDER = ((-1, 0), (0, 1), (1, 0), (0, -1))

UNREACHABLE = np.inf


class Action(Enum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


@dataclass(frozen=True)
class AgentPose:
    cell: tuple[int, int]
    heading: int

    def __post_init__(self):
        if self.heading not in HEADINGS:
            raise ValueError(f"heading {self.heading} is not a right-angle multiple")


@dataclass(frozen=True)
class BinauralAudio:
    left: np.ndarray   # per-band intensities, length K
    right: np.ndarray

    def total(self) -> float:
        return float(self.left.sum() + self.right.sum())


@dataclass(frozen=True)
class Episode:
    world_id: str
    start: AgentPose
    target: tuple[int, int]
    step_limit: int                 # waypoint decisions
    shortest_cells: int             # geodesic length l
    shortest_actions: int           # oracle action count N*
    band_gains: tuple = (1.0, 0.8, 0.6, 0.4)


class GridWorld:
    """Immutable occupancy world with a fixed sounding source.

    ``occupancy[r, c]`` is True where blocked.  ``geodesic_field`` holds
    4-connected shortest distances (in cells) from the source over free
    cells, ``inf`` where unreachable.  Instances are safe to share across
    rollout workers; per-call caches are filled deterministically.
    """

    def __init__(self, occupancy: np.ndarray, source: tuple[int, int],
                 cell_size: float = 0.5, seed: int = 0, world_id: str = ""):
        occupancy = np.asarray(occupancy, dtype=bool)
        if occupancy[source]:
            raise ValueError("source must lie on a free cell")
        self.occupancy = occupancy
        self.occupancy.setflags(write=False)
        self.source = (int(source[0]), int(source[1]))
        self.cell_size = float(cell_size)
        self.seed = int(seed)
        self.world_id = world_id or f"world-{seed}"
        self.geodesic_field = bfs_distances(occupancy, [self.source])
        self.geodesic_field.setflags(write=False)
        self._first_step: dict[tuple[int, int], tuple[int, int] | None] = {}
        self._vis_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    def in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.shape[0] and 0 <= c < self.shape[1]

    def is_free(self, cell) -> bool:
        return self.in_bounds(cell) and not self.occupancy[cell]

    def distance(self, cell) -> float:
        return float(self.geodesic_field[cell])

    def first_step_toward_source(self, cell) -> tuple[int, int] | None:
        """Unit (dr, dc) of the first geodesic step from cell toward the
        source; None at the source or from unreachable cells.  Ties resolve
        in N, E, S, W order."""
        cell = (int(cell[0]), int(cell[1]))
        if cell in self._first_step:
            return self._first_step[cell]
        d = self.geodesic_field[cell]
        step = None
        if np.isfinite(d) and d > 0:
            for dr, dc in NEIGHBOR_ORDER:
                nb = (cell[0] + dr, cell[1] + dc)
                if self.in_bounds(nb) and self.geodesic_field[nb] == d - 1:
                    step = (dr, dc)
                    break
        self._first_step[cell] = step
        return step


def bfs_distances(occupancy: np.ndarray, sources) -> np.ndarray:
    """4-connected unit-cost distances from the source set (inf = unreachable)."""
    h, w = occupancy.shape
    dist = np.full((h, w), UNREACHABLE)
    queue = deque()
    for s in sources:
        if not occupancy[tuple(s)]:
            dist[tuple(s)] = 0.0
            queue.append(tuple(s))
    while queue:
        r, c = queue.popleft()
        nd = dist[r, c] + 1
        for dr, dc in NEIGHBOR_ORDER:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not occupancy[nr, nc] \
                    and nd < dist[nr, nc]:
                dist[nr, nc] = nd
                queue.append((nr, nc))
    return dist


def _free_components(occupancy: np.ndarray) -> list[list[tuple[int, int]]]:
    h, w = occupancy.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if occupancy[r, c] or seen[r, c]:
                continue
            comp = []
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                cr, cc = queue.popleft()
                comp.append((cr, cc))
                for dr, dc in NEIGHBOR_ORDER:
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and not occupancy[nr, nc] \
                            and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            comps.append(comp)
    return comps


def generate_world(seed: int, height: int, width: int,
                   obstacle_density: float, cell_size: float = 0.5,
                   retry_budget: int = 10) -> GridWorld:
    """Deterministic procedural world: scatter obstacles, then repair
    connectivity by carving L-shaped corridors from every stranded free
    component to the largest one."""
    if not 0.0 <= obstacle_density <= 0.4:
        raise ValueError(f"obstacle_density {obstacle_density} outside [0, 0.4]")
    if height < 8 or width < 8:
        raise ValueError("worlds must be at least 8x8")

    rng = np.random.default_rng(seed)
    for _ in range(retry_budget):
        occ = rng.random((height, width)) < obstacle_density
        comps = _free_components(occ)
        if not comps:
            continue
        comps.sort(key=len, reverse=True)
        main = comps[0]
        main_set = set(main)
        for comp in comps[1:]:
            # carve row-then-column from the component toward the closest
            # main-component cell
            src = comp[0]
            dst = min(main_set,
                      key=lambda m: (abs(m[0] - src[0]) + abs(m[1] - src[1]), m))
            r, c = src
            while r != dst[0]:
                r += 1 if dst[0] > r else -1
                occ[r, c] = False
            while c != dst[1]:
                c += 1 if dst[1] > c else -1
                occ[r, c] = False
            main_set.update(comp)
        # re-derive components; carving may have merged more than intended
        comps = _free_components(occ)
        if len(comps) != 1:
            continue
        free = comps[0]
        source = free[rng.integers(len(free))]
        return GridWorld(occ, source, cell_size=cell_size, seed=seed,
                         world_id=f"w{seed}-{height}x{width}")
    raise RuntimeError("connectivity repair exceeded retry budget")


def turn(heading: int, delta: int) -> int:
    return (heading + delta) % 360


def step(world: GridWorld, pose: AgentPose, act: Action) -> tuple[AgentPose, bool]:
    """One low-level action; collision is a flagged outcome, never an error."""
    if act is Action.TURN_LEFT:
        return replace(pose, heading=turn(pose.heading, -90)), False
    if act is Action.TURN_RIGHT:
        return replace(pose, heading=turn(pose.heading, +90)), False
    if act is Action.STOP:
        return pose, False
    dr, dc = HEADING_VECS[pose.heading]
    target = (pose.cell[0] + dr, pose.cell[1] + dc)
    if world.is_free(target):
        return replace(pose, cell=target), False
    return pose, True


def perceive_visibility(world: GridWorld, pose: AgentPose, fov_deg: int = 90,
                        range_cells: int = 6) -> list[tuple[tuple[int, int], bool]]:
    """Ray-cast the forward wedge (±fov/2 about the heading).

    Rays march outward from the agent cell; the first blocked cell on a ray
    is reported occupied and terminates it, cells behind it stay unreported.
    Returns [(cell, occupied)] sorted by cell for determinism.
    """
    key = (pose.cell, pose.heading, fov_deg, range_cells)
    cached = world._vis_cache.get(key)
    if cached is None:
        heading_rad = {0: np.pi / 2, 90: 0.0, 180: -np.pi / 2, 270: np.pi}[pose.heading]
        half = np.deg2rad(fov_deg / 2)
        n_rays = max(9, 4 * range_cells + 1)
        report: dict[tuple[int, int], bool] = {}
        for ang in np.linspace(heading_rad - half, heading_rad + half, n_rays):
            dx, dy = np.cos(ang), np.sin(ang)   # x = col, y = -row
            seen_on_ray = set()
            for t in np.arange(0.5, range_cells + 0.26, 0.25):
                r = pose.cell[0] - t * dy
                c = pose.cell[1] + t * dx
                cell = (int(round(r)), int(round(c)))
                if cell == pose.cell or cell in seen_on_ray:
                    continue
                # enforce the range in cell distance, not ray parameter
                if (cell[0] - pose.cell[0]) ** 2 + (cell[1] - pose.cell[1]) ** 2 \
                        > range_cells ** 2 + 1e-9:
                    continue
                if not world.in_bounds(cell):
                    break
                seen_on_ray.add(cell)
                blocked = bool(world.occupancy[cell])
                report[cell] = report.get(cell, False) or blocked
                if blocked:
                    break
        cached = (np.array(sorted(report), dtype=int).reshape(-1, 2),
                  np.array([report[c] for c in sorted(report)], dtype=bool))
        world._vis_cache[key] = cached
    cells, occ = cached
    return [((int(r), int(c)), bool(o)) for (r, c), o in zip(cells, occ)]


def bearing_sin(world: GridWorld, pose: AgentPose) -> float:
    """sin of the signed angle from the heading to the first geodesic step
    toward the source (+1 = due left); 0 at the source and for fore/aft."""
    first = world.first_step_toward_source(pose.cell)
    if first is None:
        return 0.0
    hr, hc = HEADING_VECS[pose.heading]
    # 2-D cross product in x=col, y=-row coordinates; positive = left
    return float(hr * first[1] - hc * first[0])


def render_audio(world: GridWorld, pose: AgentPose, noise_std: float = 0.0,
                 rng: np.random.Generator | None = None,
                 band_gains=(1.0, 0.8, 0.6, 0.4), base_intensity: float = 1.0,
                 attenuation: float = 1.0) -> BinauralAudio:
    """Binaural band intensities at the pose; silent if the source is
    unreachable.  Left/right split by interaural level difference from the
    geodesic bearing; the per-ear sum is bearing-invariant at zero noise."""
    gains = np.asarray(band_gains, dtype=np.float64)
    d = world.geodesic_field[pose.cell]
    if not np.isfinite(d):
        zeros = np.zeros_like(gains)
        return BinauralAudio(zeros, zeros.copy())
    intensity = base_intensity / (1.0 + d) ** attenuation
    s = bearing_sin(world, pose)
    left = gains * intensity * (1.0 + s) / 2.0
    right = gains * intensity * (1.0 - s) / 2.0
    if noise_std > 0.0:
        if rng is None:
            raise ValueError("noise_std > 0 requires an rng")
        left = left + rng.normal(0.0, noise_std, size=left.shape)
        right = right + rng.normal(0.0, noise_std, size=right.shape)
    return BinauralAudio(np.maximum(left, 0.0), np.maximum(right, 0.0))


# ---------------------------------------------------------------------------
# sound identities: per-band gain profiles, disjoint train/eval sets
# ---------------------------------------------------------------------------

def band_profiles(n_train: int, n_eval: int, bands: int = 4,
                  seed: int = 314159) -> tuple[list[tuple], list[tuple]]:
    """Disjoint train/eval band-gain profiles (the heard/unheard analogue).

    Profiles are random permutations of geometrically spaced gains with a
    per-profile loudness factor; the canonical (1.0, 0.8, ...) profile is
    always the first train profile.
    """
    rng = np.random.default_rng(seed)
    base = np.array([1.0 - 0.2 * b for b in range(bands)]).clip(0.05)
    profiles = [tuple(base.tolist())]
    seen = {profiles[0]}
    while len(profiles) < n_train + n_eval:
        loud = rng.uniform(0.6, 1.4)
        gains = tuple(np.round(rng.permutation(base) * loud, 3).tolist())
        if gains not in seen:
            seen.add(gains)
            profiles.append(gains)
    return profiles[:n_train], profiles[n_train:n_train + n_eval]


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def world_to_json(world: GridWorld) -> dict:
    return {
        "height": world.shape[0],
        "width": world.shape[1],
        "cell_size": world.cell_size,
        "occupancy": "".join("1" if b else "0" for b in world.occupancy.ravel()),
        "source": list(world.source),
        "seed": world.seed,
        "world_id": world.world_id,
    }


def save_world(world: GridWorld, path: str | Path) -> None:
    Path(path).write_text(json.dumps(world_to_json(world), indent=2) + "\n")


def load_world(path: str | Path) -> GridWorld:
    doc = json.loads(Path(path).read_text())
    occ = np.array([ch == "1" for ch in doc["occupancy"]], dtype=bool)
    occ = occ.reshape(doc["height"], doc["width"])
    return GridWorld(occ, tuple(doc["source"]), cell_size=doc["cell_size"],
                     seed=doc["seed"], world_id=doc.get("world_id", ""))


def world_to_pgm(world: GridWorld, path: str | Path) -> None:
    """Plain-text PGM of the occupancy (source cell mid-gray) for inspection."""
    h, w = world.shape
    img = np.where(world.occupancy, 0, 255).astype(int)
    img[world.source] = 128
    lines = [f"P2\n{w} {h}\n255"]
    lines += [" ".join(str(v) for v in row) for row in img]
    Path(path).write_text("\n".join(lines) + "\n")
