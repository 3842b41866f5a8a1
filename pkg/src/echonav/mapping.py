"""Global geometry/acoustic maps and egocentric crops.

The geometry map has an explored channel and an occupied channel in the same
frame as the world grid; perception is noiseless, so occupied bits agree with
ground truth on explored cells and exploration never reverts.  The acoustic
map stores the latest total sound intensity observed at each cell the agent
has occupied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import AgentPose, BinauralAudio


@dataclass
class GeometryMap:
    explored: np.ndarray   # H x W, 0/1
    occupied: np.ndarray   # H x W, 0/1; occupied implies explored

    @classmethod
    def empty(cls, shape) -> "GeometryMap":
        return cls(np.zeros(shape, dtype=np.uint8), np.zeros(shape, dtype=np.uint8))

    def known_blocked(self) -> np.ndarray:
        """Cells the planner must avoid: seen and occupied."""
        return (self.explored & self.occupied).astype(bool)

    def copy(self) -> "GeometryMap":
        return GeometryMap(self.explored.copy(), self.occupied.copy())


class AcousticMap:
    def __init__(self, shape):
        self.intensity = np.zeros(shape, dtype=np.float64)

    def copy(self) -> "AcousticMap":
        out = AcousticMap(self.intensity.shape)
        out.intensity = self.intensity.copy()
        return out


def update_geometry(g: GeometryMap, visibility) -> GeometryMap:
    """Mark reported cells explored and record their occupied bit, in place.

    Idempotent; explored cells never revert to unexplored.
    """
    for (r, c), occ in visibility:
        g.explored[r, c] = 1
        g.occupied[r, c] = 1 if occ else 0
    return g


def update_acoustic(i: AcousticMap, cell, audio: BinauralAudio) -> AcousticMap:
    """Record the total intensity (summed over bands and ears) at the cell
    the agent occupies; revisits overwrite."""
    i.intensity[cell] = audio.total()
    return i


def _window(grid: np.ndarray, center, c: int, pad_value=0) -> np.ndarray:
    """c x c copy of ``grid`` centered at ``center``; out-of-world cells take
    ``pad_value``."""
    h, w = grid.shape
    half = c // 2
    out = np.full((c, c), pad_value, dtype=np.float64)
    r0, c0 = center[0] - half, center[1] - half
    gr0, gc0 = max(r0, 0), max(c0, 0)
    gr1, gc1 = min(r0 + c, h), min(c0 + c, w)
    if gr0 < gr1 and gc0 < gc1:
        out[gr0 - r0:gr1 - r0, gc0 - c0:gc1 - c0] = grid[gr0:gr1, gc0:gc1]
    return out


def ego_crop(grid: np.ndarray, pose: AgentPose, c: int) -> np.ndarray:
    """Egocentric c x c crop: agent at the center, heading pointing up.

    The rotation is an exact right-angle grid rotation (rot90 by heading/90),
    so crops at heading theta equal the heading-0 crop rotated by theta in
    the heading sense.  Out-of-world cells pad as 0/unexplored.
    """
    if c % 2 == 0:
        raise ValueError("crop size must be odd")
    win = _window(np.asarray(grid, dtype=np.float64), pose.cell, c)
    return np.ascontiguousarray(np.rot90(win, pose.heading // 90))


def crop_observation_planes(gmap: GeometryMap, amap: AcousticMap,
                            pose: AgentPose, c: int) -> np.ndarray:
    """(3, c, c) stack: explored, occupied, acoustic — the map half of an
    observation."""
    return np.stack([
        ego_crop(gmap.explored, pose, c),
        ego_crop(gmap.occupied, pose, c),
        ego_crop(amap.intensity, pose, c),
    ])


def map_to_pgm(grid: np.ndarray, path) -> None:
    """Debug dump of any scalar map as a plain-text PGM (auto-scaled)."""
    from pathlib import Path
    arr = np.asarray(grid, dtype=np.float64)
    top = arr.max() if arr.max() > 0 else 1.0
    img = np.round(255 * (1.0 - arr / top)).astype(int)
    h, w = img.shape
    lines = [f"P2\n{w} {h}\n255"]
    lines += [" ".join(str(v) for v in row) for row in img]
    Path(path).write_text("\n".join(lines) + "\n")
