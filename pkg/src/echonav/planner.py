"""Shortest-path planning on the agent's known map and low-level execution.

Planning is optimistic: unexplored cells count as traversable, only cells the
agent has actually seen occupied block a plan.  Execution replans on
collision with a not-yet-known obstacle, up to a per-waypoint budget.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .world import (Action, AgentPose, GridWorld, HEADING_VECS, NEIGHBOR_ORDER,
                    bfs_distances, step)

_HEADING_OF_VEC = {v: h for h, v in HEADING_VECS.items()}


def dijkstra_field(blocked: np.ndarray, sources) -> tuple[np.ndarray, np.ndarray]:
    """Exact unit-cost shortest distances from the source set on a 4-connected
    grid; blocked cells are impassable.  Returns (distances with inf for
    unreachable, parent flat-indices with -1 for roots/unreached)."""
    blocked = np.asarray(blocked, dtype=bool)
    h, w = blocked.shape
    dist = np.full((h, w), np.inf)
    parent = np.full((h, w), -1, dtype=np.int64)
    heap = []
    any_source = False
    for s in sources:
        s = (int(s[0]), int(s[1]))
        if not blocked[s]:
            any_source = True
            dist[s] = 0.0
            heapq.heappush(heap, (0.0, s))
    if not any_source:
        raise ValueError("all sources are blocked")
    while heap:
        d, (r, c) = heapq.heappop(heap)
        if d > dist[r, c]:
            continue
        for dr, dc in NEIGHBOR_ORDER:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not blocked[nr, nc] \
                    and d + 1.0 < dist[nr, nc]:
                dist[nr, nc] = d + 1.0
                parent[nr, nc] = r * w + c
                heapq.heappush(heap, (d + 1.0, (nr, nc)))
    return dist, parent


def _trace_path(parent: np.ndarray, start, goal) -> list[tuple[int, int]]:
    """Cells from start to goal inclusive, following parent pointers back."""
    w = parent.shape[1]
    path = [goal]
    while path[-1] != start:
        p = parent[path[-1]]
        path.append((int(p // w), int(p % w)))
    path.reverse()
    return path


def _turns_between(h_from: int, h_to: int) -> list[Action]:
    delta = (h_to - h_from) % 360
    if delta == 0:
        return []
    if delta == 90:
        return [Action.TURN_RIGHT]
    if delta == 270:
        return [Action.TURN_LEFT]
    return [Action.TURN_RIGHT, Action.TURN_RIGHT]


def actions_along(path: list[tuple[int, int]], heading: int) -> list[Action]:
    """Turn+forward realization of a cell path from the given heading."""
    acts: list[Action] = []
    h = heading
    for a, b in zip(path, path[1:]):
        want = _HEADING_OF_VEC[(b[0] - a[0], b[1] - a[1])]
        acts += _turns_between(h, want)
        acts.append(Action.FORWARD)
        h = want
    return acts


def ego_to_world_delta(offset: tuple[int, int], heading: int) -> tuple[int, int]:
    """Rotate an egocentric (heading-up) offset into world (row, col) deltas."""
    dr, dc = offset
    if heading == 0:
        return dr, dc
    if heading == 90:
        return dc, -dr
    if heading == 180:
        return -dr, -dc
    return -dc, dr


def world_to_ego_delta(delta: tuple[int, int], heading: int) -> tuple[int, int]:
    """Inverse of ego_to_world_delta."""
    dr, dc = delta
    if heading == 0:
        return dr, dc
    if heading == 90:
        return -dc, dr
    if heading == 180:
        return -dr, -dc
    return dc, -dr


@dataclass
class Plan:
    target: tuple[int, int]            # world cell actually planned to
    path: list[tuple[int, int]]        # cells, start inclusive
    actions: list[Action]


def plan_to_waypoint(known_blocked: np.ndarray, pose: AgentPose,
                     offset: tuple[int, int]) -> Plan:
    """Plan turns+forwards from pose to an egocentric waypoint offset.

    ``known_blocked`` marks cells known occupied; everything else (free or
    unexplored) is traversable.  A known-occupied, out-of-bounds or
    unreachable target degrades to the nearest reachable cell (Manhattan
    distance to the target, ties by distance from the agent then row-major).
    Offset (0, 0) yields the empty plan, interpreted as Stop by callers.
    """
    h, w = known_blocked.shape
    dr, dc = ego_to_world_delta(offset, pose.heading)
    want = (pose.cell[0] + dr, pose.cell[1] + dc)
    if want == pose.cell:
        return Plan(pose.cell, [pose.cell], [])

    dist, parent = dijkstra_field(known_blocked, [pose.cell])
    target = want
    in_bounds = 0 <= want[0] < h and 0 <= want[1] < w
    if not in_bounds or not np.isfinite(dist[want]):
        reach = np.argwhere(np.isfinite(dist))
        manh = np.abs(reach[:, 0] - want[0]) + np.abs(reach[:, 1] - want[1])
        dvals = dist[reach[:, 0], reach[:, 1]]
        order = np.lexsort((reach[:, 1], reach[:, 0], dvals, manh))
        target = (int(reach[order[0]][0]), int(reach[order[0]][1]))
        if target == pose.cell:
            return Plan(pose.cell, [pose.cell], [])
    path = _trace_path(parent, pose.cell, target)
    return Plan(target, path, actions_along(path, pose.heading))


def execute_transition(world: GridWorld, pose: AgentPose, plan: Plan,
                       known_blocked, replan_budget: int = 3,
                       on_step=None) -> tuple[AgentPose, int, int]:
    """Run the plan's low-level actions against the true world.

    A collision means the plan crossed a not-yet-known obstacle: the caller's
    ``on_step`` hook perceives it into the map, so we replan toward the same
    target, up to ``replan_budget`` times.  ``known_blocked`` is the blocked
    mask or a zero-argument callable returning the current one (so replans
    see mid-transition percepts).  A hard cap of len(plan) x budget low-level
    steps guarantees termination.  Returns (pose, actions taken, collisions).
    """
    budget = max(1, replan_budget)
    cap = max(1, len(plan.actions)) * budget
    taken = 0
    collisions = 0
    replans = 0
    queue = list(plan.actions)
    while queue and taken < cap:
        act = queue.pop(0)
        new_pose, collided = step(world, pose, act)
        taken += 1
        pose = new_pose
        if on_step is not None:
            stop_now = on_step(pose, act, collided)
            if stop_now:
                return pose, taken, collisions
        if collided:
            collisions += 1
            replans += 1
            if replans > budget:
                break
            offset = world_to_ego_delta(
                (plan.target[0] - pose.cell[0], plan.target[1] - pose.cell[1]),
                pose.heading)
            kb = known_blocked() if callable(known_blocked) else known_blocked
            queue = plan_to_waypoint(kb, pose, offset).actions
    return pose, taken, collisions


def oracle_shortest(world: GridWorld, start: AgentPose,
                    target: tuple[int, int]) -> tuple[int, int]:
    """Ground-truth (l, N*): geodesic cell length and the minimum number of
    low-level actions over all shortest cell paths (forwards plus turns,
    given the start heading).  Dijkstra over (cell, heading) states with
    moves restricted to geodesic descent."""
    d_to = bfs_distances(world.occupancy, [target])
    l = d_to[start.cell]
    if not np.isfinite(l):
        raise ValueError("target unreachable from start")
    l = int(l)
    if l == 0:
        return 0, 0

    best = {(start.cell, start.heading): 0}
    heap = [(0, start.cell, start.heading)]
    while heap:
        cost, cell, heading = heapq.heappop(heap)
        if cost > best.get((cell, heading), np.inf):
            continue
        if cell == target:
            return l, cost
        for delta, turn_cost in ((0, 0), (90, 1), (270, 1), (180, 2)):
            nh = (heading + delta) % 360
            dr, dc = HEADING_VECS[nh]
            nb = (cell[0] + dr, cell[1] + dc)
            if not world.is_free(nb) or d_to[nb] != d_to[cell] - 1:
                continue
            ncost = cost + turn_cost + 1
            key = (nb, nh)
            if ncost < best.get(key, np.inf):
                best[key] = ncost
                heapq.heappush(heap, (ncost, nb, nh))
    raise RuntimeError("descent search failed on a reachable target")
