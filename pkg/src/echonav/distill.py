"""Confidence-weighted cross-task policy distillation.

A point-goal teacher is queried along the student's own trajectories
(student forcing); each step records both action distributions, the
teacher's Shannon entropy and its confidence (reciprocal entropy).  The
distillation loss keeps only the top-k most confident steps of the update
batch and weights each kept step's KL term by that confidence:

    L_CD = mean over selected t of  c(o_t) * KL(student(o_t), teacher(o_t))

with c(o_t) = 1 / max(H[teacher(o_t)], entropy_floor).  Gradients flow into
the student only; teacher distributions are detached numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ENTROPY_FLOOR = 1e-3   # reciprocal-entropy clamp; confidence caps at 1e3
KL_FLOOR = 1e-8        # floor on q before the log


def shannon_entropy(action_map: np.ndarray) -> float:
    """-sum p ln p in nats, with 0 ln 0 = 0."""
    p = np.asarray(action_map, dtype=np.float64).ravel()
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def confidence(action_map: np.ndarray, entropy_floor: float = ENTROPY_FLOOR) -> float:
    """Reciprocal Shannon entropy, clamped so deterministic maps stay finite."""
    return 1.0 / max(shannon_entropy(action_map), entropy_floor)


def kl_divergence(p: np.ndarray, q: np.ndarray, kl_floor: float = KL_FLOOR) -> float:
    """sum p ln(p/q) with q floored at kl_floor before the log."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.maximum(np.asarray(q, dtype=np.float64).ravel(), kl_floor)
    nz = p > 0
    return float((p[nz] * (np.log(p[nz]) - np.log(q[nz]))).sum())


@dataclass
class DistillRecord:
    """One student-forced step: both policies' views of the same observation."""
    step_index: int
    student_map: object          # np.ndarray, or Tensor of flat probs in-graph
    teacher_map: np.ndarray      # same egocentric frame as the student's
    teacher_entropy: float
    confidence: float

    @classmethod
    def from_maps(cls, step_index: int, student_map, teacher_map: np.ndarray,
                  entropy_floor: float = ENTROPY_FLOOR) -> "DistillRecord":
        h = shannon_entropy(teacher_map)
        return cls(step_index, student_map, np.asarray(teacher_map, dtype=np.float64),
                   h, 1.0 / max(h, entropy_floor))


def select_topk(records, k: int) -> list[int]:
    """Positions of the k most confident records (all if k >= len); ties keep
    the earlier step."""
    if k < 1:
        raise ValueError("k must be >= 1")
    order = sorted(range(len(records)),
                   key=lambda i: (-records[i].confidence, records[i].step_index, i))
    return sorted(order[:min(k, len(records))])


def _kl_term(student_map, teacher_map: np.ndarray, direction: str,
             kl_floor: float) -> object:
    """KL between one student/teacher pair; autodiff-aware when the student
    map is a Tensor of probabilities."""
    if isinstance(student_map, Tensor):
        p = student_map
        q = np.maximum(teacher_map.ravel(), kl_floor)
        if direction == "forward":
            # sum p (ln p - ln q); p from softmax is strictly positive
            return (p * (ad.log(p) - np.log(q))).sum()
        lp = ad.log(p)
        return float((q * np.log(q)).sum()) - (Tensor(q) * lp).sum()
    if direction == "forward":
        return kl_divergence(np.asarray(student_map), teacher_map, kl_floor)
    return kl_divergence(teacher_map, np.asarray(student_map), kl_floor)


def ccpd_loss(records, k: int, direction: str = "forward",
              kl_floor: float = KL_FLOOR, plain: bool = False):
    """Confidence-weighted distillation loss over one update batch.

    Mean over the top-k most confident steps of confidence * KL; ``plain``
    switches to the unweighted variant (all steps, unit weight) used by the
    reweighting ablation.  Returns a float, or a Tensor when the records
    carry in-graph student distributions.  Empty input gives 0.0.
    """
    if not records:
        return 0.0
    if plain:
        picked = list(range(len(records)))
        weights = [1.0] * len(records)
    else:
        picked = select_topk(records, k)
        weights = [records[i].confidence for i in picked]
    terms = []
    for idx, w in zip(picked, weights):
        r = records[idx]
        terms.append(_kl_term(r.student_map, r.teacher_map, direction, kl_floor) * w)
    if isinstance(terms[0], Tensor) or any(isinstance(t, Tensor) for t in terms):
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms))
    return float(sum(terms)) / len(terms)


def teacher_goal_vector(target: tuple[int, int], pose, goal_scale: float = 0.125
                        ) -> np.ndarray:
    """Goal displacement rotated into the agent frame and scaled for the
    point policy's cue encoder."""
    from .planner import world_to_ego_delta
    delta = (target[0] - pose.cell[0], target[1] - pose.cell[1])
    ego = world_to_ego_delta(delta, pose.heading)
    return np.array([ego[0] * goal_scale, ego[1] * goal_scale])


def teacher_query(teacher, teacher_hidden: np.ndarray, target: tuple[int, int],
                  pose, geom_planes: np.ndarray, goal_scale: float = 0.125
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Teacher action map for the student's current situation.

    ``geom_planes`` is the (2, c, c) egocentric geometry crop at the
    student's heading, so the returned map lives in the student's frame and
    is comparable cell by cell.  Returns (m x m map, next teacher hidden).
    """
    goal = teacher_goal_vector(target, pose, goal_scale)
    feats = np.concatenate([geom_planes.ravel(), goal])
    amap, _, h = teacher.action_map(feats, teacher_hidden)
    return amap, h
