"""PPO training with GAE, reward shaping and the combined PPO+distillation
update.

The RL timestep is one waypoint decision; low-level actions inside a
transition carry no separate reward.  Rollouts come from vectorized
in-process workers, each owning its own episode state and reading the same
parameter snapshot; updates happen serially afterwards.  Recurrence is
handled by sequence-chunked minibatches re-forwarded from stored hidden
snapshots.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LabConfig
from .distill import DistillRecord, select_topk, teacher_goal_vector
from .nav import (EpisodeRun, apply_waypoint, observe, episode_stream,
                  policy_features, start_episode, teacher_features)
from .nets import Adam, WaypointPolicy, linear_lr, offset_to_index, sample_waypoint, save_checkpoint
from .world import GridWorld


def shaped_reward(prev_d: float, new_d: float, success: bool,
                  step_cost: float = 0.01) -> float:
    """Geodesic progress + success bonus - per-waypoint cost."""
    return (prev_d - new_d) * 1.0 + (10.0 if success else 0.0) - step_cost


@dataclass
class RolloutBuffer:
    feats: np.ndarray          # (T, W, F)
    hidden: np.ndarray         # (T, W, H) hidden before the step
    actions: np.ndarray        # (T, W) flat waypoint index
    log_probs: np.ndarray      # (T, W)
    values: np.ndarray         # (T, W)
    rewards: np.ndarray        # (T, W)
    dones: np.ndarray          # (T, W)
    final_values: np.ndarray   # (W,) bootstrap for the state after step T-1
    teacher_probs: np.ndarray | None = None     # (T, W, A)
    teacher_entropy: np.ndarray | None = None   # (T, W)
    teacher_conf: np.ndarray | None = None      # (T, W)
    episode_stats: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return self.feats.shape[0] * self.feats.shape[1]


@dataclass
class WorkerState:
    run: EpisodeRun
    hidden: np.ndarray
    teacher_hidden: np.ndarray | None = None
    planes: np.ndarray | None = None
    audio: np.ndarray | None = None


def collect_rollouts(worlds, net: WaypointPolicy, cfg: LabConfig,
                     rng: np.random.Generator, profiles,
                     n_steps: int | None = None, teacher: WaypointPolicy | None = None,
                     states: list[WorkerState] | None = None
                     ) -> tuple[RolloutBuffer, list[WorkerState]]:
    """Student-forced rollout collection over vectorized workers.

    The policy in ``net`` controls; when ``teacher`` is given it is queried
    at every step on the same observations (its own recurrent state
    maintained along the student's trajectory) and its distributions are
    stored detached.  Returns the buffer and the carried worker states.
    """
    T = cfg.rollout_len if n_steps is None else n_steps
    W = cfg.workers
    stream = episode_stream(worlds, rng, cfg, profiles)
    if states is None:
        states = []
        for _ in range(W):
            world, ep = next(stream)
            states.append(WorkerState(
                start_episode(world, ep), net.init_hidden(1)[0],
                teacher.init_hidden(1)[0] if teacher is not None else None))

    feat_dim = net.map_dim + net.cue_dim
    A = net.n_actions
    half = net.map_size // 2
    buf = RolloutBuffer(
        feats=np.zeros((T, W, feat_dim)),
        hidden=np.zeros((T, W, net.hidden)),
        actions=np.zeros((T, W), dtype=np.int64),
        log_probs=np.zeros((T, W)),
        values=np.zeros((T, W)),
        rewards=np.zeros((T, W)),
        dones=np.zeros((T, W), dtype=bool),
        final_values=np.zeros(W),
    )
    if teacher is not None:
        buf.teacher_probs = np.zeros((T, W, A))
        buf.teacher_entropy = np.zeros((T, W))
        buf.teacher_conf = np.zeros((T, W))

    def batch_feats() -> np.ndarray:
        rows = []
        for st in states:
            planes, audio = observe(st.run, cfg, rng)
            st.planes, st.audio = planes, audio
            rows.append(policy_features(net, st.run, planes, audio, cfg))
        return np.stack(rows) if rows else np.zeros((0, feat_dim))

    for t in range(T):
        feats = batch_feats()
        hid = np.stack([st.hidden for st in states])
        with ad.no_grad():
            logits, values, h_next = net.forward(feats, hid)
            probs = ad.softmax(logits).data
        buf.feats[t] = feats
        buf.hidden[t] = hid
        buf.values[t] = values.data[:, 0]

        if teacher is not None:
            for w, st in enumerate(states):
                goal = teacher_goal_vector(st.run.episode.target, st.run.pose,
                                           cfg.goal_scale)
                tfeats = teacher_features(st.planes, goal)
                tmap, _, th = teacher.action_map(tfeats, st.teacher_hidden)
                st.teacher_hidden = th
                rec = DistillRecord.from_maps(t, None, tmap, cfg.entropy_floor)
                buf.teacher_probs[t, w] = tmap.ravel()
                buf.teacher_entropy[t, w] = rec.teacher_entropy
                buf.teacher_conf[t, w] = rec.confidence

        for w, st in enumerate(states):
            amap = probs[w].reshape(net.map_size, net.map_size)
            offset, logp = sample_waypoint(amap, rng)
            buf.actions[t, w] = offset_to_index(offset, net.map_size)
            buf.log_probs[t, w] = logp
            prev_d = st.run.distance
            apply_waypoint(st.run, offset, cfg)
            success_now = st.run.done and st.run.success
            buf.rewards[t, w] = shaped_reward(prev_d, st.run.distance, success_now)
            buf.dones[t, w] = st.run.done
            st.hidden = h_next.data[w]
            if st.run.done:
                buf.episode_stats.append({
                    "success": st.run.success, "l": st.run.episode.shortest_cells,
                    "p": st.run.cells_moved, "n": st.run.actions,
                    "n_star": st.run.episode.shortest_actions,
                    "d_init": st.run.d_init, "d_final": st.run.distance,
                    "waypoints": st.run.waypoints,
                    "stop_issued": st.run.stop_issued,
                })
                world, ep = next(stream)
                st.run = start_episode(world, ep)
                st.hidden = net.init_hidden(1)[0]
                if teacher is not None:
                    st.teacher_hidden = teacher.init_hidden(1)[0]

    if T > 0:
        feats = batch_feats()
        hid = np.stack([st.hidden for st in states])
        with ad.no_grad():
            _, values, _ = net.forward(feats, hid)
        buf.final_values = values.data[:, 0]
    return buf, states


def compute_gae(buf: RolloutBuffer, gamma: float, lam: float,
                normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """delta_t = r_t + g V_{t+1} (1-done_t) - V_t;  A_t = delta_t +
    g l (1-done_t) A_{t+1};  returns = A + V; advantages normalized batch-wide."""
    T, W = buf.rewards.shape
    adv = np.zeros((T, W))
    last = np.zeros(W)
    for t in reversed(range(T)):
        v_next = buf.values[t + 1] if t + 1 < T else buf.final_values
        mask = 1.0 - buf.dones[t].astype(np.float64)
        delta = buf.rewards[t] + gamma * v_next * mask - buf.values[t]
        last = delta + gamma * lam * mask * last
        adv[t] = last
    returns = adv + buf.values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    buf.advantages = adv
    buf.returns = returns
    return adv, returns


def _distill_weights(buf: RolloutBuffer, cfg: LabConfig) -> np.ndarray | None:
    """Flat (T*W,) weight vector: confidence on the selected steps, 0 elsewhere.

    Mode "ccpd" keeps the top-k most confident steps of the whole update
    batch; "plain" keeps every step at unit weight (the unweighted ablation).
    """
    if buf.teacher_probs is None or cfg.distill_mode == "off":
        return None
    T, W = buf.teacher_conf.shape
    conf = buf.teacher_conf.reshape(-1)
    weights = np.zeros_like(conf)
    if cfg.distill_mode == "plain":
        weights[:] = 1.0
        return weights
    records = [DistillRecord(i, None, np.empty(0), 0.0, float(c))
               for i, c in enumerate(conf)]
    for i in select_topk(records, cfg.distill_k):
        weights[i] = conf[i]
    return weights


def ppo_update(net: WaypointPolicy, opt: Adam, buf: RolloutBuffer,
               cfg: LabConfig, lr_now: float, rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO epochs over sequence-chunked minibatches, plus
    the weighted distillation term when the buffer carries teacher data."""
    if buf.advantages is None:
        compute_gae(buf, cfg.discount, cfg.gae_lambda)
    T, W = buf.rewards.shape
    L = min(cfg.chunk_len, T)
    n_chunks_t = T // L
    chunk_ids = [(w, i * L) for w in range(W) for i in range(n_chunks_t)]
    mb_count = min(cfg.minibatches, len(chunk_ids))
    weights = _distill_weights(buf, cfg)

    onehot = np.eye(net.n_actions)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "distill_loss": 0.0, "grad_norm": 0.0, "selected": 0.0}
    n_batches = 0

    for _ in range(cfg.ppo_epochs):
        order = rng.permutation(len(chunk_ids))
        for mb in range(mb_count):
            take = order[mb::mb_count]
            bsz = len(take) * L
            # re-forward the chunks from their stored initial hidden
            picked = [chunk_ids[i] for i in take]
            h = Tensor(np.stack([buf.hidden[t0, w] for w, t0 in picked]))
            logit_rows, value_rows = [], []
            flat_idx = []
            for j in range(L):
                feats = np.stack([buf.feats[t0 + j, w] for w, t0 in picked])
                if j > 0:
                    prev_done = np.array([buf.dones[t0 + j - 1, w]
                                          for w, t0 in picked])
                    if prev_done.any():
                        keep = Tensor((1.0 - prev_done.astype(np.float64))[:, None])
                        h = ad.mul(h, keep)
                logits, value, h = net.forward(feats, h)
                logit_rows.append(logits)
                value_rows.append(value)
                flat_idx.extend((t0 + j) * W + w for w, t0 in picked)

            logits = ad.concat(logit_rows, axis=0)
            values = ad.concat(value_rows, axis=0)
            flat = np.array(flat_idx)            # flat index into (T, W) order
            t_idx, w_idx = flat // W, flat % W
            acts = buf.actions[t_idx, w_idx]
            old_logp = buf.log_probs[t_idx, w_idx]
            adv = buf.advantages[t_idx, w_idx]
            rets = buf.returns[t_idx, w_idx]

            logp_all = ad.log_softmax(logits)
            probs = ad.softmax(logits)
            logp = (logp_all * onehot[acts]).sum(axis=1)
            ratio = ad.exp(logp - old_logp)
            surr1 = ad.mul(ratio, adv)
            surr2 = ad.mul(ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv)
            policy_loss = ad.mul(ad.minimum(surr1, surr2).mean(), -1.0)
            value_loss = ad.square(values - rets[:, None]).mean()
            entropy = ad.mul((probs * logp_all).sum(axis=1).mean(), -1.0)

            loss = policy_loss + cfg.value_coef * value_loss \
                - cfg.entropy_coef * entropy
            distill_val = 0.0
            selected = 0.0
            if weights is not None:
                w_vec = weights[flat]
                sel = w_vec > 0
                selected = float(sel.sum())
                if selected > 0:
                    q = np.maximum(buf.teacher_probs.reshape(-1, net.n_actions)[flat],
                                   cfg.kl_floor)
                    if cfg.kl_direction == "forward":
                        kl_vec = (probs * (logp_all - np.log(q))).sum(axis=1)
                    else:
                        const = (q * np.log(q)).sum(axis=1)
                        kl_vec = Tensor(const) - (Tensor(q) * logp_all).sum(axis=1)
                    distill = (kl_vec * w_vec).sum() * (1.0 / selected)
                    distill_val = float(distill.data)
                    loss = loss + cfg.lambda_cd * distill

            for name, val in (("policy", policy_loss), ("value", value_loss),
                              ("entropy", entropy)):
                if not np.isfinite(val.data).all():
                    raise RuntimeError(f"NaN/Inf in {name} loss at update step "
                                       f"(batch {n_batches}); aborting update")
            if not np.isfinite(distill_val):
                raise RuntimeError("NaN/Inf in distillation loss; aborting update")

            net.zero_grad()
            loss.backward()
            gnorm = opt.step(lr_now)
            stats["policy_loss"] += float(policy_loss.data)
            stats["value_loss"] += float(value_loss.data)
            stats["entropy"] += float(entropy.data)
            stats["distill_loss"] += distill_val
            stats["grad_norm"] += gnorm
            stats["selected"] += selected
            n_batches += 1

    for k in stats:
        stats[k] /= max(n_batches, 1)
    net.step_count += buf.steps
    return stats


# ---------------------------------------------------------------------------
# training drivers
# ---------------------------------------------------------------------------

def train_policy(cfg: LabConfig, kind: str, worlds_train, worlds_val,
                 profiles_train, profiles_val, out_dir: str | Path,
                 teacher: WaypointPolicy | None = None, label: str = "policy",
                 target_sr: float | None = None, log_name: str = "train.jsonl",
                 seed_offset: int = 0) -> tuple[WaypointPolicy, list[dict]]:
    """PPO(+distillation) training loop with a rolling validation probe.

    Writes one JSONL row per update (reward mean, probe metrics, losses) and
    a checkpoint at the end; stops early when ``target_sr`` is reached on the
    probe set.  Returns (net, log rows).
    """
    from .evalx import PolicyAgent, run_episodes

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.default_rng([cfg.seed, seed_offset])
    net_seed = int(root.integers(2 ** 31))
    rollout_rng = np.random.default_rng([cfg.seed, seed_offset, 1])
    update_rng = np.random.default_rng([cfg.seed, seed_offset, 2])
    probe_rng = np.random.default_rng([cfg.seed, seed_offset, 3])

    net = WaypointPolicy(kind, cfg.crop_size, cfg.audio_bands, cfg.map_size,
                         cfg.hidden_size, cfg.encoder_hidden, cfg.map_features,
                         cfg.cue_features, cfg.init_scale, seed=net_seed)
    opt = Adam(net, cfg.learning_rate, grad_clip=cfg.grad_clip)

    from .nav import fixed_episode_set
    probe_set = fixed_episode_set(worlds_val, probe_rng, cfg, profiles_val,
                                  cfg.probe_episodes)

    states = None
    rows = []
    log_path = out_dir / log_name
    t0 = time.time()
    with log_path.open("w") as logf:
        for update in range(cfg.updates):
            lr = linear_lr(cfg.learning_rate, update, cfg.updates)
            buf, states = collect_rollouts(worlds_train, net, cfg, rollout_rng,
                                           profiles_train, teacher=teacher,
                                           states=states)
            compute_gae(buf, cfg.discount, cfg.gae_lambda)
            stats = ppo_update(net, opt, buf, cfg, lr, update_rng)

            row = {
                "update": update,
                "env_steps": net.step_count,
                "lr": lr,
                "reward_mean": float(buf.rewards.sum(axis=0).mean()),
                "episodes": len(buf.episode_stats),
                "rollout_sr": float(np.mean([e["success"] for e in buf.episode_stats]))
                if buf.episode_stats else 0.0,
                **{f"loss_{k}": v for k, v in stats.items()},
            }
            if (update + 1) % cfg.probe_interval == 0 or update == cfg.updates - 1:
                probe = run_episodes(PolicyAgent([net], greedy=True), probe_set, cfg)
                from .evalx import metrics as compute_metrics
                pm = compute_metrics(probe)
                row.update({"probe_sr": pm["SR"], "probe_spl": pm["SPL"],
                            "probe_ne": pm["NE"], "probe_na": pm["NA"]})
                if target_sr is not None and pm["SR"] >= target_sr:
                    rows.append(row)
                    logf.write(json.dumps(row) + "\n")
                    break
            rows.append(row)
            logf.write(json.dumps(row) + "\n")
    if rows:
        rows[-1].setdefault("wall_seconds", time.time() - t0)
    save_checkpoint(net, out_dir / f"{label}", {"label": label})
    return net, rows


def train_teacher(cfg: LabConfig, worlds_train, worlds_val, profiles_train,
                  profiles_val, out_dir: str | Path) -> tuple[WaypointPolicy, list[dict]]:
    """PPO-train the point-goal teacher until the probe SR reaches the target
    or the update budget expires; below-target expiry is an explicit failure."""
    net, rows = train_policy(cfg, "point", worlds_train, worlds_val,
                             profiles_train, profiles_val, out_dir,
                             label="teacher", target_sr=cfg.teacher_target_sr,
                             log_name="teacher.jsonl", seed_offset=1000)
    probed = [r for r in rows if "probe_sr" in r]
    final_sr = probed[-1]["probe_sr"] if probed else 0.0
    if final_sr < cfg.teacher_target_sr:
        raise RuntimeError(
            f"teacher training budget expired below target SR: "
            f"{final_sr:.3f} < {cfg.teacher_target_sr}")
    return net, rows


def train_student(cfg: LabConfig, worlds_train, worlds_val, profiles_train,
                  profiles_val, out_dir: str | Path,
                  teacher: WaypointPolicy | None = None,
                  seed_offset: int = 0) -> tuple[WaypointPolicy, list[dict]]:
    """Train the audio-goal student; distillation per cfg.distill_mode."""
    if cfg.distill_mode != "off" and teacher is None:
        raise ValueError(f"distill_mode={cfg.distill_mode!r} requires a teacher checkpoint")
    use_teacher = teacher if cfg.distill_mode != "off" else None
    return train_policy(cfg, "audio", worlds_train, worlds_val, profiles_train,
                        profiles_val, out_dir, teacher=use_teacher,
                        label="student", log_name="student.jsonl",
                        seed_offset=seed_offset)
