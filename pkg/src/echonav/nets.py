"""Waypoint policy networks, the small auxiliary nets, Adam and checkpoints.

Two flavors of the recurrent waypoint policy share one architecture: the
audio policy consumes map crops plus the binaural feature, the point policy
consumes map crops plus a goal displacement.  Both emit an m x m action map
(center cell = stop choice) and a value estimate through a single GRU core.

Checkpoints are a JSON metadata file plus a raw little-endian float32
parameter block; loading is bit-stable (load(save(x)) is a fixpoint).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def _dense_init(rng, fan_in: int, fan_out: int, scale: float | None = None):
    std = scale if scale is not None else np.sqrt(2.0 / fan_in)
    w = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def gru_cell(x: Tensor, h: Tensor, p: dict, prefix: str = "gru") -> Tensor:
    """Single GRU step: reset/update gates, candidate state, interpolation."""
    r = ad.sigmoid(dense(x, p[f"{prefix}.W_r"], p[f"{prefix}.b_r"]) + ad.matmul(h, p[f"{prefix}.U_r"]))
    z = ad.sigmoid(dense(x, p[f"{prefix}.W_z"], p[f"{prefix}.b_z"]) + ad.matmul(h, p[f"{prefix}.U_z"]))
    n = ad.tanh(dense(x, p[f"{prefix}.W_n"], p[f"{prefix}.b_n"]) + ad.mul(r, ad.matmul(h, p[f"{prefix}.U_n"])))
    return ad.add(ad.mul(1.0 - z, n), ad.mul(z, h))


def _gru_init(rng, params: dict, in_dim: int, hidden: int, prefix: str = "gru"):
    for gate in ("r", "z", "n"):
        w, b = _dense_init(rng, in_dim, hidden, scale=np.sqrt(1.0 / in_dim))
        params[f"{prefix}.W_{gate}"] = w
        params[f"{prefix}.b_{gate}"] = b
        u = Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, hidden)),
                   requires_grad=True)
        params[f"{prefix}.U_{gate}"] = u


# ---------------------------------------------------------------------------
# waypoint policies
# ---------------------------------------------------------------------------

class WaypointPolicy:
    """Recurrent m x m waypoint predictor with a value head.

    kind "audio": map input is (explored, occupied, acoustic) crops and the
    cue is the 2K binaural feature.  kind "point": map input is (explored,
    occupied) crops and the cue is the goal displacement (agent frame).
    Feature vectors are the flat concatenation [map planes..., cue].
    """

    KINDS = ("audio", "point")

    def __init__(self, kind: str, crop: int, bands: int = 4, map_size: int = 9,
                 hidden: int = 128, encoder_hidden: int = 128,
                 map_features: int = 64, cue_features: int = 32,
                 head_scale: float = 0.01, seed: int = 0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown policy kind {kind!r}")
        self.kind = kind
        self.crop = crop
        self.bands = bands
        self.map_size = map_size
        self.hidden = hidden
        self.encoder_hidden = encoder_hidden
        self.map_features = map_features
        self.cue_features = cue_features
        self.head_scale = head_scale
        self.seed = seed
        self.step_count = 0

        self.map_planes = 3 if kind == "audio" else 2
        self.map_dim = self.map_planes * crop * crop
        self.cue_dim = 2 * bands if kind == "audio" else 2
        self.n_actions = map_size * map_size

        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        p["map1.W"], p["map1.b"] = _dense_init(rng, self.map_dim, encoder_hidden)
        p["map2.W"], p["map2.b"] = _dense_init(rng, encoder_hidden, map_features)
        p["cue.W"], p["cue.b"] = _dense_init(rng, self.cue_dim, cue_features)
        _gru_init(rng, p, map_features + cue_features, hidden)
        p["act.W"], p["act.b"] = _dense_init(rng, hidden, self.n_actions, scale=head_scale)
        p["val.W"], p["val.b"] = _dense_init(rng, hidden, 1, scale=head_scale)
        self.params = p

    # ordered parameter walk used by the optimizer and serialization
    def param_items(self):
        return sorted(self.params.items())

    def zero_grad(self):
        for _, t in self.param_items():
            t.grad = None

    def init_hidden(self, batch: int = 1) -> np.ndarray:
        return np.zeros((batch, self.hidden))

    def forward(self, feats, hidden) -> tuple[Tensor, Tensor, Tensor]:
        """(logits, value, next_hidden) for a (B, F) feature batch."""
        feats = ad.as_tensor(feats)
        hidden = ad.as_tensor(hidden)
        if feats.data.ndim != 2 or feats.data.shape[1] != self.map_dim + self.cue_dim:
            raise ValueError(f"feature batch must be (B, {self.map_dim + self.cue_dim}), "
                             f"got {feats.data.shape}")
        if hidden.data.shape != (feats.data.shape[0], self.hidden):
            raise ValueError(f"hidden must be (B, {self.hidden}), got {hidden.data.shape}")
        p = self.params
        map_in = Tensor(feats.data[:, :self.map_dim])
        cue_in = Tensor(feats.data[:, self.map_dim:])
        m = ad.relu(dense(map_in, p["map1.W"], p["map1.b"]))
        m = ad.relu(dense(m, p["map2.W"], p["map2.b"]))
        u = ad.relu(dense(cue_in, p["cue.W"], p["cue.b"]))
        x = ad.concat([m, u], axis=1)
        h = gru_cell(x, hidden, p)
        logits = dense(h, p["act.W"], p["act.b"])
        value = dense(h, p["val.W"], p["val.b"])
        return logits, value, h

    def action_map(self, feats_row: np.ndarray, hidden_row: np.ndarray
                   ) -> tuple[np.ndarray, float, np.ndarray]:
        """Rollout-time forward for one observation: (m x m probability map,
        value, next hidden row)."""
        with ad.no_grad():
            logits, value, h = self.forward(feats_row[None, :], hidden_row[None, :])
            probs = ad.softmax(logits).data[0]
        m = self.map_size
        return probs.reshape(m, m), float(value.data[0, 0]), h.data[0]

    def arch_config(self) -> dict:
        return {
            "kind": self.kind, "crop": self.crop, "bands": self.bands,
            "map_size": self.map_size, "hidden": self.hidden,
            "encoder_hidden": self.encoder_hidden,
            "map_features": self.map_features, "cue_features": self.cue_features,
            "head_scale": self.head_scale, "seed": self.seed,
        }


class DenseNet:
    """Small MLP used by the stop policy and the audio direction predictor."""

    def __init__(self, in_dim: int, hidden_dims, out_dim: int, seed: int = 0,
                 kind: str = "mlp"):
        self.kind = kind
        self.in_dim = in_dim
        self.hidden_dims = tuple(hidden_dims)
        self.out_dim = out_dim
        self.seed = seed
        self.step_count = 0
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        prev = in_dim
        for i, hdim in enumerate(self.hidden_dims):
            self.params[f"l{i}.W"], self.params[f"l{i}.b"] = _dense_init(rng, prev, hdim)
            prev = hdim
        self.params["out.W"], self.params["out.b"] = _dense_init(rng, prev, out_dim,
                                                                 scale=0.01)

    def param_items(self):
        return sorted(self.params.items())

    def zero_grad(self):
        for _, t in self.param_items():
            t.grad = None

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        for i in range(len(self.hidden_dims)):
            x = ad.relu(dense(x, self.params[f"l{i}.W"], self.params[f"l{i}.b"]))
        return dense(x, self.params["out.W"], self.params["out.b"])

    def arch_config(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim,
                "hidden_dims": list(self.hidden_dims), "out_dim": self.out_dim,
                "seed": self.seed}


# ---------------------------------------------------------------------------
# waypoint sampling
# ---------------------------------------------------------------------------

def sample_waypoint(action_map: np.ndarray, rng: np.random.Generator | None,
                    greedy: bool = False) -> tuple[tuple[int, int], float]:
    """Draw a waypoint cell offset from an m x m probability map.

    Returns ((drow, dcol) relative to the center in the egocentric frame,
    log-probability of the draw).  Greedy mode takes the argmax, ties broken
    by smallest row-major index.
    """
    m = action_map.shape[0]
    flat = action_map.reshape(-1)
    if greedy:
        idx = int(np.argmax(flat))          # argmax takes the first maximum
    else:
        if rng is None:
            raise ValueError("sampling requires an rng")
        idx = int(rng.choice(flat.size, p=flat / flat.sum()))
    half = m // 2
    logp = float(np.log(max(flat[idx], 1e-300)))
    return (idx // m - half, idx % m - half), logp


def offset_to_index(offset: tuple[int, int], m: int) -> int:
    half = m // 2
    return (offset[0] + half) * m + (offset[1] + half)


# ---------------------------------------------------------------------------
# Adam with linear learning-rate decay
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, net, lr: float = 2.5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, grad_clip: float = 0.0):
        self.net = net
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in net.param_items()}
        self.v = {k: np.zeros_like(v.data) for k, v in net.param_items()}

    def step(self, lr: float | None = None) -> float:
        """One update from accumulated grads; returns the global grad norm."""
        lr = self.lr if lr is None else lr
        items = [(k, p) for k, p in self.net.param_items() if p.grad is not None]
        gnorm = float(np.sqrt(sum(float((p.grad ** 2).sum()) for _, p in items)))
        scale = 1.0
        if self.grad_clip > 0.0 and gnorm > self.grad_clip:
            scale = self.grad_clip / (gnorm + 1e-12)
        self.t += 1
        for k, p in items:
            g = p.grad * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return gnorm


def linear_lr(base_lr: float, update: int, total_updates: int) -> float:
    """Linear decay: exactly base_lr at update 0 and 0 at the final update."""
    if total_updates <= 1:
        return base_lr if update == 0 else 0.0
    frac = min(max(update / (total_updates - 1), 0.0), 1.0)
    return base_lr * (1.0 - frac)


# ---------------------------------------------------------------------------
# checkpoints: <prefix>.json metadata + <prefix>.bin float32 LE blob
# ---------------------------------------------------------------------------

CKPT_FORMAT = "echonav-ckpt-1"


def save_checkpoint(net, prefix: str | Path, extra_meta: dict | None = None) -> Path:
    prefix = Path(prefix)
    names, blobs, shapes = [], [], []
    for name, t in net.param_items():
        names.append(name)
        shapes.append(list(t.data.shape))
        blobs.append(t.data.astype("<f4").tobytes())
    blob = b"".join(blobs)
    meta = {
        "format": CKPT_FORMAT,
        "arch": net.arch_config(),
        "params": [[n, s] for n, s in zip(names, shapes)],
        "step_count": int(getattr(net, "step_count", 0)),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra_meta:
        meta.update(extra_meta)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".bin").write_bytes(blob)
    prefix.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return prefix


def load_checkpoint(prefix: str | Path):
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    if meta.get("format") != CKPT_FORMAT:
        raise ValueError(f"unsupported checkpoint format in {prefix}")
    arch = meta["arch"]
    if arch["kind"] in WaypointPolicy.KINDS:
        cfg = dict(arch)
        kind = cfg.pop("kind")
        net = WaypointPolicy(kind, **cfg)
    else:
        cfg = dict(arch)
        net = DenseNet(cfg["in_dim"], cfg["hidden_dims"], cfg["out_dim"],
                       seed=cfg["seed"], kind=cfg["kind"])
    blob = prefix.with_suffix(".bin").read_bytes()
    expect = hashlib.sha256(blob).hexdigest()
    if meta["blob_sha256"] != expect:
        raise ValueError(f"checkpoint blob hash mismatch for {prefix}")
    off = 0
    declared = dict((n, tuple(s)) for n, s in meta["params"])
    for name, t in net.param_items():
        shape = declared[name]
        if tuple(t.data.shape) != shape:
            raise ValueError(f"shape mismatch for {name} in {prefix}")
        n = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        off += n * 4
        t.data = vals.astype(np.float64).reshape(shape)
    net.step_count = meta.get("step_count", 0)
    return net


def checkpoint_hash(prefix: str | Path) -> str:
    prefix = Path(prefix)
    h = hashlib.sha256()
    h.update(prefix.with_suffix(".json").read_bytes())
    h.update(prefix.with_suffix(".bin").read_bytes())
    return h.hexdigest()
