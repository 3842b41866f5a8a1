"""Experiment orchestration: the canonical pipeline stages behind one
argparse entry point.  Output is files only.

Every run writes a manifest (resolved config snapshot, seeds, content hashes
of the checkpoints it consumed or produced, output list) under its run
directory; re-running the recorded subcommand on the recorded config
reproduces the metrics byte for byte.  ``ORAN_LAB_SEED`` overrides the
config seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import evalx, oig, rl
from .config import LabConfig, ConfigError, config_hash, dump_config, load_config, to_dict
from .nav import fixed_episode_set
from .nets import WaypointPolicy, checkpoint_hash, load_checkpoint, save_checkpoint
from .world import band_profiles, generate_world, save_world, world_to_pgm

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# deterministic world/profile construction from a config
# ---------------------------------------------------------------------------

def make_worlds(cfg: LabConfig):
    """Derive the train and held-out world sets from the config alone."""
    train = [generate_world(cfg.world_seed + i, cfg.world_height, cfg.world_width,
                            cfg.obstacle_density, cfg.cell_size)
             for i in range(cfg.train_worlds)]
    evals = [generate_world(cfg.world_seed + 10_000 + i, cfg.world_height,
                            cfg.world_width, cfg.obstacle_density, cfg.cell_size)
             for i in range(cfg.eval_worlds)]
    return train, evals


def make_profiles(cfg: LabConfig):
    return band_profiles(cfg.train_profiles, cfg.eval_profiles, cfg.audio_bands,
                         cfg.profile_seed)


def eval_episode_set(cfg: LabConfig, n: int | None = None, seed_salt: int = 77):
    """The held-out evaluation protocol: eval worlds x unheard profiles."""
    _, worlds = make_worlds(cfg)
    _, profiles = make_profiles(cfg)
    rng = np.random.default_rng([cfg.seed, seed_salt])
    return fixed_episode_set(worlds, rng, cfg, profiles,
                             n if n is not None else cfg.eval_episodes)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(run_dir: Path, subcommand: str, cfg: LabConfig,
                   args: dict, checkpoints: dict[str, str],
                   outputs: list[str]) -> Path:
    manifest = {
        "subcommand": subcommand,
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "args": args,
        "checkpoint_hashes": checkpoints,
        "outputs": sorted(outputs),
    }
    path = run_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def replay_manifest(manifest_path: str | Path, out_dir: str | Path) -> int:
    """Re-run the recorded subcommand with the recorded config into a fresh
    run directory; outputs must reproduce byte for byte."""
    doc = json.loads(Path(manifest_path).read_text())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = out_dir / "replay-config.json"
    cfg_path.write_text(json.dumps(doc["config"], indent=2, sort_keys=True) + "\n")
    argv = [doc["subcommand"], "--config", str(cfg_path), "--out", str(out_dir)]
    for key, value in doc["args"].items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        elif isinstance(value, list):
            for v in value:
                argv += [flag, str(v)]
        elif value is not None:
            argv += [flag, str(value)]
    return main(argv)


def _run_dir(args) -> Path:
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    return run


def _load_cfg(args, **overrides) -> LabConfig:
    cfg = load_config(args.config, overrides=overrides or None, apply_env_seed=True)
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_worlds(args) -> int:
    cfg = _load_cfg(args)
    run = _run_dir(args)
    dump_config(cfg, run / "config.json")
    train, evals = make_worlds(cfg)
    outputs = []
    for name, worlds in (("train", train), ("eval", evals)):
        for i, world in enumerate(worlds):
            stem = f"{name}_{i:02d}"
            save_world(world, run / f"{stem}.json")
            outputs.append(f"{stem}.json")
            if args.pgm:
                world_to_pgm(world, run / f"{stem}.pgm")
                outputs.append(f"{stem}.pgm")
    write_manifest(run, "gen-worlds", cfg, {"pgm": args.pgm}, {}, outputs)
    print(f"wrote {len(outputs)} world files to {run}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_cfg(args)
    run = _run_dir(args)
    dump_config(cfg, run / "config.json")
    train_w, eval_w = make_worlds(cfg)
    train_p, eval_p = make_profiles(cfg)
    net, rows = rl.train_teacher(cfg, train_w, eval_w, train_p, eval_p, run / "ckpt")
    (run / "logs").mkdir(exist_ok=True)
    (run / "ckpt" / "teacher.jsonl").rename(run / "logs" / "teacher.jsonl")
    ck = run / "ckpt" / "teacher"
    write_manifest(run, "train-teacher", cfg, {}, {"teacher": checkpoint_hash(ck)},
                   ["ckpt/teacher.json", "ckpt/teacher.bin", "logs/teacher.jsonl"])
    final = [r for r in rows if "probe_sr" in r][-1]
    print(f"teacher trained: probe SR {final['probe_sr']:.3f} "
          f"after {final['update'] + 1} updates -> {ck}")
    return 0


def cmd_train_student(args) -> int:
    overrides = {}
    if args.distill:
        overrides["distill_mode"] = args.distill
    if args.k:
        overrides["distill_k"] = args.k
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = _load_cfg(args, **overrides)
    run = _run_dir(args)
    dump_config(cfg, run / "config.json")
    train_w, eval_w = make_worlds(cfg)
    train_p, eval_p = make_profiles(cfg)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    net, rows = rl.train_student(cfg, train_w, eval_w, train_p, eval_p,
                                 run / "ckpt", teacher=teacher)
    (run / "logs").mkdir(exist_ok=True)
    (run / "ckpt" / "student.jsonl").rename(run / "logs" / "student.jsonl")
    ck = run / "ckpt" / "student"
    hashes = {"student": checkpoint_hash(ck)}
    cli_args = {"distill": args.distill, "k": args.k, "seed": args.seed,
                "teacher": args.teacher}
    if args.teacher:
        hashes["teacher_input"] = checkpoint_hash(Path(args.teacher))
    write_manifest(run, "train-student", cfg, cli_args, hashes,
                   ["ckpt/student.json", "ckpt/student.bin", "logs/student.jsonl"])
    last_probe = [r for r in rows if "probe_spl" in r]
    spl = last_probe[-1]["probe_spl"] if last_probe else float("nan")
    print(f"student trained ({cfg.distill_mode}): probe SPL {spl:.3f} -> {ck}")
    return 0


def train_stop_net_for(cfg: LabConfig, out_prefix: Path):
    """Deterministic stop-net training from the config's train split."""
    train_w, _ = make_worlds(cfg)
    train_p, _ = make_profiles(cfg)
    rng = np.random.default_rng([cfg.seed, 555])
    net = oig.train_stop_net(train_w, cfg, rng, train_p)
    save_checkpoint(net, out_prefix)
    return net


def _evaluate(cfg: LabConfig, ckpts: list[str], use_oig: bool,
              stop_net_path: str | None, run: Path, label: str,
              n_episodes: int | None = None, render: int = 0) -> dict:
    nets = [load_checkpoint(c) for c in ckpts]
    for net in nets:
        if not isinstance(net, WaypointPolicy) or net.kind != "audio":
            raise SystemExit(f"{label}: checkpoints must be audio waypoint policies")
    if use_oig and stop_net_path is None:
        # OIG needs a stop policy; train one from the config when not supplied
        stop_net = train_stop_net_for(cfg, run / "ckpt" / "stopnet")
    else:
        stop_net = load_checkpoint(stop_net_path) if stop_net_path else None
    episodes = eval_episode_set(cfg, n_episodes)
    agent = evalx.PolicyAgent(nets, greedy=cfg.greedy_eval, oig=use_oig,
                              stop_net=stop_net)
    rng = np.random.default_rng([cfg.seed, 99])
    results, trajs = evalx.run_episodes(agent, episodes, cfg, rng,
                                        collect_trajectories=True)
    m = evalx.metrics(results)
    (run / "metrics.csv").write_text(evalx.metrics_csv_rows([(label, m)]))
    evalx.write_trajectories(trajs, run / "trajectories.jsonl")
    outputs = ["metrics.csv", "trajectories.jsonl"]
    if render > 0:
        rdir = run / "renders"
        rdir.mkdir(exist_ok=True)
        worlds = {w.world_id: w for w, _ in episodes}
        for i, rec in enumerate(trajs[:render]):
            evalx.render_trajectory_svg(worlds[rec["world_id"]], rec,
                                        rdir / f"episode_{i:03d}.svg")
            outputs.append(f"renders/episode_{i:03d}.svg")
    return {"metrics": m, "outputs": outputs}


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    run = _run_dir(args)
    dump_config(cfg, run / "config.json")
    res = _evaluate(cfg, [args.ckpt], args.oig, args.stop_net, run, "eval",
                    args.episodes, args.render)
    hashes = {"ckpt": checkpoint_hash(Path(args.ckpt))}
    if args.stop_net:
        hashes["stopnet"] = checkpoint_hash(Path(args.stop_net))
    write_manifest(run, "eval", cfg,
                   {"ckpt": args.ckpt, "oig": args.oig, "stop_net": args.stop_net,
                    "episodes": args.episodes, "render": args.render},
                   hashes, res["outputs"])
    m = res["metrics"]
    print(f"eval: SR {m['SR']:.3f}  SPL {m['SPL']:.3f}  SoftSPL {m['SoftSPL']:.3f}  "
          f"SNA {m['SNA']:.3f}  NE {m['NE']:.2f}  NA {m['NA']:.1f}")
    return 0


def cmd_ensemble_eval(args) -> int:
    cfg = _load_cfg(args)
    run = _run_dir(args)
    dump_config(cfg, run / "config.json")
    res = _evaluate(cfg, args.ckpt, args.oig, args.stop_net, run, "ensemble",
                    args.episodes, args.render)
    hashes = {f"ckpt{i}": checkpoint_hash(Path(c)) for i, c in enumerate(args.ckpt)}
    if args.stop_net:
        hashes["stopnet"] = checkpoint_hash(Path(args.stop_net))
    write_manifest(run, "ensemble-eval", cfg,
                   {"ckpt": list(args.ckpt), "oig": args.oig,
                    "stop_net": args.stop_net, "episodes": args.episodes,
                    "render": args.render},
                   hashes, res["outputs"])
    m = res["metrics"]
    print(f"ensemble ({len(args.ckpt)} models): SR {m['SR']:.3f}  SPL {m['SPL']:.3f}")
    return 0


def cmd_sweep_k(args) -> int:
    ks = [int(x) for x in args.k.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    cfg0 = _load_cfg(args)
    run = _run_dir(args)
    dump_config(cfg0, run / "config.json")
    teacher = load_checkpoint(args.teacher)
    train_w, eval_w = make_worlds(cfg0)
    train_p, eval_p = make_profiles(cfg0)
    rows = []
    outputs = []
    for k in ks:
        for seed in seeds:
            cfg = dataclasses.replace(cfg0, distill_k=k, seed=seed,
                                      distill_mode="ccpd")
            sub = run / f"k{k}_seed{seed}"
            net, _ = rl.train_student(cfg, train_w, eval_w, train_p, eval_p,
                                      sub, teacher=teacher)
            episodes = eval_episode_set(cfg, args.episodes)
            agent = evalx.PolicyAgent([net], greedy=cfg.greedy_eval)
            res = evalx.run_episodes(agent, episodes, cfg,
                                     np.random.default_rng([cfg.seed, 99]))
            m = evalx.metrics(res)
            rows.append((f"k={k} seed={seed}", m))
            outputs += [f"k{k}_seed{seed}/student.json", f"k{k}_seed{seed}/student.bin"]
            print(f"k={k} seed={seed}: SR {m['SR']:.3f} SPL {m['SPL']:.3f}")
    (run / "metrics.csv").write_text(evalx.metrics_csv_rows(rows))
    write_manifest(run, "sweep-k", cfg0,
                   {"k": args.k, "seeds": args.seeds, "teacher": args.teacher,
                    "episodes": args.episodes},
                   {"teacher_input": checkpoint_hash(Path(args.teacher))},
                   outputs + ["metrics.csv"])
    return 0


def cmd_render(args) -> int:
    from .world import load_world
    world = load_world(args.world)
    records = [json.loads(line) for line in
               Path(args.traj).read_text().splitlines() if line.strip()]
    if not 0 <= args.index < len(records):
        raise SystemExit(f"trajectory index {args.index} out of range "
                         f"(0..{len(records) - 1})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evalx.render_trajectory_svg(world, records[args.index], out)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="echonav",
        description="Audio-goal waypoint navigation laboratory")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default=None, help="JSON config (defaults if omitted)")
        if needs_out:
            p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("gen-worlds", help="materialize the world sets as JSON/PGM")
    common(p)
    p.add_argument("--pgm", action="store_true", help="also write PGM renders")
    p.set_defaults(func=cmd_gen_worlds)

    p = sub.add_parser("train-teacher", help="PPO-train the point-goal teacher")
    common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train the audio-goal student")
    common(p)
    p.add_argument("--teacher", default=None, help="teacher checkpoint prefix")
    p.add_argument("--distill", choices=("off", "ccpd", "plain"), default=None)
    p.add_argument("--k", type=int, default=None, help="override distill_k")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="evaluate one checkpoint on held-out episodes")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--oig", action="store_true", help="omnidirectional gathering")
    p.add_argument("--stop-net", default=None, dest="stop_net")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--render", type=int, default=0, help="render first N episodes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble-eval", help="average action maps of several checkpoints")
    common(p)
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint prefix; repeat per model")
    p.add_argument("--oig", action="store_true")
    p.add_argument("--stop-net", default=None, dest="stop_net")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--render", type=int, default=0)
    p.set_defaults(func=cmd_ensemble_eval)

    p = sub.add_parser("sweep-k", help="train/evaluate over a list of k values")
    common(p)
    p.add_argument("--k", required=True, help="comma list, e.g. 10,30,50,100")
    p.add_argument("--seeds", default="1,2,3", help="comma list of seeds")
    p.add_argument("--teacher", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("render", help="render one logged trajectory to SVG")
    p.add_argument("--world", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
