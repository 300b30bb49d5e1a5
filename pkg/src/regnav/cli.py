"""``regnav`` command line interface."""
from __future__ import annotations

import os

# Cap BLAS worker threads before numpy is imported anywhere.
_THREADS = os.environ.get("REGNAV_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import json
import logging
import sys
from pathlib import Path

from regnav import __version__


def _threads() -> int:
    try:
        n = int(_THREADS) if _THREADS else 1
    except ValueError:
        raise SystemExit(f"REGNAV_THREADS must be a positive integer, got {_THREADS!r}")
    if n < 1:
        raise SystemExit(f"REGNAV_THREADS must be a positive integer, got {_THREADS!r}")
    return n


def _load_config(path: str | None):
    from regnav.config import RunConfig

    return RunConfig.load(path) if path else RunConfig()


def _houses(args, cfg, split_range: str | None, default: str = "train"):
    from regnav.config import WorldConfig, make_houses, parse_seed_range

    world = cfg.world
    if split_range:
        lo, hi = parse_seed_range(split_range)
        world = WorldConfig(train_seeds=(lo, hi), eval_seeds=(hi, hi + 1), min_rooms=world.min_rooms,
                            max_rooms=world.max_rooms, min_style_gap=world.min_style_gap)
        return make_houses(world, "train")
    return make_houses(world, default)


def cmd_init_config(args) -> int:
    from regnav.config import RunConfig

    text = RunConfig().to_json()
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    return 0


def cmd_gen_house(args) -> int:
    from regnav.sim import generate_house

    house = generate_house(args.seed, args.rooms, args.width, args.height, min_style_gap=args.min_style_gap)
    house.save(args.out)
    print(f"wrote {args.out} ({house.scene_id}, {house.shape[0]}x{house.shape[1]} cells)")
    return 0


def cmd_collect(args) -> int:
    from regnav.data import collect
    from regnav.sim import House

    cfg = _load_config(args.config)
    houses = [House.load(p) for p in args.house] if args.house else _houses(args, cfg, args.houses_seed_range)
    ds = collect(houses, args.episodes or cfg.data.episodes_per_house, args.angles or cfg.data.angles, args.seed)
    ds.to_jsonl(args.out)
    print(f"wrote {args.out} ({ds.N} records from {len(houses)} houses)")
    return 0


def cmd_filter(args) -> int:
    from regnav.data import RoomImageDataset, filter_blank

    ds = RoomImageDataset.from_jsonl(args.input)
    out = filter_blank(ds, args.threshold)
    out.to_jsonl(args.out)
    print(f"kept {out.N} of {ds.N} records -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from dataclasses import replace

    from regnav.data import RoomImageDataset
    from regnav.expert import train_expert

    cfg = _load_config(args.config)
    ecfg = cfg.pretrain.expert
    if args.no_refine:
        ecfg = replace(ecfg, refine=False)
    if args.k_neighbors:
        ecfg = replace(ecfg, k_neighbors=args.k_neighbors)
    if args.seed is not None:
        ecfg = replace(ecfg, seed=args.seed)
    ds = RoomImageDataset.from_jsonl(args.dataset)
    expert, hist = train_expert(ds.training_view(), args.epochs or cfg.pretrain.epochs, ecfg, log_path=args.log)
    expert.save(args.out)
    print(f"wrote {args.out} (K={expert.memory.K}, final L_cluster={hist[-1]['L_cluster']:.4f})")
    return 0


def cmd_train(args) -> int:
    from dataclasses import replace

    from regnav.expert import RoomExpert
    from regnav.nav import train_policy

    cfg = _load_config(args.config)
    tc = cfg.policy.train
    if args.relation_source:
        tc = replace(tc, relation_source=args.relation_source)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed, policy=replace(tc.policy, seed=args.seed))
    expert = RoomExpert.load(args.expert) if args.expert else None
    houses = _houses(args, cfg, args.houses_seed_range)
    steps = cfg.policy.total_steps if args.steps is None else args.steps
    progress = None
    if args.verbose:
        progress = lambda row: print(json.dumps(row), flush=True)
    agent, _ = train_policy(houses, expert, args.fusion or cfg.policy.fusion, steps, tc, log_path=args.log,
                            diag_path=Path(args.out).with_suffix(".diverged.ckpt"), progress=progress)
    agent.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    from regnav.expert import RoomExpert
    from regnav.metrics import evaluate, export_trajectory_svg
    from regnav.nav import PolicyAgent

    cfg = _load_config(args.config)
    agent = PolicyAgent.load(args.agent)
    expert = RoomExpert.load(args.expert) if args.expert else None
    houses = _houses(args, cfg, args.houses_seed_range, default="eval")
    tc = cfg.policy.train
    report, results = evaluate(agent, expert, houses, args.episodes, args.difficulty, args.seed, max_steps=tc.max_steps,
                               relation_source=args.relation_source or tc.relation_source, reward=tc.reward,
                               return_results=True)
    report.save(args.report)
    if args.svg_dir:
        out = Path(args.svg_dir)
        out.mkdir(parents=True, exist_ok=True)
        by_id = {h.scene_id: h for h in houses}
        for r in results[: args.svg_episodes]:
            export_trajectory_svg(by_id[r.scene_id], r, out / f"episode_{r.episode_id:05d}.svg")
    print(f"SR={report.SR:.3f} SPL={report.SPL:.3f} over {report.n_episodes} episodes -> {args.report}")
    return 0


def cmd_ablate(args) -> int:
    from regnav.pipeline import ablation_table

    grids = ("expert", "fusion") if args.grid == "all" else (args.grid,)
    for p in ablation_table(args.config, args.out_dir, grids):
        print(f"wrote {p}")
    return 0


def cmd_svg(args) -> int:
    from regnav.expert import RoomExpert
    from regnav.metrics import export_trajectory_svg
    from regnav.nav import PolicyAgent, RandomAgent, ShortestPathAgent, run_episode
    from regnav.sim import House, sample_episode

    house = House.load(args.house)
    ep = sample_episode(house, args.difficulty, seed=args.seed, episode_id=args.episode)
    if args.agent == "shortest":
        agent = ShortestPathAgent()
    elif args.agent == "random":
        agent = RandomAgent()
    else:
        agent = PolicyAgent.load(args.agent)
    expert = RoomExpert.load(args.expert) if args.expert else None
    result = run_episode(agent, house, ep, expert, greedy=True, relation_source=args.relation_source)
    export_trajectory_svg(house, result, args.out)
    print(f"wrote {args.out} (success={result.success}, steps={result.steps_used})")
    return 0


def cmd_run(args) -> int:
    from regnav.pipeline import run_pipeline

    report = run_pipeline(args.config, args.out_dir)
    print(f"wrote {report}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regnav", description="Room-expert guided image-goal navigation on synthetic houses.")
    p.add_argument("--version", action="version", version=f"regnav {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write a config file with every default")
    s.add_argument("--out", default="regnav.json", help="output path, or - for stdout")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("gen-house", help="generate one house as JSON")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--rooms", type=int, default=3)
    s.add_argument("--width", type=float, default=None, help="meters")
    s.add_argument("--height", type=float, default=None, help="meters")
    s.add_argument("--min-style-gap", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_house)

    s = sub.add_parser("collect", help="capture the room-image dataset (JSONL)")
    s.add_argument("--config")
    s.add_argument("--house", action="append", help="house JSON (repeatable); overrides the seed range")
    s.add_argument("--houses-seed-range", help="lo:hi house seeds (default: config train range)")
    s.add_argument("--episodes", type=int, help="episodes per house")
    s.add_argument("--angles", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("filter", help="drop blank views")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--threshold", type=float, default=1e-3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("pretrain", help="train the room expert")
    s.add_argument("--config")
    s.add_argument("--dataset", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--k-neighbors", type=int)
    s.add_argument("--no-refine", action="store_true", help="cluster on raw embedding distances")
    s.add_argument("--seed", type=int)
    s.add_argument("--log", help="training-curve CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="train the navigation policy with PPO")
    s.add_argument("--config")
    s.add_argument("--houses-seed-range")
    s.add_argument("--fusion", choices=("none", "implicit", "explicit"))
    s.add_argument("--expert")
    s.add_argument("--relation-source", choices=("expert", "oracle"))
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--log", help="training-curve CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a policy (SR / SPL)")
    s.add_argument("--config")
    s.add_argument("--agent", required=True)
    s.add_argument("--expert")
    s.add_argument("--houses-seed-range", help="default: config eval range")
    s.add_argument("--difficulty", default="all", choices=("easy", "medium", "hard", "all"))
    s.add_argument("--episodes", type=int, default=90)
    s.add_argument("--relation-source", choices=("expert", "oracle"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", default="report.json")
    s.add_argument("--svg-dir")
    s.add_argument("--svg-episodes", type=int, default=3)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="expert and fusion ablation grids (CSV)")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", choices=("expert", "fusion", "all"), default="all")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("svg", help="render one episode as a top-down SVG")
    s.add_argument("--house", required=True)
    s.add_argument("--agent", default="shortest", help="checkpoint path, 'shortest' or 'random'")
    s.add_argument("--expert")
    s.add_argument("--relation-source", choices=("expert", "oracle"), default="expert")
    s.add_argument("--difficulty", default="medium", choices=("easy", "medium", "hard"))
    s.add_argument("--episode", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_svg)

    s = sub.add_parser("run", help="full pipeline from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _threads()
    from regnav.config import ConfigError
    from regnav.pipeline import PipelineError

    try:
        return args.func(args)
    except (ConfigError, PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"regnav: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
