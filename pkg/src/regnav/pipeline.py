"""Stage orchestration with a hash manifest, plus the two ablation grids.

Each stage reads its inputs from disk and writes its outputs to disk, so a
resumed run and a fresh run evaluate exactly the same (float32-rounded)
checkpoints.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable

from regnav.config import RunConfig, make_houses
from regnav.data import RoomImageDataset, collect, filter_blank
from regnav.expert import ExpertConfig, RoomExpert, relation_accuracy, train_expert
from regnav.metrics import evaluate, export_trajectory_svg
from regnav.nav import PolicyAgent, train_policy
from regnav.sim import DIFFICULTIES, House

log = logging.getLogger(__name__)

STAGES = ("houses", "collect", "filter", "pretrain", "train", "eval")
MANIFEST = "manifest.json"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def file_sha(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def obj_sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class Manifest:
    def __init__(self, root: Path):
        self.root = root
        self.path = root / MANIFEST
        self.stages: dict[str, dict] = {}
        if self.path.exists():
            self.stages = json.loads(self.path.read_text()).get("stages", {})

    def fresh(self, name: str, key: str) -> bool:
        entry = self.stages.get(name)
        if entry is None or entry["key"] != key:
            return False
        for rel, sha in entry["outputs"].items():
            p = self.root / rel
            if not p.exists() or file_sha(p) != sha:
                return False
        return True

    def outputs_sha(self, name: str) -> dict[str, str]:
        return self.stages[name]["outputs"]

    def record(self, name: str, key: str, outputs: list[Path]) -> None:
        self.stages[name] = {"key": key, "outputs": {str(p.relative_to(self.root)): file_sha(p) for p in sorted(outputs)}}
        self.path.write_text(json.dumps({"stages": self.stages}, indent=2, sort_keys=True) + "\n")


def _load_houses(root: Path, split: str) -> list[House]:
    return [House.load(p) for p in sorted((root / "houses" / split).glob("*.json"))]


def _stage_houses(cfg: RunConfig, root: Path) -> list[Path]:
    outs = []
    for split in ("train", "eval"):
        d = root / "houses" / split
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        for house in make_houses(cfg.world, split):
            p = d / f"{house.scene_id}.json"
            house.save(p)
            outs.append(p)
    return outs


def _stage_collect(cfg: RunConfig, root: Path) -> list[Path]:
    ds = collect(_load_houses(root, "train"), cfg.data.episodes_per_house, cfg.data.angles, cfg.data.seed)
    ds.to_jsonl(root / "dataset_raw.jsonl")
    held = collect(_load_houses(root, "eval"), cfg.data.episodes_per_house, cfg.data.angles, cfg.data.seed)
    filter_blank(held, cfg.data.blank_threshold).to_jsonl(root / "dataset_heldout.jsonl")
    return [root / "dataset_raw.jsonl", root / "dataset_heldout.jsonl"]


def _stage_filter(cfg: RunConfig, root: Path) -> list[Path]:
    raw = RoomImageDataset.from_jsonl(root / "dataset_raw.jsonl")
    ds = filter_blank(raw, cfg.data.blank_threshold) if cfg.data.clean else raw
    ds.to_jsonl(root / "dataset.jsonl")
    return [root / "dataset.jsonl"]


def _oracle(root: Path) -> Callable[[RoomExpert], float]:
    held = RoomImageDataset.from_jsonl(root / "dataset_heldout.jsonl")
    feats, keys = held.features(), held.room_keys()
    return lambda ex: relation_accuracy(ex, feats, keys, n_pairs=1000, seed=0)


def _stage_pretrain(cfg: RunConfig, root: Path) -> list[Path]:
    ds = RoomImageDataset.from_jsonl(root / "dataset.jsonl")
    expert, _ = train_expert(
        ds.training_view(), cfg.pretrain.epochs, cfg.pretrain.expert, oracle=_oracle(root), log_path=root / "expert_curve.csv"
    )
    expert.save(root / "expert.ckpt")
    return [root / "expert.ckpt", root / "expert_curve.csv"]


def _stage_train(cfg: RunConfig, root: Path) -> list[Path]:
    expert = RoomExpert.load(root / "expert.ckpt")
    pol = cfg.policy
    agent, _ = train_policy(
        _load_houses(root, "train"),
        expert,
        pol.fusion,
        pol.total_steps,
        pol.train,
        log_path=root / "train_curve.csv",
        diag_path=root / "agent_diverged.ckpt",
    )
    agent.save(root / "agent.ckpt")
    return [root / "agent.ckpt", root / "train_curve.csv"]


def _stage_eval(cfg: RunConfig, root: Path) -> list[Path]:
    agent = PolicyAgent.load(root / "agent.ckpt")
    expert = RoomExpert.load(root / "expert.ckpt")
    houses = {h.scene_id: h for h in _load_houses(root, "eval")}
    e = cfg.eval
    report, results = evaluate(
        agent,
        expert,
        list(houses.values()),
        e.n_episodes,
        e.difficulty,
        e.seed,
        max_steps=cfg.policy.train.max_steps,
        relation_source=cfg.policy.train.relation_source,
        reward=cfg.policy.train.reward,
        return_results=True,
    )
    report.save(root / "report.json")
    outs = [root / "report.json"]
    svg_dir = root / "svg"
    if svg_dir.exists():
        shutil.rmtree(svg_dir)
    if e.svg_episodes:
        svg_dir.mkdir()
        for r in results[: e.svg_episodes]:
            p = svg_dir / f"episode_{r.episode_id:05d}.svg"
            export_trajectory_svg(houses[r.scene_id], r, p)
            outs.append(p)
    return outs


_STAGE_FUNCS = {
    "houses": (_stage_houses, lambda c: asdict(c.world)),
    "collect": (_stage_collect, lambda c: {k: v for k, v in asdict(c.data).items() if k != "clean"}),
    "filter": (_stage_filter, lambda c: {"clean": c.data.clean, "threshold": c.data.blank_threshold}),
    "pretrain": (_stage_pretrain, lambda c: asdict(c.pretrain)),
    "train": (_stage_train, lambda c: asdict(c.policy)),
    "eval": (_stage_eval, lambda c: asdict(c.eval) | {"train": asdict(c.policy.train)}),
}
_UPSTREAM = {
    "houses": (),
    "collect": ("houses",),
    "filter": ("collect",),
    "pretrain": ("filter", "collect"),
    "train": ("pretrain", "houses"),
    "eval": ("train", "pretrain", "houses"),
}


def run_stages(cfg: RunConfig, root: str | Path, stages=STAGES) -> Manifest:
    """Run (or skip, when the manifest says they are fresh) the requested stages in order."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(root)
    for name in stages:
        fn, section = _STAGE_FUNCS[name]
        try:
            key = obj_sha({"config": section(cfg), "upstream": {u: manifest.outputs_sha(u) for u in _UPSTREAM[name]}})
        except KeyError as exc:
            raise PipelineError(name, RuntimeError(f"upstream stage {exc} has not run")) from exc
        if manifest.fresh(name, key):
            log.info("stage %s: up to date", name)
            continue
        log.info("stage %s: running", name)
        try:
            outputs = fn(cfg, root)
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        manifest.record(name, key, outputs)
    return manifest


def run_pipeline(config_path: str | Path, out_dir: str | Path | None = None) -> Path:
    """gen-houses -> collect -> filter -> pretrain -> train -> eval. Returns the report path."""
    cfg = RunConfig.load(config_path)
    root = Path(out_dir) if out_dir is not None else Path(config_path).with_suffix("")
    root.mkdir(parents=True, exist_ok=True)
    cfg.save(root / "config.json")
    run_stages(cfg, root)
    return root / "report.json"


# ablations -------------------------------------------------------------------------------

EXPERT_GRID = (("RE-1", False, False), ("RE-2", True, False), ("RE-3", False, True), ("RE-4", True, True))


def expert_grid(cfg: RunConfig, root: Path) -> list[dict]:
    raw = RoomImageDataset.from_jsonl(root / "dataset_raw.jsonl")
    clean = filter_blank(raw, cfg.data.blank_threshold)
    oracle = _oracle(root)
    rows = []
    for name, use_clean, refine in EXPERT_GRID:
        ds = clean if use_clean else raw
        ecfg: ExpertConfig = replace(cfg.pretrain.expert, refine=refine)
        expert, _ = train_expert(ds.training_view(), cfg.pretrain.epochs, ecfg)
        rows.append(
            {
                "variant": name,
                "clean": use_clean,
                "refine": refine,
                "accuracy": oracle(expert),
                "K": expert.memory.K,
                "n_images": ds.N,
                "dataset_sha": obj_sha([r.image_id for r in ds.records] + [file_sha(root / "dataset_raw.jsonl")]),
            }
        )
    return rows


def fusion_grid(cfg: RunConfig, root: Path, fusions=("none", "implicit", "explicit")) -> list[dict]:
    expert = RoomExpert.load(root / "expert.ckpt")
    train_houses = _load_houses(root, "train")
    eval_houses = _load_houses(root, "eval")
    tc = cfg.policy.train
    rows = []
    for fusion in fusions:
        agent, _ = train_policy(train_houses, expert, fusion, cfg.policy.total_steps, tc)
        for diff in DIFFICULTIES:
            rep = evaluate(agent, expert, eval_houses, cfg.eval.n_episodes, diff, cfg.eval.seed,
                           max_steps=tc.max_steps, relation_source=tc.relation_source, reward=tc.reward)
            rows.append({"fusion": fusion, "difficulty": diff, "n": rep.n_episodes, "SR": rep.SR, "SPL": rep.SPL})
    return rows


def write_rows(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def ablation_table(config_path: str | Path, out_dir: str | Path, grids=("expert", "fusion")) -> list[Path]:
    """Expert grid ({clean} x {refine}) and fusion grid ({none, implicit, explicit} x difficulty) as CSV."""
    cfg = RunConfig.load(config_path)
    root = Path(out_dir)
    run_stages(cfg, root, ("houses", "collect", "filter", "pretrain"))
    outs = []
    if "expert" in grids:
        p = root / "expert_grid.csv"
        write_rows(expert_grid(cfg, root), p)
        outs.append(p)
    if "fusion" in grids:
        p = root / "fusion_grid.csv"
        write_rows(fusion_grid(cfg, root), p)
        outs.append(p)
    return outs
