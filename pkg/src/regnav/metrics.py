"""Success rate, SPL, evaluation reports and top-down trajectory SVGs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from regnav.nav import EpisodeResult, RewardConfig, run_episode
from regnav.sim import CELL, DIFFICULTIES, House, sample_episode

REPORT_FORMAT = "regnav-report/1"


def _check(results: Sequence[EpisodeResult]) -> None:
    if len(results) == 0:
        raise ValueError("need at least one episode result")


def spl_weight(result: EpisodeResult) -> float:
    if not result.success:
        return 0.0
    denom = max(result.shortest_path, result.path_length_taken)
    return 1.0 if denom <= 0 else result.shortest_path / denom


def spl(results: Sequence[EpisodeResult]) -> float:
    _check(results)
    return float(np.mean([spl_weight(r) for r in results]))


def success_rate(results: Sequence[EpisodeResult]) -> float:
    _check(results)
    return float(np.mean([r.success for r in results]))


@dataclass
class EvalReport:
    n_episodes: int
    SR: float
    SPL: float
    per_difficulty: dict[str, dict]
    episodes: list[dict]

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        d.pop("format", None)
        return cls(**d)


def build_report(results: Sequence[EpisodeResult]) -> EvalReport:
    _check(results)
    results = sorted(results, key=lambda r: r.episode_id)
    per = {}
    for diff in DIFFICULTIES:
        sub = [r for r in results if r.difficulty == diff]
        if sub:
            per[diff] = {"n": len(sub), "SR": success_rate(sub), "SPL": spl(sub)}
    rows = [
        {
            "episode_id": r.episode_id,
            "scene_id": r.scene_id,
            "difficulty": r.difficulty,
            "success": r.success,
            "spl": spl_weight(r),
            "shortest_path": r.shortest_path,
            "path_length_taken": r.path_length_taken,
            "steps_used": r.steps_used,
            "final_distance": r.final_distance,
        }
        for r in results
    ]
    return EvalReport(len(results), success_rate(results), spl(results), per, rows)


def evaluation_episodes(houses: Sequence[House], n_episodes: int, difficulty_filter: str = "all", seed: int = 0):
    """Deterministic (house, episode) list; difficulties cycle unless filtered."""
    if not houses:
        raise ValueError("need at least one evaluation house")
    if difficulty_filter != "all" and difficulty_filter not in DIFFICULTIES:
        raise ValueError(f"difficulty_filter must be 'all' or one of {DIFFICULTIES}")
    out = []
    for k in range(n_episodes):
        house = houses[k % len(houses)]
        diff = DIFFICULTIES[(k // len(houses)) % len(DIFFICULTIES)] if difficulty_filter == "all" else difficulty_filter
        out.append((house, sample_episode(house, diff, seed=seed, episode_id=k)))
    return out


def evaluate(
    agent,
    expert,
    houses: Sequence[House],
    n_episodes: int,
    difficulty_filter: str = "all",
    seed: int = 0,
    max_steps: int = 200,
    relation_source: str = "expert",
    reward: RewardConfig = RewardConfig(),
    return_results: bool = False,
):
    """Greedy rollouts on held-out houses. Returns an EvalReport (and raw results if asked)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    results = [
        run_episode(agent, house, ep, expert, greedy=True, max_steps=max_steps, reward=reward, relation_source=relation_source)
        for house, ep in evaluation_episodes(houses, n_episodes, difficulty_filter, seed)
    ]
    report = build_report(results)
    return (report, results) if return_results else report


# SVG -------------------------------------------------------------------------------------

_PX = 16  # pixels per grid cell


def _style_color(style: np.ndarray) -> str:
    rgb = np.clip(0.55 + 0.45 * np.asarray(style[:3]), 0, 1)
    return "#%02x%02x%02x" % tuple(int(round(255 * v)) for v in rgb)


def _step_color(t: float) -> str:
    # blue -> orange along the trajectory
    a, b = np.array([40, 90, 200]), np.array([240, 140, 20])
    return "#%02x%02x%02x" % tuple(int(v) for v in np.round(a + (b - a) * t))


def trajectory_vertices(result: EpisodeResult) -> list[tuple[float, float]]:
    pts = [(result.poses[0].x, result.poses[0].y)]
    for p in result.poses[1:]:
        if (p.x, p.y) != pts[-1]:
            pts.append((p.x, p.y))
    return pts


def export_trajectory_svg(house: House, result: EpisodeResult, path: str | Path) -> None:
    """Top-down map: walls, room tint, start (green), goal (red), step-coloured path."""
    H, W = house.shape
    px = lambda m: m / CELL * _PX
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * _PX}" height="{H * _PX}" viewBox="0 0 {W * _PX} {H * _PX}">',
        f"<title>{escape(result.scene_id)} episode {result.episode_id}</title>",
    ]
    for r in range(H):
        for c in range(W):
            room = int(house.room_of[r, c])
            fill = "#222222" if room < 0 else _style_color(house.rooms[room].style)
            parts.append(f'<rect x="{c * _PX}" y="{r * _PX}" width="{_PX}" height="{_PX}" fill="{fill}"/>')
    pts = trajectory_vertices(result)
    if len(pts) > 1:
        coords = " ".join(f"{px(x):.2f},{px(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#3355aa" stroke-width="2"/>')
        for i, (x, y) in enumerate(pts):
            parts.append(f'<circle cx="{px(x):.2f}" cy="{px(y):.2f}" r="2" fill="{_step_color(i / (len(pts) - 1))}"/>')
    sx, sy = pts[0]
    parts.append(f'<circle class="start" cx="{px(sx):.2f}" cy="{px(sy):.2f}" r="5" fill="#22aa22"/>')
    goal = result.goal
    if goal is not None:
        parts.append(f'<circle class="goal" cx="{px(goal.x):.2f}" cy="{px(goal.y):.2f}" r="5" fill="#dd2222"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
