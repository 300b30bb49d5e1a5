"""Room-image dataset collection and blank-view filtering."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from regnav.sim import BLANK_VAR_THRESHOLD, DIFFICULTIES, N_HEADINGS, TURN_DEG, House, Pose, render, sample_episode

LOCATION_TAGS = ("start", "target")


class DegenerateDatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoomImageRecord:
    image_id: int
    features: np.ndarray
    scene_id: str
    episode_id: int
    difficulty: str
    location_tag: str
    heading: int
    true_room_id: int  # evaluation oracle only; never part of a TrainingView

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "features": [float(v) for v in self.features],
            "scene_id": self.scene_id,
            "episode_id": self.episode_id,
            "difficulty": self.difficulty,
            "location_tag": self.location_tag,
            "heading": self.heading,
            "true_room_id": self.true_room_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoomImageRecord":
        return cls(
            int(d["image_id"]),
            np.asarray(d["features"], dtype=np.float64),
            str(d["scene_id"]),
            int(d["episode_id"]),
            str(d["difficulty"]),
            str(d["location_tag"]),
            int(d["heading"]),
            int(d["true_room_id"]),
        )


@dataclass(frozen=True)
class TrainingView:
    """What the unsupervised trainer is allowed to see: features plus annotations."""

    features: np.ndarray  # (N, d_obs)
    scene_ids: tuple[str, ...]
    episode_ids: np.ndarray
    difficulties: tuple[str, ...]
    location_tags: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class RoomImageDataset:
    records: list[RoomImageRecord]

    @property
    def N(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def features(self) -> np.ndarray:
        return np.stack([r.features for r in self.records])

    def training_view(self) -> TrainingView:
        return TrainingView(
            features=self.features(),
            scene_ids=tuple(r.scene_id for r in self.records),
            episode_ids=np.array([r.episode_id for r in self.records], dtype=np.int64),
            difficulties=tuple(r.difficulty for r in self.records),
            location_tags=tuple(r.location_tag for r in self.records),
        )

    def room_keys(self) -> list[tuple[str, int]]:
        """Ground-truth (scene, room) identity per record, for evaluation only."""
        return [(r.scene_id, r.true_room_id) for r in self.records]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_dict()) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "RoomImageDataset":
        with open(path) as fh:
            return cls([RoomImageRecord.from_dict(json.loads(line)) for line in fh if line.strip()])


def collect(
    houses: Sequence[House],
    episodes_per_house: int,
    angles: int = 4,
    seed: int = 0,
) -> RoomImageDataset:
    """Capture ``angles`` evenly spaced views at the start and target of each episode.

    Episode difficulties cycle easy/medium/hard. Episode ids are global.
    """
    if episodes_per_house < 1:
        raise ValueError("episodes_per_house must be >= 1")
    if angles < 1 or N_HEADINGS % angles:
        raise ValueError(f"angles must divide {N_HEADINGS}, got {angles}")
    headings = [k * (N_HEADINGS // angles) * TURN_DEG for k in range(angles)]
    records: list[RoomImageRecord] = []
    episode_id = 0
    for house in houses:
        for k in range(episodes_per_house):
            difficulty = DIFFICULTIES[k % len(DIFFICULTIES)]
            ep = sample_episode(house, difficulty, seed=seed, episode_id=k)
            for tag, pose in zip(LOCATION_TAGS, (ep.start, ep.goal)):
                room = house.room_at(pose)
                for heading in headings:
                    view = Pose(pose.x, pose.y, heading)
                    records.append(
                        RoomImageRecord(
                            image_id=len(records),
                            features=render(house, view, render_seed=seed),
                            scene_id=house.scene_id,
                            episode_id=episode_id,
                            difficulty=difficulty,
                            location_tag=tag,
                            heading=heading,
                            true_room_id=room,
                        )
                    )
            episode_id += 1
    return RoomImageDataset(records)


def _reindex(records: Iterable[RoomImageRecord]) -> list[RoomImageRecord]:
    out = []
    for i, r in enumerate(records):
        out.append(
            RoomImageRecord(i, r.features, r.scene_id, r.episode_id, r.difficulty, r.location_tag, r.heading, r.true_room_id)
        )
    return out


def filter_blank(ds: RoomImageDataset, threshold: float = BLANK_VAR_THRESHOLD) -> RoomImageDataset:
    """Drop information-poor views (feature variance below ``threshold``)."""
    if not threshold > 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    kept = [r for r in ds.records if float(np.var(r.features)) >= threshold]
    if not kept:
        raise DegenerateDatasetError("every record was filtered as blank")
    return RoomImageDataset(_reindex(kept))
