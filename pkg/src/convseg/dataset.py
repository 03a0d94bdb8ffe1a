"""Scenes, JSON-lines scene files, resampling, batching and synthetic data.

Dataset root layout::

    root/categories.json            list of {"category", "num_parts", "part_names"}
    root/<category>/train.jsonl     labelled scenes
    root/<category>/dev.jsonl       labelled scenes
    root/<category>/test.jsonl      scenes without labels
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, IntegrityError, ParseError
from .model import CATEGORIES

SPLITS = ("train", "test", "dev")


@dataclass
class Scene:
    scene_id: str
    category: str
    points: np.ndarray
    component_ids: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.component_ids = np.asarray(self.component_ids, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def components(self) -> np.ndarray:
        return np.unique(self.component_ids)

    def validate(self) -> None:
        where = f"scene {self.scene_id!r}"
        if self.category not in CATEGORIES:
            raise IntegrityError(f"{where}: unknown category {self.category!r}")
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise IntegrityError(f"{where}: points must be N x 3, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise IntegrityError(f"{where}: non-finite coordinates")
        n = self.points.shape[0]
        if self.component_ids.shape != (n,):
            raise IntegrityError(f"{where}: {self.component_ids.size} component ids for {n} points")
        if self.labels is None:
            return
        if self.labels.shape != (n,):
            raise IntegrityError(f"{where}: {self.labels.size} labels for {n} points")
        if (self.labels < 0).any():
            raise IntegrityError(f"{where}: negative part label")
        for comp, lab in zip(*_component_labels(self.component_ids, self.labels)):
            if lab is None:
                raise IntegrityError(f"{where}: labels vary within component {comp}")

    def component_label_map(self) -> dict[int, int]:
        if self.labels is None:
            return {}
        return {int(c): int(l) for c, l in zip(*_component_labels(self.component_ids, self.labels))}

    def to_json(self) -> str:
        rec = {"scene_id": self.scene_id, "category": self.category,
               "points": self.points.tolist(), "components": self.component_ids.tolist()}
        if self.labels is not None:
            rec["labels"] = self.labels.tolist()
        return json.dumps(rec, separators=(",", ":"))

    def same_as(self, other: "Scene") -> bool:
        if (self.scene_id, self.category) != (other.scene_id, other.category):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.component_ids, other.component_ids)
                and (self.labels is None or np.array_equal(self.labels, other.labels)))


def _component_labels(ids: np.ndarray, labels: np.ndarray):
    """Per component: its label, or None when the label is not constant."""
    uniq, inverse = np.unique(ids, return_inverse=True)
    lo = np.full(uniq.size, np.iinfo(np.int64).max)
    hi = np.full(uniq.size, np.iinfo(np.int64).min)
    np.minimum.at(lo, inverse, labels)
    np.maximum.at(hi, inverse, labels)
    return uniq.tolist(), [int(a) if a == b else None for a, b in zip(lo, hi)]


@dataclass
class DatasetSplit:
    name: str
    scenes: list[Scene] = field(default_factory=list)

    def __post_init__(self):
        if self.name not in SPLITS:
            raise ConfigError(f"unknown split {self.name!r}")
        if self.name == "train":
            for s in self.scenes:
                if s.labels is None:
                    raise IntegrityError(f"train scene {s.scene_id!r} has no labels")


@dataclass(frozen=True)
class CategoryInfo:
    category: str
    num_parts: int
    part_names: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"category": self.category, "num_parts": self.num_parts,
                "part_names": list(self.part_names)}


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _scene_from_record(rec: dict, where: str) -> Scene:
    if not isinstance(rec, dict):
        raise ParseError(f"{where}: expected a JSON object")
    try:
        return Scene(str(rec["scene_id"]), rec["category"], rec["points"],
                     rec["components"], rec.get("labels"))
    except KeyError as exc:
        raise ParseError(f"{where}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, IntegrityError):
            raise
        raise ParseError(f"{where}: {exc}") from None


def load_scenes(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            scenes.append(_scene_from_record(rec, f"{path}:{lineno}"))
    return scenes


def emit_scenes(scenes: Iterable[Scene], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            fh.write(s.to_json() + "\n")
    os.replace(tmp, path)


def load_split(root, category: str, name: str) -> DatasetSplit:
    path = Path(root) / category / f"{name}.jsonl"
    if not path.exists():
        raise ConfigError(f"missing split file {path}")
    return DatasetSplit(name, load_scenes(path))


def load_categories(root) -> dict[str, CategoryInfo]:
    path = Path(root) / "categories.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"missing {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}") from None
    if isinstance(raw, dict):
        raw = [raw]
    out = {}
    for rec in raw:
        try:
            info = CategoryInfo(rec["category"], int(rec["num_parts"]), tuple(rec["part_names"]))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"{path}: bad category record {rec!r}") from exc
        if len(info.part_names) != info.num_parts:
            raise IntegrityError(f"{path}: {info.category} lists {len(info.part_names)} "
                                 f"part names for {info.num_parts} parts")
        out[info.category] = info
    return out


def write_categories(root, infos: Iterable[CategoryInfo]) -> None:
    """Merge ``infos`` into ``root/categories.json`` (sorted by category)."""
    path = Path(root) / "categories.json"
    current = load_categories(root) if path.exists() else {}
    for info in infos:
        current[info.category] = info
    path.parent.mkdir(parents=True, exist_ok=True)
    body = [current[c].to_dict() for c in sorted(current)]
    path.write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# resampling and batching
# ---------------------------------------------------------------------------

def resample_scene(scene: Scene, n_points: int, rng: np.random.Generator) -> Scene:
    """Draw exactly ``n_points`` points, at least one from every component.

    One seed point is drawn per component; the rest come uniformly from the
    remaining points without replacement, or from all points with
    replacement when the scene is too small.  Output order is shuffled.
    """
    comps = scene.components
    if n_points < comps.size:
        raise CapacityError(f"scene {scene.scene_id!r} has {comps.size} components, "
                            f"cannot fit them into {n_points} points")
    n = scene.n_points
    seeds = np.array([rng.choice(np.flatnonzero(scene.component_ids == c)) for c in comps])
    quota = n_points - seeds.size
    if n >= n_points:
        rest = np.setdiff1d(np.arange(n), seeds)
        extra = rng.choice(rest, size=quota, replace=False)
    else:
        extra = rng.integers(0, n, size=quota)
    idx = rng.permutation(np.concatenate([seeds, extra]))
    return Scene(scene.scene_id, scene.category, scene.points[idx], scene.component_ids[idx],
                 None if scene.labels is None else scene.labels[idx])


def make_batches(scenes: Sequence, scenes_per_batch: int,
                 rng: np.random.Generator) -> list[list]:
    if scenes_per_batch < 1:
        raise ConfigError(f"scenes_per_batch must be >= 1, got {scenes_per_batch}")
    order = rng.permutation(len(scenes))
    return [[scenes[i] for i in order[j:j + scenes_per_batch]]
            for j in range(0, len(order), scenes_per_batch)]


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartTemplate:
    name: str
    shape: str                       # "box" or "ellipsoid"
    center: tuple[float, float, float]
    half_size: tuple[float, float, float]


# Parts sit at clearly different heights or sides so labels follow from
# relative geometry.  Sizes and offsets are jittered per scene.
TEMPLATES: dict[str, tuple[PartTemplate, ...]] = {
    "chair": (
        PartTemplate("seat", "box", (0.0, 0.0, 0.0), (0.45, 0.45, 0.06)),
        PartTemplate("back", "box", (0.0, -0.7, 0.6), (0.45, 0.05, 0.4)),
        PartTemplate("legs", "box", (0.0, 0.0, -0.6), (0.12, 0.12, 0.38)),
        PartTemplate("armrest", "ellipsoid", (0.75, 0.0, 0.3), (0.07, 0.35, 0.07)),
    ),
    "bed": (
        PartTemplate("mattress", "box", (0.0, 0.0, 0.1), (0.8, 1.0, 0.12)),
        PartTemplate("headboard", "box", (0.0, -1.4, 0.45), (0.8, 0.06, 0.45)),
        PartTemplate("frame", "box", (0.0, 0.0, -0.4), (0.75, 0.95, 0.12)),
    ),
    "lamp": (
        PartTemplate("base", "ellipsoid", (0.0, 0.0, -0.95), (0.35, 0.35, 0.08)),
        PartTemplate("stem", "box", (0.0, 0.0, -0.2), (0.05, 0.05, 0.45)),
        PartTemplate("shade", "ellipsoid", (0.0, 0.0, 0.75), (0.4, 0.4, 0.25)),
    ),
    "storage_furniture": (
        PartTemplate("body", "box", (0.0, 0.0, 0.0), (0.6, 0.35, 0.6)),
        PartTemplate("top", "box", (0.0, 0.0, 0.85), (0.68, 0.42, 0.05)),
        PartTemplate("door", "box", (0.0, 0.6, -0.05), (0.55, 0.03, 0.5)),
        PartTemplate("handle", "ellipsoid", (0.4, 0.85, 0.0), (0.04, 0.05, 0.12)),
    ),
    "table": (
        PartTemplate("top", "box", (0.0, 0.0, 0.8), (0.9, 0.6, 0.05)),
        PartTemplate("column", "box", (0.0, 0.0, 0.0), (0.08, 0.08, 0.5)),
        PartTemplate("foot", "ellipsoid", (0.0, 0.0, -0.8), (0.45, 0.45, 0.06)),
    ),
}

SIZE_JITTER = (0.9, 1.1)
OFFSET_JITTER = 0.04
POINT_NOISE = 0.01


def synth_category_info(category: str) -> CategoryInfo:
    parts = TEMPLATES[category]
    return CategoryInfo(category, len(parts), tuple(p.name for p in parts))


def _sample_volume(shape: str, count: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "box":
        return rng.uniform(-1.0, 1.0, size=(count, 3))
    # uniform in the unit ball: random direction, radius ~ u^(1/3)
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.random((count, 1)) ** (1.0 / 3.0)


def synth_generate(category: str, n_scenes: int, points_per_scene: int, seed: int,
                   id_prefix: str | None = None) -> list[Scene]:
    """Procedural scenes: one component per part, points spread as evenly as
    possible over the parts, Gaussian jitter on every point."""
    if category not in TEMPLATES:
        raise ConfigError(f"unknown category {category!r}")
    parts = TEMPLATES[category]
    n_parts = len(parts)
    if points_per_scene < 4 * n_parts:
        raise CapacityError(f"{category} needs at least {4 * n_parts} points per scene, "
                            f"got {points_per_scene}")
    rng = np.random.default_rng(seed)
    base, extra = divmod(points_per_scene, n_parts)
    counts = [base + (1 if i < extra else 0) for i in range(n_parts)]
    prefix = id_prefix if id_prefix is not None else category
    scenes = []
    for s in range(n_scenes):
        comp_of_part = rng.permutation(n_parts)
        pts, comps, labels = [], [], []
        for label, (part, count) in enumerate(zip(parts, counts)):
            half = np.array(part.half_size) * rng.uniform(*SIZE_JITTER, size=3)
            center = np.array(part.center) + rng.uniform(-OFFSET_JITTER, OFFSET_JITTER, size=3)
            local = _sample_volume(part.shape, count, rng)
            pts.append(center + local * half + rng.normal(scale=POINT_NOISE, size=(count, 3)))
            comps.append(np.full(count, comp_of_part[label]))
            labels.append(np.full(count, label))
        order = rng.permutation(points_per_scene)
        scenes.append(Scene(f"{prefix}_{s:04d}", category, np.vstack(pts)[order],
                            np.concatenate(comps)[order], np.concatenate(labels)[order]))
    return scenes


def write_synthetic_dataset(root, category: str, n_train: int, points_per_scene: int,
                            seed: int, n_dev: int = 5, n_test: int = 5) -> dict[str, Path]:
    """Generate train/dev/test splits for one category under ``root``.

    Each split draws from an independent child seed; test scenes are written
    without labels.
    """
    root = Path(root)
    seeds = np.random.SeedSequence(seed).spawn(3)
    sizes = {"train": n_train, "dev": n_dev, "test": n_test}
    paths = {}
    for (name, n), ss in zip(sizes.items(), seeds):
        scenes = synth_generate(category, n, points_per_scene, int(ss.generate_state(1)[0]),
                                id_prefix=f"{category}_{name}")
        if name == "test":
            for sc in scenes:
                sc.labels = None
        paths[name] = root / category / f"{name}.jsonl"
        emit_scenes(scenes, paths[name])
    write_categories(root, [synth_category_info(category)])
    return paths
