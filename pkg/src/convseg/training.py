"""Per-category training sessions, checkpoints and training history."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor_core as tc
from .dataset import DatasetSplit, load_categories, load_split, resample_scene, make_batches
from .errors import (ConfigError, DimensionError, DivergenceError, InstabilityError,
                     IntegrityError, ParseError, UpgradeError, CategoryMismatchError)
from .model import (CATEGORIES, CategoryConfig, ModelParams, check_params, forward_with_cache,
                    model_backward, model_init)
from .optimizers import SGDR, AdamState, Schedule, StepDecay, adam_step, lr_schedule, schedule_from_dict

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

BASE_LR = 0.001
EPOCHS = 250
SCENES_PER_BATCH = 2


@dataclass(frozen=True)
class TrainConfig:
    model: CategoryConfig
    epochs: int = EPOCHS
    base_lr: float = BASE_LR
    schedule: Schedule = field(default_factory=lambda: SGDR(t0=EPOCHS))
    scenes_per_batch: int = SCENES_PER_BATCH
    points_per_scene: int = 256
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.scenes_per_batch < 1:
            raise ConfigError("scenes_per_batch must be >= 1")

    @property
    def category(self) -> str:
        return self.model.category

    def to_dict(self) -> dict:
        return {"category": self.model.category, "epochs": self.epochs, "base_lr": self.base_lr,
                "schedule": self.schedule.to_dict(), "scenes_per_batch": self.scenes_per_batch,
                "points_per_scene": self.points_per_scene, "seed": self.seed,
                "optimizer": self.optimizer, "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping, num_parts: int | None = None) -> "TrainConfig":
        """Build from a JSON mapping; missing keys fall back to defaults.

        ``num_parts`` (normally from ``categories.json``) fills the model's
        part count when the mapping does not give one.
        """
        d = dict(d)
        model = dict(d.pop("model", {}))
        category = d.pop("category", model.get("category"))
        if category is None:
            raise ConfigError("train config needs a category")
        model["category"] = category
        if num_parts is not None:
            model["num_parts"] = num_parts
        if "num_parts" not in model:
            raise ConfigError(f"no part count known for {category!r}")
        kwargs = {}
        for key in ("epochs", "scenes_per_batch", "points_per_scene", "seed"):
            if key in d:
                kwargs[key] = int(d.pop(key))
        if "base_lr" in d:
            kwargs["base_lr"] = float(d.pop("base_lr"))
        if "optimizer" in d:
            kwargs["optimizer"] = d.pop("optimizer")
        sched = d.pop("schedule", None)
        if sched is not None:
            kwargs["schedule"] = schedule_from_dict(sched)
        elif "epochs" in kwargs:
            kwargs["schedule"] = SGDR(t0=kwargs["epochs"])
        d.pop("per_category", None)
        if d:
            raise ConfigError(f"unknown train config keys: {sorted(d)}")
        return cls(model=CategoryConfig.from_dict(model), **kwargs)


def default_train_config(category: str, num_parts: int, **overrides) -> TrainConfig:
    """Adam, lr 0.001, 2 scenes per batch, 250 epochs, single SGDR cycle."""
    cfg = TrainConfig(CategoryConfig(category, num_parts))
    return replace(cfg, **overrides) if overrides else cfg


def baseline_train_config(category: str, num_parts: int) -> TrainConfig:
    """The reference recipe: step decay by 0.8 every 25 epochs."""
    return TrainConfig(CategoryConfig(category, num_parts), schedule=StepDecay(0.8, 25))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def lrs(self) -> list[float]:
        return [r.lr for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "loss", "accuracy"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.lr), repr(r.loss), repr(r.accuracy)])

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["loss"]),
                                float(r["accuracy"])) for r in rows])


def _check_split(config: TrainConfig, split: DatasetSplit) -> None:
    if not split.scenes:
        raise ConfigError("training split is empty")
    for s in split.scenes:
        if s.category != config.category:
            raise CategoryMismatchError(
                f"scene {s.scene_id!r} is {s.category!r}, session trains {config.category!r}")
        if s.labels is None:
            raise IntegrityError(f"scene {s.scene_id!r} has no labels")
        if s.labels.max() >= config.model.num_parts:
            raise IntegrityError(f"scene {s.scene_id!r} has label {s.labels.max()} "
                                 f"but the model has {config.model.num_parts} parts")


def train_category(config: TrainConfig, split: DatasetSplit,
                   init: ModelParams | None = None) -> tuple[ModelParams, TrainHistory]:
    """One training session.  Fully determined by ``config.seed`` and the data."""
    _check_split(config, split)
    init_ss, data_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(3)
    mp = init.copy() if init is not None else model_init(
        config.model, int(init_ss.generate_state(1)[0]))
    data_rng = np.random.default_rng(data_ss)
    drop_rng = np.random.default_rng(drop_ss)
    params, buffers = mp.params, mp.buffers
    state = AdamState()
    lrs = lr_schedule(config.schedule, config.base_lr, config.epochs)
    history = TrainHistory()
    for epoch, lr in enumerate(lrs):
        loss_sum, n_scenes, correct, total = 0.0, 0, 0, 0
        for b, batch in enumerate(make_batches(split.scenes, config.scenes_per_batch, data_rng)):
            grads = None
            batch_loss = 0.0
            for scene in batch:
                sc = resample_scene(scene, config.points_per_scene, data_rng)
                current = ModelParams(config.model, params, buffers)
                logits, cache = forward_with_cache(sc.points, current, "train", drop_rng)
                loss, d_logits = tc.softmax_cross_entropy(logits, sc.labels)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
                g = model_backward(d_logits, cache, current)
                buffers = cache.new_buffers
                grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
                batch_loss += loss
                correct += int((logits.argmax(axis=1) == sc.labels).sum())
                total += sc.labels.size
            scale = 1.0 / len(batch)
            grads = {k: v * scale for k, v in grads.items()}
            try:
                params, state = adam_step(params, grads, state, lr)
            except InstabilityError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from None
            loss_sum += batch_loss
            n_scenes += len(batch)
        rec = EpochRecord(epoch, lr, loss_sum / n_scenes, correct / total)
        history.records.append(rec)
        log.debug("%s epoch %d lr %.3g loss %.5f acc %.4f", config.category, epoch, lr,
                  rec.loss, rec.accuracy)
    return ModelParams(config.model, params, buffers), history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack(table: Mapping[str, np.ndarray]) -> dict:
    return {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in table.items()}


def _unpack(table: Mapping, where: str) -> dict[str, np.ndarray]:
    out = {}
    for name, rec in table.items():
        try:
            arr = np.array(rec["data"], dtype=np.float64)
            out[name] = arr.reshape(rec["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IntegrityError(f"{where}: tensor {name!r} is malformed ({exc})") from None
    return out


def checkpoint_save(mp: ModelParams, path, train_config: TrainConfig | None = None) -> None:
    doc = {"format_version": CHECKPOINT_VERSION, "config": mp.config.to_dict(),
           "params": _pack(mp.params), "buffers": _pack(mp.buffers)}
    if train_config is not None:
        doc["train_config"] = train_config.to_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def checkpoint_load(path) -> tuple[ModelParams, CategoryConfig]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not a valid checkpoint ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: not a valid checkpoint")
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise UpgradeError(f"{path}: checkpoint format {version!r}, "
                           f"this build reads {CHECKPOINT_VERSION}")
    try:
        config = CategoryConfig.from_dict(doc["config"])
        mp = ModelParams(config, _unpack(doc["params"], str(path)),
                         _unpack(doc.get("buffers", {}), str(path)))
    except KeyError as exc:
        raise ParseError(f"{path}: missing {exc.args[0]!r}") from None
    except ConfigError as exc:
        raise IntegrityError(f"{path}: {exc}") from None
    try:
        check_params(mp)
    except (DimensionError, InstabilityError) as exc:
        raise IntegrityError(f"{path}: {exc}") from None
    return mp, config


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------

def checkpoint_path(out_dir, category: str) -> Path:
    return Path(out_dir) / f"{category}.ckpt.json"


def history_path(out_dir, category: str) -> Path:
    return Path(out_dir) / f"{category}.history.csv"


def run_session(config: TrainConfig, data_root, out_dir, figures: bool = True) -> Path:
    """Train one category from ``data_root`` and write its artifacts."""
    split = load_split(data_root, config.category, "train")
    mp, history = train_category(config, split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = checkpoint_path(out_dir, config.category)
    checkpoint_save(mp, ckpt, config)
    hist = history_path(out_dir, config.category)
    history.write_csv(hist)
    if figures:
        from .reports import plot_history
        plot_history(history, hist.with_suffix(".png"), title=config.category)
    return ckpt


def _session_job(args):
    config, data_root, out_dir, figures = args
    return str(run_session(config, data_root, out_dir, figures))


def train_all(configs: Mapping[str, TrainConfig], data_root, out_dir, jobs: int = 1,
              figures: bool = True) -> dict[str, Path]:
    """Run the five category sessions and return their checkpoint paths.

    Sessions share nothing, so ``jobs > 1`` gives the same files as a serial run.
    """
    missing = [c for c in CATEGORIES if c not in configs]
    if missing:
        raise ConfigError(f"missing training configs for {missing}")
    tasks = [(configs[c], str(data_root), str(out_dir), figures) for c in CATEGORIES]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            paths = list(pool.map(_session_job, tasks))
    else:
        paths = [_session_job(t) for t in tasks]
    return {c: Path(p) for c, p in zip(CATEGORIES, paths)}


def load_train_configs(config_doc: Mapping | None, data_root,
                       categories=CATEGORIES) -> dict[str, TrainConfig]:
    """Per-category configs from a shared JSON document.

    Keys under ``per_category.<name>`` override the shared ones for that
    category; ``num_parts`` always comes from ``categories.json``.
    """
    doc = dict(config_doc or {})
    per = doc.get("per_category", {})
    infos = load_categories(data_root)
    out = {}
    for cat in categories:
        if cat not in infos:
            raise ConfigError(f"{cat!r} is not listed in {Path(data_root) / 'categories.json'}")
        merged = {k: v for k, v in doc.items() if k not in ("per_category", "category")}
        over = dict(per.get(cat, {}))
        model = {**merged.get("model", {}), **over.pop("model", {})}
        merged.update(over)
        merged["model"] = model
        merged["category"] = cat
        out[cat] = TrainConfig.from_dict(merged, num_parts=infos[cat].num_parts)
    return out
