"""Accuracy / IoU metrics, model evaluation and submission files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Scene
from .errors import ConfigError, ConflictError, DimensionError, LabelError, ParseError
from .model import CATEGORIES, ModelParams, component_aggregate, model_forward

SUBMISSION_HEADER = ("scene_id", "component_id", "label")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise DimensionError(f"{pred.size} predictions vs {gt.size} ground-truth labels")
    if pred.size == 0:
        raise DimensionError("metrics need at least one sample")
    return pred, gt


def accuracy(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float((pred == gt).sum() / pred.size)


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    pred, gt = _pair(pred, gt)
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if bad.size:
            raise LabelError(f"{name} label {arr[bad[0]]} at index {bad[0]} "
                             f"outside [0, {num_classes})")
    flat = np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray, include_absent: bool = False):
    """Per-class IoU (NaN for classes absent from both sides) and the mean.

    Absent classes are left out of the mean unless ``include_absent`` is
    set, in which case they count as 1.
    """
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    per_class = np.full(conf.shape[0], np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    if include_absent:
        mean = float(np.where(present, per_class, 1.0).mean())
    else:
        mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean


def iou(pred, gt, num_classes: int, include_absent: bool = False):
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes), include_absent)


@dataclass
class MetricsReport:
    point_accuracy: float
    component_accuracy: float
    per_class_iou: dict[int, float]
    mean_iou: float
    counts: np.ndarray
    component_counts: np.ndarray
    component_mean_iou: float

    def to_dict(self) -> dict:
        return {
            "point_accuracy": self.point_accuracy,
            "component_accuracy": self.component_accuracy,
            "mean_iou": self.mean_iou,
            "per_class_iou": {str(c): (None if np.isnan(v) else v)
                              for c, v in self.per_class_iou.items()},
            "component_mean_iou": self.component_mean_iou,
            "confusion": self.counts.tolist(),
            "component_confusion": self.component_counts.tolist(),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def report_from_labels(point_pred, point_gt, comp_pred, comp_gt, num_classes: int,
                       include_absent: bool = False) -> MetricsReport:
    conf = confusion_matrix(point_pred, point_gt, num_classes)
    comp_conf = confusion_matrix(comp_pred, comp_gt, num_classes)
    per_class, mean = iou_from_confusion(conf, include_absent)
    _, comp_mean = iou_from_confusion(comp_conf, include_absent)
    return MetricsReport(
        point_accuracy=float(np.trace(conf) / conf.sum()),
        component_accuracy=float(np.trace(comp_conf) / comp_conf.sum()),
        per_class_iou={c: float(v) for c, v in enumerate(per_class)},
        mean_iou=mean, counts=conf, component_counts=comp_conf,
        component_mean_iou=comp_mean)


def predict_scene(mp: ModelParams, scene: Scene) -> dict[int, int]:
    """Component id -> predicted part label for one scene (eval mode)."""
    mp.check_category(scene.category)
    logits = model_forward(scene.points, mp, "eval")
    return component_aggregate(logits, scene.component_ids, mp.config.component_vote)


def evaluate_model(mp: ModelParams, scenes: Sequence[Scene],
                   include_absent: bool = False) -> MetricsReport:
    """Point and component metrics pooled over all scenes.

    Point predictions broadcast each component's label to its points.
    """
    if not scenes:
        raise ConfigError("no scenes to evaluate")
    pp, pg, cp, cg = [], [], [], []
    for scene in scenes:
        if scene.labels is None:
            raise LabelError(f"scene {scene.scene_id!r} has no ground-truth labels")
        labels = predict_scene(mp, scene)
        truth = scene.component_label_map()
        pp.append(np.array([labels[int(c)] for c in scene.component_ids]))
        pg.append(scene.labels)
        comps = sorted(truth)
        cp.append(np.array([labels[c] for c in comps]))
        cg.append(np.array([truth[c] for c in comps]))
    return report_from_labels(np.concatenate(pp), np.concatenate(pg), np.concatenate(cp),
                              np.concatenate(cg), mp.config.num_parts, include_absent)


# ---------------------------------------------------------------------------
# submission files
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class SubmissionRecord:
    scene_id: str
    component_id: int
    predicted_label: int


def predict_records(mp: ModelParams, scenes: Iterable[Scene]) -> list[SubmissionRecord]:
    out = []
    for scene in scenes:
        for comp, lab in predict_scene(mp, scene).items():
            out.append(SubmissionRecord(scene.scene_id, comp, lab))
    return out


def _check_unique(records: Iterable[SubmissionRecord], sources=None) -> list[SubmissionRecord]:
    seen: dict[tuple[str, int], str] = {}
    out = []
    for i, rec in enumerate(records):
        key = (rec.scene_id, rec.component_id)
        src = sources[i] if sources else "input"
        if key in seen:
            raise ConflictError(f"duplicate submission key scene_id={key[0]!r} "
                                f"component_id={key[1]} ({seen[key]} and {src})")
        seen[key] = src
        out.append(rec)
    return sorted(out)


def _render(records: Sequence[SubmissionRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUBMISSION_HEADER)
    for r in records:
        w.writerow([r.scene_id, r.component_id, r.predicted_label])
    return buf.getvalue()


def emit_submission(records: Iterable[SubmissionRecord], path) -> None:
    records = _check_unique(list(records))
    Path(path).write_bytes(_render(records).encode("utf-8"))


def parse_submission(path) -> list[SubmissionRecord]:
    text = Path(path).read_bytes().decode("utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != SUBMISSION_HEADER:
        raise ParseError(f"{path}: header must be {','.join(SUBMISSION_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        try:
            out.append(SubmissionRecord(row[0], int(row[1]), int(row[2])))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer component or label") from None
    return out


def merge_submissions(paths: Sequence, out_path, expected: int = len(CATEGORIES)) -> int:
    """Concatenate per-category submissions into one sorted file.

    Returns the number of rows written.
    """
    if expected and len(paths) != expected:
        raise ConfigError(f"merge needs {expected} submission files, got {len(paths)}")
    records, sources = [], []
    for p in paths:
        recs = parse_submission(p)
        records += recs
        sources += [str(p)] * len(recs)
    merged = _check_unique(records, sources)
    Path(out_path).write_bytes(_render(merged).encode("utf-8"))
    return len(merged)
