"""
Dice and average surface distance, per class and averaged over a dataset.

Boundaries are 4-connected foreground borders with the image edge counted as
background; distances run between pixel centres scaled by the (row, col)
spacing in millimetres.
"""
import csv
import json
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

_CROSS = ndimage.generate_binary_structure(2, 1)


class MetricsError(ValueError):
    pass


def _check_pair(pred: np.ndarray, truth: np.ndarray):
    if pred.shape != truth.shape:
        raise MetricsError(f"prediction {pred.shape} and ground truth {truth.shape} differ")


def dice_score(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_pair(pred, truth)
    p = pred == class_id
    t = truth == class_id
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~interior


def extract_boundary(mask: np.ndarray) -> set:
    return {(int(r), int(c)) for r, c in np.argwhere(boundary_mask(mask))}


def _mean_nearest_brute(src: np.ndarray, dst: np.ndarray, spacing: Tuple[float, float]) -> float:
    scale = np.asarray(spacing, dtype=np.float64)
    distances = cdist(src * scale, dst * scale)
    return float(distances.min(axis=1).mean())


def _mean_nearest_edt(src: np.ndarray, dst_mask: np.ndarray, spacing: Tuple[float, float]) -> float:
    # nearest boundary pixel via the distance transform, distance recomputed like the brute-force path
    _, (rows, cols) = ndimage.distance_transform_edt(~dst_mask, sampling=spacing, return_indices=True)
    nearest = np.stack([rows[src[:, 0], src[:, 1]], cols[src[:, 0], src[:, 1]]], axis=1)
    scale = np.asarray(spacing, dtype=np.float64)
    delta = (src - nearest) * scale
    return float(np.sqrt((delta * delta).sum(axis=1)).mean())


def asd(pred: np.ndarray, truth: np.ndarray, class_id: int, spacing_mm: Tuple[float, float] = (1.0, 1.0),
        fast: bool = False) -> Optional[float]:
    """
    Symmetric average surface distance in mm.

    Returns 0.0 when both boundaries are empty and None when exactly one is;
    callers substitute the image diagonal for None (see `sentinel_distance`).
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_pair(pred, truth)
    if min(spacing_mm) <= 0:
        raise MetricsError(f"spacing must be positive, got {spacing_mm}")
    pred_border = boundary_mask(pred == class_id)
    truth_border = boundary_mask(truth == class_id)
    pred_points = np.argwhere(pred_border)
    truth_points = np.argwhere(truth_border)
    if len(pred_points) == 0 and len(truth_points) == 0:
        return 0.0
    if len(pred_points) == 0 or len(truth_points) == 0:
        return None
    if fast:
        forward = _mean_nearest_edt(pred_points, truth_border, spacing_mm)
        backward = _mean_nearest_edt(truth_points, pred_border, spacing_mm)
    else:
        forward = _mean_nearest_brute(pred_points, truth_points, spacing_mm)
        backward = _mean_nearest_brute(truth_points, pred_points, spacing_mm)
    return 0.5 * (forward + backward)


def sentinel_distance(shape: Tuple[int, int], spacing_mm: Tuple[float, float]) -> float:
    return math.hypot(shape[0] * spacing_mm[0], shape[1] * spacing_mm[1])


@dataclass
class MetricsReport:
    classes: List[str]
    dice: List[float]
    asd_mm: List[float]
    n_samples: int
    sentinel_count: int = 0

    @property
    def foreground(self) -> range:
        return range(1, len(self.classes)) if len(self.classes) > 1 else range(len(self.classes))

    @property
    def average_dice(self) -> float:
        values = [self.dice[c] for c in self.foreground if math.isfinite(self.dice[c])]
        return float(np.mean(values)) if values else float("nan")

    @property
    def average_asd(self) -> float:
        values = [self.asd_mm[c] for c in self.foreground if math.isfinite(self.asd_mm[c])]
        return float(np.mean(values)) if values else float("nan")

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "per_class": {"dice": self.dice, "asd_mm": self.asd_mm},
            "average": {"dice": self.average_dice, "asd_mm": self.average_asd},
            "n_samples": self.n_samples,
            "sentinel_count": self.sentinel_count,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        return cls(payload["classes"], payload["per_class"]["dice"], payload["per_class"]["asd_mm"],
                   payload["n_samples"], payload.get("sentinel_count", 0))

    def format_row(self, label: str) -> str:
        """Dice in percent and ASD in mm, one decimal each."""
        return f"{label} {100 * self.average_dice:.1f} {self.average_asd:.1f}"

    def format_table(self, label: str) -> str:
        names = [self.classes[c] for c in self.foreground]
        header = " | ".join(["Method"] + names + ["Average Dice", "Average ASD"])
        cells = [f"{100 * self.dice[c]:.1f}" for c in self.foreground]
        row = " | ".join([label] + cells + [f"{100 * self.average_dice:.1f}", f"{self.average_asd:.1f}"])
        return f"{header}\n{row}"


def is_better(a: MetricsReport, b: MetricsReport) -> bool:
    """Higher Dice wins; equal Dice falls back to lower ASD."""
    if a.average_dice != b.average_dice:
        return a.average_dice > b.average_dice
    return a.average_asd < b.average_asd


def evaluate_dataset(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                     spacings: Sequence[Tuple[float, float]], num_classes: Optional[int] = None,
                     class_names: Optional[List[str]] = None, fast: bool = False) -> MetricsReport:
    if not preds:
        raise MetricsError("cannot evaluate an empty dataset")
    if not len(preds) == len(truths) == len(spacings):
        raise MetricsError(f"got {len(preds)} predictions, {len(truths)} labels and {len(spacings)} spacings")
    if num_classes is None:
        num_classes = int(max(int(np.max(t)) for t in truths)) + 1
    if class_names is None:
        class_names = ["background"] + [f"structure_{c}" for c in range(1, num_classes)]
    if len(class_names) != num_classes:
        raise MetricsError(f"{len(class_names)} class names for {num_classes} classes")

    dice = np.zeros((len(preds), num_classes))
    distances = np.zeros((len(preds), num_classes))
    sentinels = 0
    for i, (pred, truth, spacing) in enumerate(zip(preds, truths, spacings)):
        for c in range(num_classes):
            dice[i, c] = dice_score(pred, truth, c)
            value = asd(pred, truth, c, spacing, fast=fast)
            if value is None:
                value = sentinel_distance(np.shape(truth), spacing)
                sentinels += 1
            distances[i, c] = value
    if sentinels:
        logger.warning("%d class/sample pairs had exactly one empty boundary; scored with the image diagonal", sentinels)
    return MetricsReport(class_names, dice.mean(axis=0).tolist(), distances.mean(axis=0).tolist(), len(preds), sentinels)


def write_report(report: MetricsReport, out_dir) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "metrics.json"
    with open(json_path, "w", encoding="utf-8") as file:
        json.dump(report.to_dict(), file, indent=2)
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["class", "dice", "asd_mm"])
        for name, d, a in zip(report.classes, report.dice, report.asd_mm):
            writer.writerow([name, f"{d:.6f}", f"{a:.6f}"])
        writer.writerow(["average", f"{report.average_dice:.6f}", f"{report.average_asd:.6f}"])
    return json_path, csv_path
