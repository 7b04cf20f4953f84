"""Patient-level and image-level classification metrics, aggregated over folds."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

CLASS_NAMES = ("benign", "malignant")
POSITIVE = "malignant"
METRIC_NAMES = ("accuracy_patient", "accuracy_image", "sensitivity", "specificity",
                "sensitivity_patient", "specificity_patient")


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    patient_id: str
    true_class: str
    predicted_class: str
    probability: float

    def __post_init__(self):
        for c in (self.true_class, self.predicted_class):
            if c not in CLASS_NAMES:
                raise ValueError(f"unknown class {c!r}")
        if not 0.0 < self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside (0, 1]")

    @property
    def correct(self) -> bool:
        return self.true_class == self.predicted_class


def _require(predictions):
    predictions = list(predictions)
    if not predictions:
        raise ValueError("empty prediction set")
    return predictions


def patient_scores(predictions: Iterable[PredictionRecord]) -> dict[str, float]:
    """Fraction of correctly classified images for each patient."""
    hits: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for p in _require(predictions):
        h = hits[p.patient_id]
        h[0] += p.correct
        h[1] += 1
    return {pid: c / n for pid, (c, n) in sorted(hits.items())}


def patient_level_accuracy(predictions: Iterable[PredictionRecord]) -> tuple[dict[str, float], float]:
    """Per-patient scores and their unweighted mean over patients."""
    scores = patient_scores(predictions)
    return scores, math.fsum(scores.values()) / len(scores)


def image_accuracy(predictions: Iterable[PredictionRecord]) -> float:
    predictions = _require(predictions)
    return sum(p.correct for p in predictions) / len(predictions)


def confusion(predictions: Iterable[PredictionRecord]) -> dict[str, int]:
    c = {"tp": 0, "fn": 0, "tn": 0, "fp": 0}
    for p in predictions:
        actual = p.true_class == POSITIVE
        said = p.predicted_class == POSITIVE
        c[("t" if actual == said else "f") + ("p" if said else "n")] += 1
    return c


def _ratio(num: int, den: int) -> Optional[float]:
    # None marks an undefined rate (class absent), never a silent zero
    return num / den if den else None


def sensitivity_specificity(predictions: Iterable[PredictionRecord]) -> tuple[Optional[float], Optional[float]]:
    """Pooled image-level rates with malignant as the positive class."""
    c = confusion(_require(predictions))
    return _ratio(c["tp"], c["tp"] + c["fn"]), _ratio(c["tn"], c["tn"] + c["fp"])


def patient_sensitivity_specificity(predictions) -> tuple[Optional[float], Optional[float]]:
    """Mean per-patient score over malignant patients, and over benign patients."""
    predictions = _require(predictions)
    scores = patient_scores(predictions)
    label = {p.patient_id: p.true_class for p in predictions}
    pos = [s for pid, s in scores.items() if label[pid] == POSITIVE]
    neg = [s for pid, s in scores.items() if label[pid] != POSITIVE]
    return (math.fsum(pos) / len(pos) if pos else None,
            math.fsum(neg) / len(neg) if neg else None)


def fold_metrics(predictions: Sequence[PredictionRecord]) -> dict[str, Optional[float]]:
    _, acc_p = patient_level_accuracy(predictions)
    sens, spec = sensitivity_specificity(predictions)
    sens_p, spec_p = patient_sensitivity_specificity(predictions)
    return {"accuracy_patient": acc_p, "accuracy_image": image_accuracy(predictions),
            "sensitivity": sens, "specificity": spec,
            "sensitivity_patient": sens_p, "specificity_patient": spec_p}


@dataclass
class MetricsReport:
    model: str
    aug_factor: int
    folds: list[dict[str, Optional[float]]]
    mean: dict[str, Optional[float]] = field(default_factory=dict)
    sd: dict[str, Optional[float]] = field(default_factory=dict)

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_folds"] = self.n_folds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["model"], int(d["aug_factor"]), list(d["folds"]), dict(d.get("mean", {})),
                   dict(d.get("sd", {})))


def aggregate_folds(folds: Sequence[dict[str, Optional[float]]], model: str = "",
                    aug_factor: int = 1) -> MetricsReport:
    """Mean and sample (n-1) standard deviation of every metric across folds."""
    if len(folds) < 2:
        raise ValueError("need at least two folds to aggregate")
    keys = list(folds[0])
    if any(set(f) != set(keys) for f in folds):
        raise ValueError("folds report different metric sets")
    mean, sd = {}, {}
    for k in keys:
        vals = [f[k] for f in folds]
        if any(v is None for v in vals):
            mean[k] = sd[k] = None
            continue
        arr = np.asarray(vals, dtype=float)
        mean[k] = float(arr.mean())
        sd[k] = float(arr.std(ddof=1))
    return MetricsReport(model, aug_factor, [dict(f) for f in folds], mean, sd)


def write_predictions_csv(path, predictions: Iterable[PredictionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "patient_id", "true_class", "predicted_class", "probability"])
        for p in predictions:
            w.writerow([p.image_id, p.patient_id, p.true_class, p.predicted_class, repr(p.probability)])


def read_predictions_csv(path) -> list[PredictionRecord]:
    with open(path, newline="") as fh:
        return [PredictionRecord(r["image_id"], r["patient_id"], r["true_class"],
                                 r["predicted_class"], float(r["probability"]))
                for r in csv.DictReader(fh)]
