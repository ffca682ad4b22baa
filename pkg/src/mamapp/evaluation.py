"""Confusion matrices, averaged classification metrics, feature export and PCA."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Batch
from .model import MamApp
from .tensor import no_grad


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: np.ndarray
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")
        if not self.classes:
            self.classes = [str(i) for i in range(self.counts.shape[0])]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.classes])
            for name, row in zip(self.classes, self.counts):
                w.writerow([name, *row.tolist()])

    @classmethod
    def read_csv(cls, path) -> "ConfusionMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]]), classes=rows[0][1:])


def confusion(true, pred, num_classes: int, classes: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape or true.ndim != 1:
        raise ValueError(f"true and pred must be equal-length 1-D arrays, got {true.shape} and {pred.shape}")
    for name, arr in (("true", true), ("pred", pred)):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"{name}[{i}] = {int(arr[i])} is outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts, list(classes) if classes is not None else [])


@dataclass
class ClassScores:
    name: str
    precision: float
    recall: float
    f1: float
    support: int
    precision_undefined: bool = False
    recall_undefined: bool = False
    f1_undefined: bool = False


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    accuracy: float
    table_accuracy: float
    micro: dict
    macro: dict
    per_class: list[ClassScores]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "table_accuracy": self.table_accuracy,
            "micro": dict(self.micro),
            "macro": dict(self.macro),
            "per_class": [vars(c).copy() for c in self.per_class],
            "confusion": self.confusion.counts.tolist(),
            "classes": list(self.confusion.classes),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def _f1(p: float, r: float) -> tuple[float, bool]:
    return _ratio(2 * p * r, p + r)


def metrics(cm: ConfusionMatrix) -> EvalReport:
    """Accuracy, micro/macro precision, recall and F1, and per-class scores.

    ``accuracy`` is trace / total. ``table_accuracy`` is the literal
    ``sum TP / sum (TP + FP + FN)``, which counts each error twice and is kept
    only for comparison with published tables.
    """
    if cm.total == 0:
        raise ValueError("cannot compute metrics of an all-zero confusion matrix")
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    s_tp, s_fp, s_fn = int(tp.sum()), int(fp.sum()), int(fn.sum())
    micro_p = s_tp / (s_tp + s_fp)
    micro_r = s_tp / (s_tp + s_fn)
    # integer form keeps the single-label identity exact in floating point
    micro_f1 = 2 * s_tp / (2 * s_tp + s_fp + s_fn)
    per_class = []
    for i, name in enumerate(cm.classes):
        p, p_undef = _ratio(tp[i], tp[i] + fp[i])
        r, r_undef = _ratio(tp[i], tp[i] + fn[i])
        f, f_undef = _f1(p, r)
        per_class.append(ClassScores(name, float(p), float(r), float(f), int(tp[i] + fn[i]),
                                     p_undef, r_undef, f_undef))
    macro = {k: float(np.mean([getattr(c, attr) for c in per_class]))
             for k, attr in (("p", "precision"), ("r", "recall"), ("f1", "f1"))}
    return EvalReport(confusion=cm, accuracy=s_tp / cm.total,
                      table_accuracy=s_tp / (s_tp + s_fp + s_fn),
                      micro={"p": micro_p, "r": micro_r, "f1": micro_f1},
                      macro=macro, per_class=per_class)


# ------------------------------------------------------------------ features
def export_features(model: MamApp, batches: Iterable[Batch], out_path,
                    classes: Sequence[str]) -> tuple[np.ndarray, list[str], list[str]]:
    """Write ``path,class_name,f0..`` rows of pooled penultimate features.

    Returns the feature matrix with the row paths and class names.
    """
    model.eval()
    feats, paths, names = [], [], []
    with no_grad():
        for batch in batches:
            feats.append(model.features(batch.images).data.astype(np.float64))
            paths.extend(batch.paths)
            names.extend(classes[int(c)] for c in batch.labels)
    features = np.concatenate(feats) if feats else np.zeros((0, model.config.d_model))
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class_name", *[f"f{j}" for j in range(features.shape[1])]])
        for p, n, row in zip(paths, names, features):
            w.writerow([p, n, *[repr(float(v)) for v in row]])
    return features, paths, names


def read_features(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    return (np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), -1),
            [r[0] for r in body], [r[1] for r in body])


# ----------------------------------------------------------------------- PCA
@dataclass
class PCAProjection:
    components: np.ndarray        # [D, m], orthonormal columns
    eigenvalues: np.ndarray       # all D, descending, noise floor set to 0
    explained_variance_ratio: np.ndarray   # first m
    mean: np.ndarray
    coords: np.ndarray            # [M, m]

    @property
    def m(self) -> int:
        return self.components.shape[1]

    @property
    def nonzero_eigenvalues(self) -> int:
        return int((self.eigenvalues > 0).sum())

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) @ self.components


def pca(features: np.ndarray, m: int = 2) -> PCAProjection:
    """Project onto the top ``m`` eigenvectors of the sample covariance.

    Each component is sign-flipped so its largest-magnitude entry is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= m <= d:
        raise ValueError(f"m must lie in [1, {d}], got {m}")
    if n <= m:
        raise ValueError(f"need more samples than components (M={n}, m={m})")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    # rounding noise relative to the feature scale counts as zero variance
    floor = d * np.finfo(np.float64).eps * max(float(np.abs(x).max()) ** 2, np.finfo(np.float64).tiny)
    vals = np.where(vals > floor, vals, 0.0)
    vecs = vecs[:, order]
    pivots = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[pivots, np.arange(d)])
    total = vals.sum()
    ratios = vals[:m] / total if total > 0 else np.zeros(m)
    comps = vecs[:, :m]
    return PCAProjection(components=comps, eigenvalues=vals, explained_variance_ratio=ratios,
                         mean=mean, coords=xc @ comps)


def write_pca(proj: PCAProjection, paths: Sequence[str], names: Sequence[str], out_path,
              sidecar_path=None) -> None:
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class_name", *[f"pc{j + 1}" for j in range(proj.m)]])
        for p, n, row in zip(paths, names, proj.coords):
            w.writerow([p, n, *[repr(float(v)) for v in row]])
    if sidecar_path is not None:
        info = {"explained_variance_ratio": proj.explained_variance_ratio.tolist(),
                "eigenvalues": proj.eigenvalues.tolist(),
                "nonzero_eigenvalues": proj.nonzero_eigenvalues}
        Path(sidecar_path).write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
