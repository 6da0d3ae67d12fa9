"""UAR / WAR / weighted-F1 and the per-fold report format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def compute_metrics(preds, labels, n_classes: int) -> dict:
    """Percentages of UAR, WAR and support-weighted F1.

    UAR averages recall over classes that occur in ``labels``; classes with
    no support carry no weight anywhere. WAR is therefore plain accuracy.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"preds and labels must be equal-length vectors, got {preds.shape} and {labels.shape}")
    if labels.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    for name, v in (("preds", preds), ("labels", labels)):
        if v.min() < 0 or v.max() >= n_classes:
            raise ValueError(f"{name} must lie in [0, {n_classes})")

    cm = confusion_matrix(preds, labels, n_classes)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)
    present = support > 0
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=present)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)

    n = support.sum()
    return {
        "uar": 100.0 * recall[present].mean(),
        "war": 100.0 * (support * recall).sum() / n,
        "f1": 100.0 * (support * f1).sum() / n,
        "confusion": cm,
    }


@dataclass
class FoldMetrics:
    fold: int
    uar: float
    war: float
    f1: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "uar": float(self.uar),
            "war": float(self.war),
            "f1": float(self.f1),
            "confusion": self.confusion.tolist(),
        }


@dataclass
class MetricsReport:
    dataset: str
    model_config_hash: str
    checkpoint_kind: str  # "BT" or "FINAL"
    folds: list = field(default_factory=list)
    tag: str = ""

    @property
    def mean(self) -> dict:
        if not self.folds:
            return {"uar": float("nan"), "war": float("nan"), "f1": float("nan")}
        return {k: float(np.mean([getattr(f, k) for f in self.folds])) for k in ("uar", "war", "f1")}

    def add(self, fold: int, preds, labels, n_classes: int) -> FoldMetrics:
        m = compute_metrics(preds, labels, n_classes)
        fm = FoldMetrics(fold, m["uar"], m["war"], m["f1"], m["confusion"])
        self.folds.append(fm)
        return fm

    def to_dict(self) -> dict:
        d = {
            "dataset": self.dataset,
            "model_config_hash": self.model_config_hash,
            "checkpoint_kind": self.checkpoint_kind,
            "folds": [f.to_dict() for f in self.folds],
            "mean": self.mean,
        }
        if self.tag:
            d["tag"] = self.tag
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        folds = [
            FoldMetrics(f["fold"], f["uar"], f["war"], f["f1"], np.asarray(f["confusion"], dtype=np.int64))
            for f in d["folds"]
        ]
        return cls(d["dataset"], d["model_config_hash"], d["checkpoint_kind"], folds, d.get("tag", ""))

    def csv_line(self) -> str:
        m = self.mean
        return f"{self.dataset},{self.tag or 'TBDM-Net'},{self.checkpoint_kind},{m['uar']:.2f},{m['war']:.2f},{m['f1']:.2f},{self.model_config_hash}"


CSV_HEADER = "dataset,system,checkpoint,uar,war,f1,config_hash"


def format_table(reports: list[MetricsReport]) -> str:
    """Mean UAR/WAR/F1 as a small fixed-width table, one row per report."""
    lines = [f"{'Dataset':<10} {'Model':<32} {'UAR':>6} {'WAR':>6} {'F1':>6}"]
    for r in reports:
        m = r.mean
        kind = "BT" if r.checkpoint_kind == "BT" else "300" if r.checkpoint_kind == "FINAL" else r.checkpoint_kind
        name = f"{r.tag}::{kind}" if r.tag else f"TBDM-Net::{kind}"
        lines.append(f"{r.dataset:<10} {name:<32} {m['uar']:6.2f} {m['war']:6.2f} {m['f1']:6.2f}")
    return "\n".join(lines)
