"""Evaluation metrics: weighted F1, confusion matrices, confidence bins, seed averaging."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], k: int) -> np.ndarray:
    """``k x k`` counts, rows indexed by true label, columns by prediction."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if preds.size and (min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= k):
        raise ValueError(f"class id outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(float)
    denom = 2 * tp + (cm.sum(axis=0) - tp) + (cm.sum(axis=1) - tp)
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def weighted_f1(preds: Sequence[int], labels: Sequence[int], k: int) -> float:
    """Support-weighted mean of per-class F1; a class with no predictions and no support scores 0."""
    if len(labels) == 0:
        raise ValueError("weighted_f1 of an empty sample")
    cm = confusion_matrix(preds, labels, k)
    support = cm.sum(axis=1)
    return float((per_class_f1(cm) * support).sum() / support.sum())


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    per_class_f1: dict[str, float]
    support: dict[str, int]
    confusion: list[list[int]]

    @classmethod
    def compute(cls, preds: Sequence[int], labels: Sequence[int], label_names: Sequence[str]) -> "MetricsReport":
        k = len(label_names)
        if len(labels) == 0:
            raise ValueError("cannot report on an empty sample")
        cm = confusion_matrix(preds, labels, k)
        f1 = per_class_f1(cm)
        support = cm.sum(axis=1)
        return cls(
            accuracy=float(np.trace(cm) / cm.sum()),
            weighted_f1=float((f1 * support).sum() / support.sum()),
            per_class_f1={name: float(f1[i]) for i, name in enumerate(label_names)},
            support={name: int(support[i]) for i, name in enumerate(label_names)},
            confusion=cm.tolist(),
        )

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class_f1": self.per_class_f1,
            "support": self.support,
            "confusion": self.confusion,
        }


@dataclass
class BinReport:
    edges: list[float]
    counts: list[int]
    wf1_visual: list[float | None]
    wf1_full: list[float | None]
    gain: list[float | None]
    corrupted_fraction: list[float | None] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "edges": self.edges,
            "bins": [
                {"lo": self.edges[j], "hi": self.edges[j + 1], "count": self.counts[j],
                 "wf1_visual": self.wf1_visual[j], "wf1_full": self.wf1_full[j], "gain": self.gain[j],
                 **({"corrupted_fraction": self.corrupted_fraction[j]} if self.corrupted_fraction else {})}
                for j in range(len(self.counts))
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "count", "wf1_visual", "wf1_full", "gain"])
        for j, count in enumerate(self.counts):
            writer.writerow([self.edges[j], self.edges[j + 1], count,
                             *("" if v is None else repr(v) for v in
                               (self.wf1_visual[j], self.wf1_full[j], self.gain[j]))])
        return buf.getvalue()

    def pooled_gain(self, lo: float, hi: float) -> float | None:
        """Count-weighted mean gain over bins lying inside ``[lo, hi]``."""
        num = den = 0.0
        for j, count in enumerate(self.counts):
            if self.edges[j] >= lo - 1e-12 and self.edges[j + 1] <= hi + 1e-12 and count:
                num += count * self.gain[j]
                den += count
        return num / den if den else None


def validate_edges(edges: Sequence[float]) -> list[float]:
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing")
    if edges[0] != 0.0 or edges[-1] != 1.0:
        raise ValueError("bin edges must span [0, 1]")
    return edges


def assign_bins(conf: Sequence[float], edges: Sequence[float]) -> np.ndarray:
    """Bin index of each confidence: ``[lo, hi)``, with the last bin closed at 1."""
    edges = np.asarray(validate_edges(edges))
    conf = np.asarray(conf, dtype=float)
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidence outside [0, 1]")
    return np.minimum(np.searchsorted(edges, conf, side="right") - 1, len(edges) - 2)


def bin_by_confidence(conf: Sequence[float], visual_preds: Sequence[int], full_preds: Sequence[int],
                      labels: Sequence[int], k: int, edges: Sequence[float] = DEFAULT_EDGES,
                      corrupted: Sequence[bool] | None = None) -> BinReport:
    edges = validate_edges(edges)
    idx = assign_bins(conf, edges)
    visual_preds, full_preds, labels = map(np.asarray, (visual_preds, full_preds, labels))
    counts, wv, wf, gain, frac = [], [], [], [], []
    for j in range(len(edges) - 1):
        sel = idx == j
        counts.append(int(sel.sum()))
        if sel.any():
            a = weighted_f1(visual_preds[sel], labels[sel], k)
            b = weighted_f1(full_preds[sel], labels[sel], k)
            wv.append(a)
            wf.append(b)
            gain.append(b - a)
            if corrupted is not None:
                frac.append(float(np.asarray(corrupted)[sel].mean()))
        else:
            wv.append(None)
            wf.append(None)
            gain.append(None)
            if corrupted is not None:
                frac.append(None)
    return BinReport(edges, counts, wv, wf, gain, frac)


def bin_traces(traces: Iterable, k: int, edges: Sequence[float] = DEFAULT_EDGES) -> BinReport:
    """Bin GateTrace-like rows (``c``, ``aux_prediction``, ``prediction``, ``label``)."""
    rows = [t for t in traces if t.label is not None]
    corrupted = [bool(t.corrupted) for t in rows] if rows and all(t.corrupted is not None for t in rows) else None
    return bin_by_confidence([t.c for t in rows], [t.aux_prediction for t in rows],
                             [t.prediction for t in rows], [t.label for t in rows], k, edges, corrupted)


@dataclass
class SeedAggregate:
    seeds: list[int]
    metrics: dict[str, dict[str, float]]

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "metrics": self.metrics}


def _flatten(report: MetricsReport) -> dict[str, float]:
    out = {"accuracy": report.accuracy, "weighted_f1": report.weighted_f1}
    out.update({f"f1/{name}": v for name, v in report.per_class_f1.items()})
    return out


def seed_average(runs: Sequence[tuple[Mapping, MetricsReport]]) -> SeedAggregate:
    """Mean and sample standard deviation of every metric across seeds.

    ``runs`` pairs a config mapping (which must differ only in ``seed``) with its report.
    """
    if len(runs) < 2:
        raise ValueError("seed averaging needs at least two runs")
    base = {k: v for k, v in runs[0][0].items() if k != "seed"}
    for cfg, _ in runs[1:]:
        other = {k: v for k, v in cfg.items() if k != "seed"}
        if other != base:
            diff = sorted(k for k in set(base) | set(other) if base.get(k) != other.get(k))
            raise ValueError(f"runs differ in more than the seed: {diff}")
    flat = [_flatten(rep) for _, rep in runs]
    metrics = {}
    for name in flat[0]:
        values = [f[name] for f in flat]
        mean = math.fsum(values) / len(values)
        var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
        metrics[name] = {"mean": mean, "std": math.sqrt(var), "values": values}
    return SeedAggregate([int(cfg.get("seed", 0)) for cfg, _ in runs], metrics)
