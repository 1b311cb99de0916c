"""Classification accuracy and retrieval mAP."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: dict[str, float]
    mean_class_accuracy: float
    retrieval_map: float | None = None
    train_loss_curve: list[float] = field(default_factory=list)
    val_loss_curve: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def per_class_table(self) -> str:
        """Two-row text table: class names then accuracies, plus a mean column."""
        names = list(self.per_class_accuracy) + ["Mean"]
        values = [f"{100 * v:.1f}" for v in self.per_class_accuracy.values()]
        values.append(f"{100 * self.mean_class_accuracy:.1f}")
        widths = [max(len(a), len(b)) for a, b in zip(names, values)]
        row = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
        return row(names) + "\n" + row(values)


def classification_metrics(labels: np.ndarray, preds: np.ndarray, class_names: Sequence) -> Metrics:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    if labels.size == 0:
        raise ValueError("empty label set")
    per_class = {}
    for i, name in enumerate(class_names):
        mask = labels == i
        if mask.any():
            per_class[str(name)] = float((preds[mask] == i).mean())
    acc = float((preds == labels).mean())
    mean_cls = float(np.mean(list(per_class.values())))
    return Metrics(acc, per_class, mean_cls)


def average_precision(relevant_in_rank_order: Sequence[bool]) -> float:
    """Mean of precision@r taken at each relevant rank r."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    if not rel.any():
        raise ValueError("no relevant items")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float((hits[rel] / ranks[rel]).mean())


def retrieval_map(features, labels: Sequence[int]) -> float:
    """Leave-one-out retrieval mAP under cosine similarity.

    Every item queries all others; same-label items are relevant. Equal
    similarities rank by gallery index. Queries with no relevant item are
    skipped.
    """
    f = np.asarray(getattr(features, "data", features), dtype=np.float64)
    labels = np.asarray(labels)
    q = f.shape[0]
    if q < 2 or labels.shape != (q,):
        raise ValueError("need at least two items with one label each")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    fn = f / np.where(norms > 0, norms, 1.0)
    sim = fn @ fn.T
    aps = []
    idx = np.arange(q)
    for i in range(q):
        others = idx[idx != i]
        # lexsort: last key is primary.
        order = others[np.lexsort((others, -sim[i, others]))]
        rel = labels[order] == labels[i]
        if rel.any():
            aps.append(average_precision(rel))
    if not aps:
        raise ValueError("no query has a relevant item")
    return float(np.mean(aps))
