"""Embedding-level evaluation: two-way identification, top-k retrieval, cosine stats."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field

import numpy as np


def _unit_rows(a):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    n = np.linalg.norm(a, axis=1, keepdims=True)
    return np.divide(a, n, out=np.zeros_like(a), where=n > 0)


def cosine_matrix(pred, targets):
    return _unit_rows(pred) @ _unit_rows(targets).T


def two_way_identification(pred, targets) -> float:
    """Fraction of (item, distractor) comparisons where the true target is closer.

    Exhaustive over all ordered pairs; ties count as half a win.
    """
    C = cosine_matrix(pred, targets)
    n = C.shape[0]
    if C.shape != (n, n) or n < 2:
        raise ValueError("two-way identification needs matching lists of >= 2 items")
    diag = np.diag(C)[:, None]
    wins = (diag > C).astype(float) + 0.5 * (diag == C)
    np.fill_diagonal(wins, 0.0)
    return float(wins.sum() / (n * (n - 1)))


def per_item_two_way(pred, targets):
    C = cosine_matrix(pred, targets)
    n = C.shape[0]
    diag = np.diag(C)[:, None]
    wins = (diag > C).astype(float) + 0.5 * (diag == C)
    np.fill_diagonal(wins, 0.0)
    return wins.sum(axis=1) / (n - 1)


def retrieval_ranks(pred, gallery):
    """Rank (0 = best) of each item's own gallery entry; ties go to the lower index."""
    C = cosine_matrix(pred, gallery)
    order = np.argsort(-C, axis=1, kind="stable")
    return np.array([int(np.flatnonzero(order[i] == i)[0]) for i in range(C.shape[0])])


def topk_retrieval(pred, gallery_targets, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(np.mean(retrieval_ranks(pred, gallery_targets) < k))


def reconstruct_by_retrieval(pred, stimulus_set) -> str:
    """Id of the stimulus whose embedding is most cosine-similar to ``pred``."""
    C = cosine_matrix(pred, stimulus_set.embeddings)[0]
    return stimulus_set.stimuli[int(np.argmax(C))].stimulus_id


@dataclass
class EvalReport:
    two_way_accuracy: float
    topk: dict
    mean_cosine: float
    n_test: int
    per_class: dict = field(default_factory=dict)
    retrieval_class_accuracy: float = 0.0

    def as_dict(self):
        return {
            "two_way_accuracy": self.two_way_accuracy,
            "topk": {str(k): v for k, v in self.topk.items()},
            "mean_cosine": self.mean_cosine,
            "n_test": self.n_test,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "retrieval_class_accuracy": self.retrieval_class_accuracy,
        }


def evaluate(pred, targets, class_ids, stimulus_set=None, topk=(1, 5)) -> EvalReport:
    pred = np.atleast_2d(pred)
    targets = np.atleast_2d(targets)
    n = pred.shape[0]
    if n == 0:
        raise ValueError("no test items")
    class_ids = np.asarray(class_ids)
    per_item = per_item_two_way(pred, targets)
    per_class = {int(c): float(per_item[class_ids == c].mean()) for c in np.unique(class_ids)}
    cos = np.sum(_unit_rows(pred) * _unit_rows(targets), axis=1)
    cls_acc = 0.0
    if stimulus_set is not None:
        C = cosine_matrix(pred, stimulus_set.embeddings)
        chosen = np.argmax(C, axis=1)
        hit = [stimulus_set.stimuli[j].class_id == c for j, c in zip(chosen, class_ids)]
        cls_acc = float(np.mean(hit))
    return EvalReport(
        two_way_accuracy=float(per_item.mean()),
        topk={int(k): topk_retrieval(pred, targets, int(k)) for k in topk},
        mean_cosine=float(cos.mean()),
        n_test=int(n),
        per_class=per_class,
        retrieval_class_accuracy=cls_acc,
    )


def report_row(labels: dict, report: EvalReport) -> dict:
    row = dict(labels)
    row["two_way"] = report.two_way_accuracy
    for k, v in sorted(report.topk.items()):
        row[f"top{k}"] = v
    row["mean_cosine"] = report.mean_cosine
    row["class_retrieval"] = report.retrieval_class_accuracy
    row["n_test"] = report.n_test
    return row


def rows_to_csv(rows) -> str:
    """Deterministic CSV text (floats via repr) for a list of flat dicts."""
    if not rows:
        return ""
    cols = list(rows[0].keys())
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()
