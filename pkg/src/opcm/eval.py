"""Accuracy-matrix metrics and merge diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import MissingCell, TooFewTasks
from .tensorstore import Checkpoint, check_compatible, global_norm, task_vector


@dataclass
class AccuracyMatrix:
    """Row ``i`` holds the accuracies of the model merged after step ``i``.

    Missing evaluations are stored as NaN. Values are fractions in [0, 1].
    """

    cells: np.ndarray
    task_names: Optional[list] = None

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.float64)
        if cells.ndim != 2 or cells.shape[0] != cells.shape[1]:
            raise ValueError(f"accuracy matrix must be square, got shape {cells.shape}")
        present = cells[~np.isnan(cells)]
        if np.any((present < 0) | (present > 1)):
            raise ValueError("accuracies must lie in [0, 1]")
        self.cells = cells
        if self.task_names is None:
            self.task_names = [f"task{j + 1}" for j in range(cells.shape[0])]

    @classmethod
    def empty(cls, n_tasks: int, task_names=None) -> "AccuracyMatrix":
        return cls(np.full((n_tasks, n_tasks), np.nan), task_names)

    @property
    def n_tasks(self) -> int:
        return self.cells.shape[0]

    def __getitem__(self, idx):
        return self.cells[idx]

    def __setitem__(self, idx, value):
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError("accuracies must lie in [0, 1]")
        self.cells[idx] = value

    def to_csv(self) -> str:
        """Percentages, one row per merge step, header of task names."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step"] + list(self.task_names))
        for i, row in enumerate(self.cells):
            writer.writerow([i + 1] + ["" if np.isnan(v) else f"{100 * v:.4f}" for v in row])
        return buf.getvalue()


def _require(m: AccuracyMatrix, cells) -> None:
    missing = [(i + 1, j + 1) for i, j in cells if np.isnan(m.cells[i, j])]
    if missing:
        raise MissingCell(f"accuracy matrix lacks cells (step, task): {missing}")


def avg_accuracy(m: AccuracyMatrix) -> float:
    T = m.n_tasks
    _require(m, [(T - 1, j) for j in range(T)])
    return float(np.mean(m.cells[T - 1]))


def backward_transfer(m: AccuracyMatrix) -> float:
    """Mean over earlier tasks of (final accuracy - accuracy right after merging it)."""
    T = m.n_tasks
    if T < 2:
        raise TooFewTasks("backward transfer needs at least two tasks")
    _require(m, [(i, i) for i in range(T - 1)] + [(T - 1, i) for i in range(T - 1)])
    diffs = [m.cells[T - 1, i] - m.cells[i, i] for i in range(T - 1)]
    return float(sum(diffs) / (T - 1))


def cosine_similarity_matrix(tvs: Sequence[Checkpoint]) -> np.ndarray:
    """Pairwise cosine similarity of flattened task vectors; zero vectors give 0."""
    if len(tvs) == 0:
        raise ValueError("need at least one task vector")
    check_compatible(*tvs)
    flat = np.stack([tv.flatten() for tv in tvs])
    norms = np.array([global_norm(tv) for tv in tvs])
    T = len(tvs)
    sim = np.zeros((T, T))
    for i in range(T):
        for j in range(i, T):
            if norms[i] == 0 or norms[j] == 0:
                value = 0.0
            elif i == j:
                value = 1.0
            else:
                value = float(np.dot(flat[i], flat[j])) / (norms[i] * norms[j])
            sim[i, j] = sim[j, i] = min(1.0, max(-1.0, value))
    return sim


def similarity_csv(sim: np.ndarray, names: Optional[list] = None) -> str:
    names = names or [f"task{j + 1}" for j in range(sim.shape[0])]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([""] + list(names))
    for name, row in zip(names, sim):
        writer.writerow([name] + [repr(float(v)) for v in row])
    return buf.getvalue()


def _merge_pair(theta0, first, second, method, params):
    from .estimators import make_merger

    return make_merger(method, **params).fit(theta0, [first, second]).merged_


def commutativity_gap(theta0: Checkpoint, A: Checkpoint, B: Checkpoint, method: str = "opcm", **params) -> float:
    """Norm of the difference between merging A then B and B then A."""
    check_compatible(theta0, A, B)
    ab = _merge_pair(theta0, A, B, method, params)
    ba = _merge_pair(theta0, B, A, method, params)
    return global_norm(task_vector(ab, ba))


@dataclass
class ReportRow:
    step: int
    lambda_: float
    sqrt_t: float
    avg_norm: float
    merged_distance: float
    orthogonality_residual: float
    orthogonality_ratio: float


def orthogonality_report(log: Sequence) -> list:
    """One row per step with lambda next to sqrt(t) and the orthogonality residuals."""
    return [
        ReportRow(
            rec.step,
            rec.lambda_,
            math.sqrt(rec.step),
            rec.avg_norm,
            rec.merged_distance,
            rec.orthogonality_residual,
            rec.orthogonality_ratio,
        )
        for rec in log
    ]


def report_json(log: Sequence = (), acc: Optional[float] = None, bwt: Optional[float] = None, **extra) -> str:
    doc = {"steps": [rec.to_dict() for rec in log], "acc": acc, "bwt": bwt}
    doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=2)
