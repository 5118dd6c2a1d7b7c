"""Unit records and the poststratification cell table.

Cells are the distinct values of the unit weights observed in the sample.
Everything downstream (the model, the estimators, the predictive checks)
works on the per-cell sufficient statistics held by :class:`CellTable`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

OutcomeKind = Literal["continuous", "binary"]
OUTCOME_KINDS = ("continuous", "binary")


class InvalidInputError(ValueError):
    """Raised for malformed records, weights or outcome values."""


@dataclass(frozen=True)
class UnitRecord:
    weight: float
    outcome: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.weight) or self.weight <= 0:
            raise InvalidInputError(f"weight must be positive and finite, got {self.weight!r}")
        if not np.isfinite(self.outcome):
            raise InvalidInputError(f"outcome must be finite, got {self.outcome!r}")


def normalize_weights(w) -> np.ndarray:
    """Rescale positive weights so that their arithmetic mean is one."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise InvalidInputError("weights must be a nonempty 1-d vector")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise InvalidInputError("weights must be positive and finite")
    return w * (w.size / np.sum(w))


def _group_labels(w: np.ndarray, rel_tol: float | None) -> tuple[np.ndarray, np.ndarray]:
    """Return (cell weight values, cell index of each unit)."""
    if rel_tol is None or rel_tol <= 0:
        values, inverse = np.unique(w, return_inverse=True)
        return values, inverse
    order = np.argsort(w, kind="stable")
    ws = w[order]
    labels_sorted = np.empty(ws.size, dtype=np.int64)
    anchor = ws[0]
    label = 0
    for i, wi in enumerate(ws):
        if (wi - anchor) / anchor >= rel_tol:
            label += 1
            anchor = wi
        labels_sorted[i] = label
    inverse = np.empty_like(labels_sorted)
    inverse[order] = labels_sorted
    counts = np.bincount(inverse)
    values = np.bincount(inverse, weights=w) / counts
    return values, inverse


@dataclass(frozen=True)
class CellTable:
    """Per-cell sufficient statistics, cells sorted by ascending weight.

    For continuous outcomes ``ybar`` holds cell means and ``s2`` the within-cell
    total sums of squared deviations. For binary outcomes ``ycount`` holds the
    cell totals; ``ybar`` is still filled (as ``ycount / n``) for convenience.
    """

    w: np.ndarray
    n: np.ndarray
    outcome_kind: OutcomeKind
    ybar: np.ndarray
    s2: np.ndarray
    ycount: np.ndarray | None
    sd_y: float
    x: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.log(self.w))
        for name in ("w", "n", "ybar", "s2", "x", "ycount"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def J(self) -> int:
        return int(self.w.size)

    @property
    def n_total(self) -> int:
        return int(self.n.sum())

    @classmethod
    def from_arrays(
        cls,
        weights,
        outcomes,
        outcome_kind: OutcomeKind,
        *,
        normalize: bool = True,
        rel_tol: float | None = None,
    ) -> "CellTable":
        """Build the table from parallel unit-level arrays.

        Weights are grouped by exact value unless ``rel_tol`` is given, in which
        case consecutive sorted weights within that relative distance share a
        cell. With ``normalize`` the unit weights are first rescaled to mean one.
        """
        if outcome_kind not in OUTCOME_KINDS:
            raise InvalidInputError(f"unknown outcome kind {outcome_kind!r}")
        w = np.asarray(weights, dtype=float)
        y = np.asarray(outcomes, dtype=float)
        if w.ndim != 1 or y.shape != w.shape:
            raise InvalidInputError("weights and outcomes must be 1-d arrays of equal length")
        if w.size == 0:
            raise InvalidInputError("no records")
        if not np.all(np.isfinite(y)):
            raise InvalidInputError("outcomes must be finite")
        if outcome_kind == "binary" and not np.all((y == 0) | (y == 1)):
            raise InvalidInputError("binary outcomes must be 0 or 1")
        w = normalize_weights(w) if normalize else _check_positive(w)

        values, cell = _group_labels(w, rel_tol)
        J = values.size
        n = np.bincount(cell, minlength=J).astype(np.int64)
        total = np.bincount(cell, weights=y, minlength=J)
        ybar = total / n
        s2 = np.bincount(cell, weights=(y - ybar[cell]) ** 2, minlength=J)
        s2[n == 1] = 0.0
        ycount = np.rint(total).astype(np.int64) if outcome_kind == "binary" else None
        sd_y = float(np.std(y, ddof=1)) if y.size > 1 else 0.0
        return cls(w=values, n=n, outcome_kind=outcome_kind, ybar=ybar, s2=s2, ycount=ycount, sd_y=sd_y)

    def permuted(self, perm: Sequence[int]) -> "CellTable":
        """Cells reordered by ``perm`` (no longer sorted); used for symmetry checks."""
        perm = np.asarray(perm)
        return CellTable(
            w=self.w[perm].copy(),
            n=self.n[perm].copy(),
            outcome_kind=self.outcome_kind,
            ybar=self.ybar[perm].copy(),
            s2=self.s2[perm].copy(),
            ycount=None if self.ycount is None else self.ycount[perm].copy(),
            sd_y=self.sd_y,
        )


def _check_positive(w: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise InvalidInputError("weights must be positive and finite")
    return w


def build_cell_table(
    records: Iterable[UnitRecord],
    outcome_kind: OutcomeKind,
    *,
    normalize: bool = True,
    rel_tol: float | None = None,
) -> CellTable:
    records = list(records)
    if not records:
        raise InvalidInputError("no records")
    w = np.fromiter((r.weight for r in records), dtype=float, count=len(records))
    y = np.fromiter((r.outcome for r in records), dtype=float, count=len(records))
    return CellTable.from_arrays(w, y, outcome_kind, normalize=normalize, rel_tol=rel_tol)


def read_records_csv(path, outcome_kind: OutcomeKind | None = None) -> list[UnitRecord]:
    """Read a ``weight,outcome`` CSV; errors name the offending line."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header][:2] != ["weight", "outcome"] or len(header) != 2:
            raise InvalidInputError(f"{path}:1: expected header 'weight,outcome'")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise InvalidInputError(f"{path}:{line}: expected two fields, got {row!r}")
            try:
                w, y = float(row[0]), float(row[1])
            except ValueError:
                raise InvalidInputError(f"{path}:{line}: non-numeric field in {row!r}") from None
            if not (math.isfinite(w) and w > 0):
                raise InvalidInputError(f"{path}:{line}: weight must be positive and finite")
            if not math.isfinite(y):
                raise InvalidInputError(f"{path}:{line}: outcome must be finite")
            if outcome_kind == "binary" and y not in (0.0, 1.0):
                raise InvalidInputError(f"{path}:{line}: binary outcome must be 0 or 1, got {row[1]!r}")
            records.append(UnitRecord(w, y))
    if not records:
        raise InvalidInputError(f"{path}: no records")
    return records
