"""Patient-specificity and patient-similarity analyses over prototypes and
representations."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from pcp.errors import DataError, NumericError, ShapeError

METRICS = ("euclidean", "cosine_distance")


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise DataError(f"unknown metric {metric!r}; expected one of {METRICS}")


def pairwise_distances(a, b, metric: str = "euclidean") -> np.ndarray:
    """(m, n) matrix of distances between the rows of ``a`` (m, E) and ``b`` (n, E)."""
    _check_metric(metric)
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_distances: dimension mismatch {a.shape} vs {b.shape}")
    if metric == "euclidean":
        out = np.empty((len(a), len(b)))
        for start in range(0, len(a), 256):
            diff = a[start : start + 256, None, :] - b[None, :, :]
            out[start : start + 256] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        return out
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("cosine distance undefined for a zero-norm row")
    cos = (a / na[:, None]) @ (b / nb[:, None]).T
    return 1.0 - np.clip(cos, -1.0, 1.0)


@dataclass(frozen=True)
class DistanceMatrix:
    row_patients: np.ndarray
    col_patients: np.ndarray
    values: np.ndarray
    metric: str

    def __post_init__(self):
        if self.values.shape != (len(self.row_patients), len(self.col_patients)):
            raise ShapeError("distance matrix shape does not match its patient lists")


@dataclass(frozen=True)
class DistanceDistributions:
    pcp_to_same: np.ndarray
    pcp_to_different: np.ndarray
    pcp_to_validation: np.ndarray
    metric: str

    def means(self) -> dict[str, float | None]:
        return {
            name: (float(v.mean()) if v.size else None)
            for name, v in (
                ("pcp_to_same", self.pcp_to_same),
                ("pcp_to_different", self.pcp_to_different),
                ("pcp_to_validation", self.pcp_to_validation),
            )
        }


def distance_distributions(
    prototypes,
    prototype_patients: Sequence[int],
    train_reps,
    train_patients: Sequence[int],
    val_reps,
    metric: str = "euclidean",
) -> DistanceDistributions:
    """Distances from each prototype to its own patient's training
    representations, to every other training patient's, and to all validation
    representations."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    proto_ids = np.asarray(prototype_patients)
    train_ids = np.asarray(train_patients)
    missing = set(proto_ids.tolist()) - set(train_ids.tolist())
    if missing:
        raise DataError(f"patients without training representations: {sorted(missing)[:5]}")
    d_train = pairwise_distances(prototypes, train_reps, metric)
    own = proto_ids[:, None] == train_ids[None, :]
    val_reps = np.asarray(val_reps, dtype=np.float64).reshape(-1, prototypes.shape[1])
    d_val = pairwise_distances(prototypes, val_reps, metric) if len(val_reps) else np.zeros((len(prototypes), 0))
    return DistanceDistributions(d_train[own], d_train[~own], d_val.ravel(), metric)


def _groups(ids: Sequence[int]) -> tuple[np.ndarray, list[np.ndarray]]:
    ids = np.asarray(ids)
    order = np.unique(ids)
    return order, [np.flatnonzero(ids == p) for p in order]


def patient_distance_matrix(
    reps_a, patients_a: Sequence[int], reps_b, patients_b: Sequence[int], metric: str = "euclidean"
) -> DistanceMatrix:
    """Patient-by-patient matrix: entry (p, q) averages the distances over all
    pairs of p's rows in ``reps_a`` and q's rows in ``reps_b``.

    A prototype bank is simply one row per patient.
    """
    reps_a = np.asarray(reps_a, dtype=np.float64)
    reps_b = np.asarray(reps_b, dtype=np.float64)
    if len(reps_a) == 0 or len(reps_b) == 0:
        raise DataError("patient_distance_matrix needs non-empty groups")
    if len(reps_a) != len(patients_a) or len(reps_b) != len(patients_b):
        raise ShapeError("one patient id per representation row is required")
    rows, row_groups = _groups(patients_a)
    cols, col_groups = _groups(patients_b)
    d = pairwise_distances(reps_a, reps_b, metric)
    # average over column groups, then row groups
    by_col = np.stack([d[:, g].mean(axis=1) for g in col_groups], axis=1)
    values = np.stack([by_col[g].mean(axis=0) for g in row_groups], axis=0)
    return DistanceMatrix(rows, cols, values, metric)


def most_similar_pair(matrix: DistanceMatrix) -> tuple[int, int, float]:
    """Global minimum; ties resolved by the first cell in row-major order."""
    if matrix.values.size == 0:
        raise DataError("empty distance matrix")
    i, j = np.unravel_index(np.argmin(matrix.values), matrix.values.shape)
    return int(matrix.row_patients[i]), int(matrix.col_patients[j]), float(matrix.values[i, j])


def least_similar_pair(matrix: DistanceMatrix) -> tuple[int, int, float]:
    if matrix.values.size == 0:
        raise DataError("empty distance matrix")
    i, j = np.unravel_index(np.argmax(matrix.values), matrix.values.shape)
    return int(matrix.row_patients[i]), int(matrix.col_patients[j]), float(matrix.values[i, j])


def _label_vector(patients: np.ndarray, labels) -> np.ndarray:
    if isinstance(labels, Mapping):
        try:
            return np.array([labels[int(p)] for p in patients])
        except KeyError as exc:
            raise DataError(f"no label for patient {exc.args[0]}") from None
    labels = np.asarray(labels)
    if len(labels) != len(patients):
        raise DataError("one label per matrix row/column is required")
    return labels


def precision_at_threshold(matrix: DistanceMatrix, row_labels, col_labels, threshold: float) -> tuple[float | None, int]:
    """Retrieve every pair with distance strictly below ``threshold``; return the
    fraction with matching labels (None when nothing is retrieved) and the count."""
    rl = _label_vector(matrix.row_patients, row_labels)
    cl = _label_vector(matrix.col_patients, col_labels)
    hit = matrix.values < threshold
    count = int(hit.sum())
    if count == 0:
        return None, 0
    match = rl[:, None] == cl[None, :]
    return float((hit & match).sum() / count), count


def precision_curve(matrix: DistanceMatrix, row_labels, col_labels, thresholds: Sequence[float]) -> list[tuple[float, float | None, int]]:
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise DataError("thresholds must be sorted ascending")
    return [(t, *precision_at_threshold(matrix, row_labels, col_labels, t)) for t in thresholds]


def threshold_grid(values, n: int = 20) -> list[float]:
    """``n`` evenly spaced thresholds above the minimum; the last one retrieves every pair."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or n < 1:
        raise DataError("threshold grid needs values and n >= 1")
    grid = np.linspace(values.min(), values.max(), n + 1)[1:]
    grid[-1] = np.nextafter(values.max(), np.inf)
    return [float(t) for t in grid]


def base_match_rate(matrix: DistanceMatrix, row_labels, col_labels) -> float:
    rl = _label_vector(matrix.row_patients, row_labels)
    cl = _label_vector(matrix.col_patients, col_labels)
    return float((rl[:, None] == cl[None, :]).mean())


# -- CSV emitters ----------------------------------------------------------


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_distributions_csv(dist: DistanceDistributions, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "value"])
        for name in ("pcp_to_same", "pcp_to_different", "pcp_to_validation"):
            for v in getattr(dist, name):
                w.writerow([name, _fmt(v)])


def write_matrix_csv(matrix: DistanceMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_patient", "col_patient", "distance"])
        for i, p in enumerate(matrix.row_patients):
            for j, q in enumerate(matrix.col_patients):
                w.writerow([int(p), int(q), _fmt(matrix.values[i, j])])


def write_curve_csv(curve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "count"])
        for t, prec, count in curve:
            w.writerow([_fmt(t), _fmt(prec), count])


def write_pair_frames_csv(path: str | Path, pairs: Sequence[tuple[str, int, np.ndarray]]) -> None:
    """Frames of matched patients for external plotting: role, patient_id, frame_index, s0..."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        width = max((f.shape[-1] for _, _, f in pairs), default=0)
        w.writerow(["role", "patient_id", "frame_index"] + [f"s{i}" for i in range(width)])
        for role, pid, frames in pairs:
            for k, frame in enumerate(np.atleast_2d(frames)):
                w.writerow([role, int(pid), k] + [format(float(v), ".9g") for v in frame])
