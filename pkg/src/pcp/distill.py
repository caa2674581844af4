"""Coresets, weighted linear probes and the prototype distillation bench."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from pcp.data import EcgDataset
from pcp.errors import DataError, ShapeError
from pcp.metrics import auc
from pcp.model import PcpModel

METHODS = ("uniform", "lightweight", "pcps", "full")
SPACES = ("raw", "representation")
SWEEP_FRACTIONS = (0.05, 0.1, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class CoresetResult:
    indices: np.ndarray
    weights: np.ndarray
    method: str
    k: int

    def __post_init__(self):
        if not (len(self.indices) == len(self.weights) == self.k):
            raise ShapeError("coreset indices, weights and k disagree")
        if np.any(self.weights <= 0):
            raise DataError("coreset weights must be positive")


def lightweight_proposal(x) -> np.ndarray:
    """Half uniform, half proportional to squared distance from the mean."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 1:
        raise DataError("lightweight coreset needs n >= 1")
    x = x.reshape(n, -1)
    d2 = ((x - x.mean(axis=0)) ** 2).sum(axis=1)
    total = d2.sum()
    if total == 0:
        return np.full(n, 1.0 / n)
    return 0.5 / n + 0.5 * d2 / total


def lightweight_coreset(x, k: int, seed: int) -> CoresetResult:
    if k < 1:
        raise DataError("coreset size k must be >= 1")
    q = lightweight_proposal(x)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(q), size=k, replace=True, p=q)
    return CoresetResult(idx, 1.0 / (k * q[idx]), "lightweight", k)


def uniform_coreset(n: int, k: int, seed: int) -> CoresetResult:
    """k indices drawn uniformly with replacement, each weighted n/k."""
    if n < 1 or k < 1:
        raise DataError("uniform coreset needs n >= 1 and k >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=k)
    return CoresetResult(idx, np.full(k, n / k), "uniform", k)


# -- linear probe -------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 1e-3
    epochs: int = 200
    step: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class LinearProbe:
    """One-vs-rest linear scorer; row c of ``coef`` with ``intercept[c]`` scores class c."""

    coef: np.ndarray  # (C, D)
    intercept: np.ndarray  # (C,)
    config: ProbeConfig

    def decision_function(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(len(x), -1)
        if x.shape[1] != self.coef.shape[1]:
            raise ShapeError(f"probe expects {self.coef.shape[1]} features, got {x.shape[1]}")
        return x @ self.coef.T + self.intercept


def _merge_duplicates(x: np.ndarray, weights: np.ndarray, labels: np.ndarray):
    """Collapse identical (row, label) pairs, summing their weights."""
    keys = np.concatenate([x, labels[:, None].astype(np.float64)], axis=1)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    merged = np.zeros(len(uniq))
    np.add.at(merged, inverse.ravel(), weights)
    order = np.argsort(first, kind="stable")  # keep first-occurrence order
    return x[first[order]], merged[order], labels[first[order]]


def probe_objective(w: np.ndarray, b: float, x: np.ndarray, weights: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Normalized weighted hinge loss plus (l2/2)*||w||^2 for one binary task (y in {-1, +1})."""
    hinge = np.maximum(0.0, 1.0 - y * (x @ w + b))
    return float(weights @ hinge / weights.sum() + 0.5 * l2 * (w @ w))


def train_linear_probe(x, weights, labels, config: ProbeConfig = ProbeConfig(), num_classes: int | None = None) -> LinearProbe:
    """Full-batch subgradient descent, step ``config.step / sqrt(t)``, from zero.

    The full-batch schedule makes the seed irrelevant to the result; it is kept
    in the config so runs record it.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(len(x), -1)
    weights = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not (len(x) == len(weights) == len(labels)):
        raise ShapeError("x, weights and labels must have equal length")
    if len(x) == 0 or np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        raise DataError("probe needs a non-empty set with positive finite weights")
    if len(np.unique(labels)) < 2:
        raise DataError("probe needs at least two classes in its training set")
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels outside [0, {c})")

    x, weights, labels = _merge_duplicates(x, weights, labels)
    wn = weights / weights.sum()
    coef = np.zeros((c, x.shape[1]))
    intercept = np.zeros(c)
    y = np.where(labels[None, :] == np.arange(c)[:, None], 1.0, -1.0)  # (C, n)
    for t in range(1, config.epochs + 1):
        eta = config.step / math.sqrt(t)
        margin = y * (coef @ x.T + intercept[:, None])
        active = (margin < 1.0) * wn * y  # (C, n)
        grad_w = config.l2 * coef - active @ x
        grad_b = -active.sum(axis=1)
        coef = coef - eta * grad_w
        intercept = intercept - eta * grad_b
    if not (np.all(np.isfinite(coef)) and np.all(np.isfinite(intercept))):
        raise DataError("probe training diverged")
    return LinearProbe(coef, intercept, config)


# -- distillation bench -------------------------------------------------------


@dataclass(frozen=True)
class DistillResult:
    method: str
    space: str
    fraction: float
    k: int
    seed: int
    auc: float
    runtime_seconds: float


def _pcp_subset(labels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random k-subset of prototypes; redrawn until two classes are present."""
    p = len(labels)
    if len(np.unique(labels)) < 2:
        raise DataError("prototype labels cover fewer than two classes")
    k = max(k, 2)
    for _ in range(1000):
        idx = np.sort(rng.choice(p, size=k, replace=False))
        if len(np.unique(labels[idx])) >= 2:
            return idx
    raise DataError("could not draw a prototype subset covering two classes")


def distill_eval(
    model: PcpModel,
    train: EcgDataset,
    val: EcgDataset,
    method: str,
    fraction: float = 1.0,
    seed: int = 0,
    space: str = "representation",
    probe: ProbeConfig = ProbeConfig(),
    train_reps: np.ndarray | None = None,
    val_reps: np.ndarray | None = None,
) -> DistillResult:
    """Train a probe on a distilled set and report validation macro AUC.

    ``pcps`` uses the prototype bank (a random ``ceil(fraction * P)`` subset);
    ``uniform``/``lightweight`` draw k = P instances from the training split in
    ``space``; ``full`` uses every training representation with unit weight.
    Raw-space probes are scored on raw validation frames.
    """
    if method not in METHODS:
        raise DataError(f"unknown distillation method {method!r}")
    if space not in SPACES:
        raise DataError(f"unknown space {space!r}")
    if not 0 < fraction <= 1:
        raise DataError("fraction must lie in (0, 1]")
    start = time.perf_counter()
    num_classes = model.num_classes
    p = len(model.bank.patient_ids)
    raw = space == "raw" and method in ("uniform", "lightweight")

    if raw:
        source_x, source_y = train.samples.astype(np.float64), train.labels
        eval_x = val.samples.astype(np.float64)
    else:
        if train_reps is None and method != "pcps":
            train_reps = model.represent(train.samples)
        eval_x = val_reps if val_reps is not None else model.represent(val.samples)
        source_x, source_y = train_reps, train.labels

    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    if method == "pcps":
        patient_label = train.patient_labels()
        labels = np.array([patient_label[int(q)] for q in model.bank.patient_ids])
        k = math.ceil(fraction * p)
        idx = np.arange(p) if k >= p else _pcp_subset(labels, k, rng)
        x, w, y = model.bank.vectors.data[idx], np.ones(len(idx)), labels[idx]
        space = "representation"
    elif method == "full":
        k = len(source_x)
        x, w, y = source_x, np.ones(k), source_y
    else:
        k = p
        if method == "lightweight":
            cs = lightweight_coreset(source_x, k, int(rng.integers(2**31)))
        else:
            cs = uniform_coreset(len(source_x), k, int(rng.integers(2**31)))
        x, w, y = source_x[cs.indices], cs.weights, source_y[cs.indices]

    if len(np.unique(y)) < 2:
        raise DataError(f"{method} coreset of size {k} covers a single class")
    clf = train_linear_probe(x, w, y, probe, num_classes=num_classes)
    score = auc(clf.decision_function(eval_x), val.labels)
    return DistillResult(method, space, float(fraction), int(k), int(seed), score, time.perf_counter() - start)


RESULT_FIELDS = ("method", "space", "fraction", "k", "seed", "auc", "runtime_seconds")


def write_results_csv(results: Sequence[DistillResult], path: str | Path, include_runtime: bool = True) -> None:
    """Results table; runtime can be blanked so files are byte-reproducible."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in results:
            w.writerow(
                [r.method, r.space, repr(r.fraction), r.k, r.seed, repr(r.auc), repr(r.runtime_seconds) if include_runtime else ""]
            )
