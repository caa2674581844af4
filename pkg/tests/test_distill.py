from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcp.data import CohortConfig, generate_synthetic_cohort, patient_split
from pcp.distill import (
    ProbeConfig,
    distill_eval,
    lightweight_coreset,
    lightweight_proposal,
    probe_objective,
    train_linear_probe,
    uniform_coreset,
)
from pcp.errors import DataError
from pcp.metrics import auc, binary_auc
from pcp.training import TrainConfig, train

# -- AUC -----------------------------------------------------------------------


def pair_count_auc(scores, labels):
    per_class = []
    for c in sorted(set(labels)):
        pos = [s[c] for s, y in zip(scores, labels) if y == c]
        neg = [s[c] for s, y in zip(scores, labels) if y != c]
        wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
        per_class.append(wins / (len(pos) * len(neg)))
    return sum(per_class) / len(per_class)


def test_auc_ordered_and_anti_ordered():
    assert binary_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert binary_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert binary_auc([0.5, 0.5], [0, 1]) == 0.5


def test_auc_matches_pair_counting():
    rng = np.random.default_rng(0)
    for _ in range(100):
        labels = rng.integers(0, 3, 20)
        if len(set(labels.tolist())) < 2:
            continue
        scores = rng.integers(0, 5, (20, 3)).astype(float)  # many ties
        assert abs(auc(scores, labels) - pair_count_auc(scores.tolist(), labels.tolist())) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    labels = np.arange(30) % 3
    scores = rng.standard_normal((30, 3))
    assert auc(scores, labels) == pytest.approx(auc(np.exp(2 * scores) + 1, labels), abs=1e-15)


def test_auc_single_class_raises():
    with pytest.raises(DataError):
        auc(np.zeros((3, 2)), [1, 1, 1])


# -- coresets --------------------------------------------------------------------


def test_lightweight_examples():
    one = lightweight_coreset(np.array([[4.0, 2.0]]), 3, seed=0)
    assert np.array_equal(one.indices, [0, 0, 0]) and np.allclose(one.weights, 1 / 3)
    assert np.array_equal(lightweight_proposal(np.array([[0.0], [2.0]])), [0.5, 0.5])
    cs = lightweight_coreset(np.array([[0.0], [2.0]]), 4, seed=1)
    assert np.allclose(cs.weights, 1 / (4 * 0.5))
    assert np.array_equal(lightweight_proposal(np.ones((5, 2))), np.full(5, 0.2))


def test_lightweight_frequencies_and_weights():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((10, 3))
    mu = x.mean(axis=0)
    d2 = ((x - mu) ** 2).sum(axis=1)
    q = 0.5 / 10 + 0.5 * d2 / d2.sum()
    draws = 100_000
    cs = lightweight_coreset(x, draws, seed=3)
    freq = np.bincount(cs.indices, minlength=10) / draws
    se = np.sqrt(q * (1 - q) / draws)
    assert np.all(np.abs(freq - q) < 3 * se + 1e-12)
    assert np.array_equal(cs.weights, 1.0 / (draws * q[cs.indices]))


def test_lightweight_weighted_mean_is_unbiased():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((50, 2)) * [1.0, 3.0]
    f = x[:, 0] ** 2 + x[:, 1]
    k, reps = 20, 2000
    est = []
    for s in range(reps):
        cs = lightweight_coreset(x, k, seed=s)
        est.append(np.sum(cs.weights * f[cs.indices]) / len(x))
    est = np.array(est)
    assert abs(est.mean() - f.mean()) < 3 * est.std(ddof=1) / math.sqrt(reps)


def test_uniform_coreset():
    cs = uniform_coreset(7, 7, seed=0)
    assert len(set(cs.weights.tolist())) == 1
    assert np.array_equal(cs.indices, uniform_coreset(7, 7, seed=0).indices)
    draws = 100_000
    freq = np.bincount(uniform_coreset(8, draws, seed=1).indices, minlength=8) / draws
    assert np.all(np.abs(freq - 1 / 8) < 3 * math.sqrt(1 / 8 * 7 / 8 / draws))
    with pytest.raises(DataError):
        uniform_coreset(0, 3, seed=0)


# -- probe ------------------------------------------------------------------------


def reference_probe(x, w, y, classes, l2=1e-3, epochs=200, step=0.1):
    """Independent per-class, per-instance loop with the same schedule."""
    n, d = x.shape
    total = sum(w)
    coef, icpt = [], []
    for c in range(classes):
        wc, bc = np.zeros(d), 0.0
        t_lab = [1.0 if yi == c else -1.0 for yi in y]
        for t in range(1, epochs + 1):
            gw, gb = l2 * wc.copy(), 0.0
            for i in range(n):
                if t_lab[i] * (x[i] @ wc + bc) < 1.0:
                    gw -= w[i] / total * t_lab[i] * x[i]
                    gb -= w[i] / total * t_lab[i]
            eta = step / math.sqrt(t)
            wc, bc = wc - eta * gw, bc - eta * gb
        coef.append(wc)
        icpt.append(bc)
    return np.array(coef), np.array(icpt)


def test_probe_separable_case():
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.normal(-3, 0.3, (20, 2)), rng.normal(3, 0.3, (20, 2))])
    y = np.repeat([0, 1], 20)
    probe = train_linear_probe(x, np.ones(40), y)
    margins = probe.decision_function(x)
    for c in range(2):
        t = np.where(y == c, 1.0, -1.0)
        assert np.all(t * margins[:, c] >= 1.0)
    xt = np.concatenate([rng.normal(-3, 0.3, (10, 2)), rng.normal(3, 0.3, (10, 2))])
    assert auc(probe.decision_function(xt), np.repeat([0, 1], 10)) == 1.0


def test_probe_duplicate_equals_double_weight():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((8, 3))
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    w = rng.random(8) + 0.5
    dup = train_linear_probe(np.vstack([x, x[2:3]]), np.append(w, w[2]), np.append(y, y[2]))
    w2 = w.copy()
    w2[2] *= 2
    dbl = train_linear_probe(x, w2, y)
    assert np.array_equal(dup.coef, dbl.coef) and np.array_equal(dup.intercept, dbl.intercept)


def test_probe_matches_reference_objective():
    rng = np.random.default_rng(7)
    for _ in range(5):
        x = rng.standard_normal((15, 4))
        y = rng.integers(0, 3, 15)
        y[:3] = [0, 1, 2]
        w = rng.random(15) + 0.1
        probe = train_linear_probe(x, w, y, num_classes=3)
        coef, icpt = reference_probe(x, w, y, 3)
        for c in range(3):
            t = np.where(y == c, 1.0, -1.0)
            got = probe_objective(probe.coef[c], probe.intercept[c], x, w, t, 1e-3)
            want = probe_objective(coef[c], icpt[c], x, w, t, 1e-3)
            assert abs(got - want) < 1e-6


def test_probe_rejects_single_class():
    with pytest.raises(DataError):
        train_linear_probe(np.ones((3, 2)), np.ones(3), [1, 1, 1])


def test_probe_is_deterministic():
    rng = np.random.default_rng(8)
    x, y = rng.standard_normal((12, 3)), np.arange(12) % 3
    a = train_linear_probe(x, np.ones(12), y, ProbeConfig(seed=4))
    b = train_linear_probe(x, np.ones(12), y, ProbeConfig(seed=4))
    assert np.array_equal(a.coef, b.coef)


# -- distillation bench -----------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    ds = generate_synthetic_cohort(CohortConfig(num_patients=20, frames_per_patient=6))
    tr, va, _ = patient_split(ds, seed=0)
    model, _ = train(tr, TrainConfig(embedding_dim=8, epochs=2))
    return model, tr, va


def test_distill_eval_methods(trained):
    model, tr, va = trained
    p = len(model.bank)
    r = distill_eval(model, tr, va, "pcps", 1.0, seed=0)
    assert r.k == p and 0.0 <= r.auc <= 1.0
    assert distill_eval(model, tr, va, "pcps", 0.5, seed=0).k == math.ceil(0.5 * p)
    assert distill_eval(model, tr, va, "full", 1.0, seed=0).k == len(tr)
    for method in ("uniform", "lightweight"):
        for space in ("raw", "representation"):
            res = distill_eval(model, tr, va, method, 1.0, seed=1, space=space)
            assert res.k == p and res.space == space
    again = distill_eval(model, tr, va, "lightweight", 1.0, seed=1, space="raw")
    assert again.auc == distill_eval(model, tr, va, "lightweight", 1.0, seed=1, space="raw").auc


def test_distill_eval_rejects_bad_arguments(trained):
    model, tr, va = trained
    with pytest.raises(DataError):
        distill_eval(model, tr, va, "archetypal")
    with pytest.raises(DataError):
        distill_eval(model, tr, va, "pcps", 0.0)
