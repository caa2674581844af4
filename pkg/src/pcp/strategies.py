"""Hypernetwork input strategies used at inference time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcp.autodiff import no_grad, softmax
from pcp.errors import DataError, NumericError
from pcp.model import PcpModel, classifier_logits, hypernet_generate


@dataclass(frozen=True)
class Strategy:
    """``kind`` is one of nearest, nearest_k, mean, similarity_weighted_mean."""

    kind: str
    k: int = 10

    KINDS = ("nearest", "nearest_k", "mean", "similarity_weighted_mean")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DataError(f"unknown strategy {self.kind!r}")
        if self.kind == "nearest_k" and self.k < 1:
            raise DataError("nearest_k needs k >= 1")

    @property
    def name(self) -> str:
        return {
            "nearest": "Nearest",
            "nearest_k": f"Nearest{self.k}",
            "mean": "Mean",
            "similarity_weighted_mean": "SimilarityWeightedMean",
        }[self.kind]

    @classmethod
    def parse(cls, text: str) -> Strategy:
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"swm": "similarity_weighted_mean", "similarityweightedmean": "similarity_weighted_mean"}
        key = aliases.get(key, key)
        if key.startswith("nearest") and key not in ("nearest",):
            digits = key[len("nearest") :].lstrip("_k")
            return cls("nearest_k", int(digits) if digits else 10)
        return cls(key)


NEAREST = Strategy("nearest")
NEAREST10 = Strategy("nearest_k", 10)
MEAN = Strategy("mean")
SIMILARITY_WEIGHTED_MEAN = Strategy("similarity_weighted_mean")
ALL_STRATEGIES = (NEAREST, NEAREST10, MEAN, SIMILARITY_WEIGHTED_MEAN)


def _scaled_cosines(h: np.ndarray, prototypes: np.ndarray, temperature: float) -> np.ndarray:
    nh = np.linalg.norm(h, axis=1)
    nv = np.linalg.norm(prototypes, axis=1)
    if np.any(nh == 0):
        raise NumericError("zero-norm representation: cosine similarity undefined")
    if np.any(nv == 0):
        raise NumericError("zero-norm prototype: cosine similarity undefined")
    return (h / nh[:, None]) @ (prototypes / nv[:, None]).T / temperature


def select_hypernet_input(h, prototypes, strategy: Strategy, temperature: float) -> np.ndarray:
    """Hypernetwork input(s) for representation(s) ``h`` (E,) or (B, E)."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 2 or len(prototypes) == 0:
        raise DataError("prototype bank is empty")
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h2 = h[None, :] if single else h
    p = len(prototypes)
    if strategy.kind == "mean":
        out = np.broadcast_to(prototypes.mean(axis=0), h2.shape).copy()
        if np.any(np.linalg.norm(h2, axis=1) == 0):
            raise NumericError("zero-norm representation: cosine similarity undefined")
    else:
        s = _scaled_cosines(h2, prototypes, temperature)
        if strategy.kind == "nearest":
            # argmax returns the first maximum: lowest row index wins ties
            out = prototypes[s.argmax(axis=1)]
        elif strategy.kind == "nearest_k":
            if strategy.k > p:
                raise DataError(f"nearest_k needs k <= P ({strategy.k} > {p})")
            top = np.argsort(-s, axis=1, kind="stable")[:, : strategy.k]
            out = prototypes[top].mean(axis=1)
        else:
            out = softmax(s, axis=1) @ prototypes
    return out[0] if single else out


def predict_logits(model: PcpModel, frames, strategy: Strategy, h: np.ndarray | None = None) -> np.ndarray:
    """Eval-mode logits with patient-specific classifier weights."""
    if h is None:
        h = model.represent(frames)
    u = select_hypernet_input(h, model.bank.vectors.data, strategy, model.temperature)
    with no_grad():
        omega = hypernet_generate(u, model.hypernet)
        return classifier_logits(h, omega).data


def predict(model: PcpModel, frames, strategy: Strategy, h: np.ndarray | None = None) -> np.ndarray:
    """Posterior class distribution for each frame, (B, C); (C,) for a single frame."""
    frames = np.asarray(frames)
    single = frames.ndim == 1
    post = softmax(predict_logits(model, frames, strategy, h), axis=1)
    return post[0] if single else post
