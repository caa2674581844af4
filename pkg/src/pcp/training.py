"""End-to-end training of encoder, hypernetwork and prototypes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from pcp.autodiff import Adam, softmax
from pcp.data import EcgDataset
from pcp.errors import DataError
from pcp.metrics import auc
from pcp.model import PcpModel, batch_losses, build_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.1
    embedding_dim: int = 128
    batch_size: int = 256
    learning_rate: float = 1e-4
    epochs: int = 20
    seed: int = 0
    loss_reduction: str = "sum"

    def validate(self) -> None:
        if not self.temperature > 0:
            raise DataError("temperature must be > 0")
        if self.embedding_dim <= 0 or self.batch_size <= 0:
            raise DataError("embedding_dim and batch_size must be > 0")
        if not self.learning_rate > 0 or self.epochs < 0:
            raise DataError("learning_rate must be > 0 and epochs >= 0")
        if self.loss_reduction not in ("sum", "mean"):
            raise DataError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    contrastive_loss: float  # per frame
    supervised_loss: float  # per frame
    train_auc: float | None

    @property
    def combined_loss(self) -> float:
        return self.contrastive_loss + self.supervised_loss


def train(dataset: EcgDataset, config: TrainConfig) -> tuple[PcpModel, list[EpochMetrics]]:
    """Jointly fit encoder, hypernetwork and one prototype per training patient.

    Batches are drawn uniformly over frames (no patient balancing); during
    training each representation generates its own classifier weights.
    """
    config.validate()
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    patients = dataset.patients
    if len(patients) < 2:
        raise DataError("training needs at least two patients")
    if not len(patients) < len(dataset):
        raise DataError("need more frames than patients (P < N)")

    model = build_model(
        patients, config.embedding_dim, dataset.num_classes, config.temperature, seed=config.seed
    )
    opt = Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    frames = dataset.samples
    n = len(dataset)

    history: list[EpochMetrics] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        con_total = sup_total = 0.0
        posteriors = np.zeros((n, dataset.num_classes))
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            con, sup, logits = batch_losses(
                model,
                frames[idx],
                dataset.patient_ids[idx],
                dataset.labels[idx],
                config.loss_reduction,
                training=True,
                rng=rng,
            )
            opt.zero_grad()
            (con + sup).backward()
            opt.step()
            per = len(idx) if config.loss_reduction == "sum" else 1
            con_total += con.item() / per * len(idx)
            sup_total += sup.item() / per * len(idx)
            posteriors[idx] = softmax(logits.data, axis=1)
        try:
            train_auc = auc(posteriors, dataset.labels)
        except DataError:
            train_auc = None
        history.append(EpochMetrics(epoch, con_total / n, sup_total / n, train_auc))
        log.info(
            "epoch %d contrastive %.4f supervised %.4f auc %s",
            epoch,
            con_total / n,
            sup_total / n,
            "n/a" if train_auc is None else f"{train_auc:.4f}",
        )
    return model, history
