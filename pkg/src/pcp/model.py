"""Encoder, prototype bank, hypernetwork and the losses that tie them together.

Checkpoint layout (little-endian)::

    header  magic "PCPM" | version u16 | E u32 | C u32 | P u32 | input_len u32 | temperature f64
    body    P x u32 patient ids, then every array of ``PcpModel.arrays()`` as f64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from pcp.autodiff import (
    Tensor,
    batch_norm1d,
    conv1d,
    conv1d_out_len,
    cosine_similarity,
    dropout,
    flatten,
    linear,
    log,
    log_softmax,
    max_pool1d,
    maxpool1d_out_len,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    tsum,
)
from pcp.data import FRAME_LEN
from pcp.errors import DataError, FormatError, NumericError, ShapeError

CHANNELS = (1, 4, 16, 32)
KERNEL = 7
STRIDE = 3
POOL = 2
DROPOUT = 0.1


def flatten_width(input_length: int = FRAME_LEN) -> int:
    """Width of the flattened conv stack output (320 for 2500-sample frames)."""
    length = input_length
    for _ in range(len(CHANNELS) - 1):
        length = conv1d_out_len(length, KERNEL, STRIDE)
        if length < POOL:
            raise ShapeError(f"input length {input_length} too short for the conv stack")
        length = maxpool1d_out_len(length, POOL)
    return CHANNELS[-1] * length


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Encoder:
    """Three conv blocks (conv, batchnorm, relu, maxpool, dropout) then linear + relu."""

    def __init__(self, embedding_dim: int, input_length: int = FRAME_LEN, seed: int = 0, dropout_rate: float = DROPOUT):
        if embedding_dim <= 0:
            raise ShapeError("embedding_dim must be positive")
        self.embedding_dim = embedding_dim
        self.input_length = input_length
        self.dropout_rate = dropout_rate
        self.flat = flatten_width(input_length)
        rng = np.random.default_rng(seed)
        self.blocks = []
        for c_in, c_out in zip(CHANNELS[:-1], CHANNELS[1:]):
            fan_in = c_in * KERNEL
            self.blocks.append(
                {
                    "weight": _uniform(rng, fan_in, (c_out, c_in, KERNEL)),
                    "bias": _uniform(rng, fan_in, (c_out,)),
                    "gamma": Tensor(np.ones(c_out), requires_grad=True),
                    "beta": Tensor(np.zeros(c_out), requires_grad=True),
                    "running_mean": np.zeros(c_out),
                    "running_var": np.ones(c_out),
                }
            )
        self.out_weight = _uniform(rng, self.flat, (self.flat, embedding_dim))
        self.out_bias = _uniform(rng, self.flat, (embedding_dim,))

    def parameters(self) -> list[Tensor]:
        params = []
        for b in self.blocks:
            params += [b["weight"], b["bias"], b["gamma"], b["beta"]]
        return params + [self.out_weight, self.out_bias]

    def arrays(self) -> list[np.ndarray]:
        """Every trainable array and running buffer, in checkpoint order."""
        out = []
        for b in self.blocks:
            out += [b["weight"].data, b["bias"].data, b["gamma"].data, b["beta"].data, b["running_mean"], b["running_var"]]
        return out + [self.out_weight.data, self.out_bias.data]

    def features(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Flattened conv-stack output, shape (N, flatten_width)."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim == 2:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.input_length:
            raise ShapeError(f"encoder expects frames of length {self.input_length}, got shape {x.shape}")
        out = Tensor(x)
        for b in self.blocks:
            out = conv1d(out, b["weight"], b["bias"], stride=STRIDE)
            out = batch_norm1d(out, b["gamma"], b["beta"], b["running_mean"], b["running_var"], training)
            out = max_pool1d(relu(out), POOL)
            out = dropout(out, self.dropout_rate, training, rng)
        return flatten(out)

    def __call__(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return relu(linear(self.features(x, training, rng), self.out_weight, self.out_bias))


@dataclass
class PrototypeBank:
    """One learnable row per training patient."""

    vectors: Tensor  # (P, E)
    patient_ids: np.ndarray  # (P,) row -> patient id

    def __post_init__(self):
        self.patient_ids = np.asarray(self.patient_ids, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.patient_ids) != self.vectors.shape[0]:
            raise ShapeError("prototype bank needs one (E,) row per patient id")
        if len(np.unique(self.patient_ids)) != len(self.patient_ids):
            raise DataError("duplicate patient id in prototype bank")
        self._index = {int(p): i for i, p in enumerate(self.patient_ids)}

    @classmethod
    def initialize(cls, patient_ids: Sequence[int], embedding_dim: int, seed: int = 0) -> PrototypeBank:
        rng = np.random.default_rng(seed)
        v = rng.normal(0.0, 1.0 / np.sqrt(embedding_dim), size=(len(patient_ids), embedding_dim))
        return cls(Tensor(v, requires_grad=True), np.asarray(patient_ids))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def rows(self, owners: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self._index[int(o)] for o in owners], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"patient {exc.args[0]} has no prototype") from None


class Hypernetwork:
    """Affine map R^E -> R^(E*C), reshaped into per-input classifier weights (E, C)."""

    def __init__(self, embedding_dim: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.embedding_dim = embedding_dim
        self.num_classes = num_classes
        self.weight = _uniform(rng, embedding_dim, (embedding_dim, embedding_dim * num_classes))
        self.bias = _uniform(rng, embedding_dim, (embedding_dim * num_classes,))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def similarity(h, v, temperature: float) -> float:
    """Temperature-scaled cosine similarity of two vectors."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    h = np.asarray(h, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nh, nv = np.linalg.norm(h), np.linalg.norm(v)
    if nh == 0 or nv == 0:
        raise NumericError("cosine similarity undefined for a zero vector")
    return float(h @ v / (nh * nv) / temperature)


def _reduce(per_item: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return tsum(per_item)
    if reduction == "mean":
        return scale(tsum(per_item), 1.0 / per_item.shape[0])
    raise ValueError(f"unknown reduction {reduction!r}")


def _one_hot(idx: np.ndarray, width: int) -> Tensor:
    out = np.zeros((len(idx), width))
    out[np.arange(len(idx)), idx] = 1.0
    return Tensor(out)


def contrastive_loss(
    h: Tensor,
    bank: PrototypeBank,
    owners: Sequence[int],
    temperature: float,
    reduction: str = "sum",
    eps: float = 0.0,
) -> Tensor:
    """Cross-entropy of each representation against its owner's prototype,
    with all P prototypes in the denominator. ``owners`` are patient ids."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rows = bank.rows(owners)
    if h.ndim != 2 or h.shape[0] != len(rows):
        raise ShapeError(f"contrastive_loss: representations {h.shape} vs {len(rows)} owners")
    logits = scale(cosine_similarity(h, bank.vectors, eps=eps), 1.0 / temperature)
    picked = tsum(mul(log_softmax(logits, axis=1), _one_hot(rows, len(bank))), axis=1)
    return _reduce(-picked, reduction)


def hypernet_generate(u, net: Hypernetwork) -> Tensor:
    """Classifier weights from hypernetwork input(s): (E,) -> (E, C) or (B, E) -> (B, E, C)."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    single = u.ndim == 1
    if single:
        u = reshape(u, (1, -1))
    if u.ndim != 2 or u.shape[1] != net.embedding_dim:
        raise ShapeError(f"hypernetwork expects inputs of dimension {net.embedding_dim}, got {u.shape}")
    flat = linear(u, net.weight, net.bias)
    shape = (net.embedding_dim, net.num_classes)
    return reshape(flat, shape if single else (u.shape[0],) + shape)


def classifier_logits(h: Tensor, omega: Tensor) -> Tensor:
    """Per-instance logits ``omega_i^T h_i`` for h (B, E) and omega (B, E, C) or (E, C)."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    omega = omega if isinstance(omega, Tensor) else Tensor(omega)
    if omega.ndim == 2:
        omega = reshape(omega, (1,) + omega.shape)
    if h.ndim == 1:
        h = reshape(h, (1, -1))
    if h.shape[1] != omega.shape[1] or omega.shape[0] not in (1, h.shape[0]):
        raise ShapeError(f"classifier: representations {h.shape} incompatible with weights {omega.shape}")
    return tsum(mul(reshape(h, h.shape + (1,)), omega), axis=1)


def classify(h, omega) -> np.ndarray:
    """Posterior class distribution(s) ``softmax(omega^T h)``."""
    single = (h.ndim if isinstance(h, Tensor) else np.ndim(h)) == 1
    post = softmax(classifier_logits(h, omega).data, axis=1)
    return post[0] if single else post


def supervised_loss(x, labels: Sequence[int], reduction: str = "sum", from_logits: bool = False) -> Tensor:
    """Negative log-likelihood of the true classes.

    ``x`` holds posteriors (B, C), or logits when ``from_logits`` is set (the
    numerically stable path used during training).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != len(labels):
        raise ShapeError(f"supervised_loss: scores {x.shape} vs {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[1]):
        raise DataError(f"labels must lie in [0, {x.shape[1]})")
    onehot = _one_hot(labels, x.shape[1])
    if from_logits:
        picked = tsum(mul(log_softmax(x, axis=1), onehot), axis=1)
    else:
        # select first so zero probabilities of other classes never reach log
        picked = log(tsum(mul(x, onehot), axis=1))
    return _reduce(-picked, reduction)


def combined_loss(contrastive: Tensor, supervised: Tensor) -> Tensor:
    return contrastive + supervised


@dataclass
class PcpModel:
    encoder: Encoder
    hypernet: Hypernetwork
    bank: PrototypeBank
    temperature: float = 0.1
    cosine_eps: float = 1e-8

    @property
    def embedding_dim(self) -> int:
        return self.encoder.embedding_dim

    @property
    def num_classes(self) -> int:
        return self.hypernet.num_classes

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.hypernet.parameters() + [self.bank.vectors]

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + [self.hypernet.weight.data, self.hypernet.bias.data, self.bank.vectors.data]

    def encode(self, frames, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.encoder(frames, training, rng)

    def represent(self, frames, batch_size: int = 512) -> np.ndarray:
        """Eval-mode representations as a plain array, computed in chunks."""
        from pcp.autodiff import no_grad

        frames = np.asarray(frames)
        if frames.ndim == 1:
            frames = frames[None, :]
        out = []
        with no_grad():
            for start in range(0, len(frames), batch_size):
                out.append(self.encoder(frames[start : start + batch_size], training=False).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.embedding_dim))


def build_model(
    patient_ids: Sequence[int],
    embedding_dim: int,
    num_classes: int,
    temperature: float = 0.1,
    seed: int = 0,
    input_length: int = FRAME_LEN,
) -> PcpModel:
    seeds = np.random.SeedSequence(seed).spawn(3)
    enc = Encoder(embedding_dim, input_length, seed=int(seeds[0].generate_state(1)[0]))
    hyper = Hypernetwork(embedding_dim, num_classes, seed=int(seeds[1].generate_state(1)[0]))
    bank = PrototypeBank.initialize(patient_ids, embedding_dim, seed=int(seeds[2].generate_state(1)[0]))
    return PcpModel(enc, hyper, bank, temperature)


def batch_losses(
    model: PcpModel,
    frames,
    owners: Sequence[int],
    labels: Sequence[int],
    reduction: str = "sum",
    training: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Training-path forward: classifier weights come from each representation itself.

    Returns (contrastive, supervised, logits).
    """
    h = model.encode(frames, training, rng)
    con = contrastive_loss(h, model.bank, owners, model.temperature, reduction, eps=model.cosine_eps)
    logits = classifier_logits(h, hypernet_generate(h, model.hypernet))
    sup = supervised_loss(logits, labels, reduction, from_logits=True)
    return con, sup, logits


# -- checkpoint ------------------------------------------------------------

CKPT_MAGIC = b"PCPM"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIIIId")


def model_to_bytes(model: PcpModel) -> bytes:
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC,
        CKPT_VERSION,
        model.embedding_dim,
        model.num_classes,
        len(model.bank),
        model.encoder.input_length,
        model.temperature,
    )
    body = [np.asarray(model.bank.patient_ids, dtype="<u4").tobytes()]
    body += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in model.arrays()]
    return header + b"".join(body)


def model_from_bytes(buf: bytes) -> PcpModel:
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_CKPT_HEADER.size} bytes", len(buf))
    magic, version, e, c, p, input_length, temperature = _CKPT_HEADER.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if e < 1 or c < 1 or p < 1 or not temperature > 0:
        raise FormatError(f"invalid header values E={e} C={c} P={p} tau={temperature}", 6)
    try:
        model = build_model(np.arange(p), e, c, temperature, input_length=input_length)
    except ShapeError as exc:
        raise FormatError(str(exc), 18) from None
    offset = _CKPT_HEADER.size
    arrays = model.arrays()
    need = offset + 4 * p + 8 * sum(a.size for a in arrays)
    if len(buf) != need:
        what = "truncated" if len(buf) < need else "oversized"
        raise FormatError(f"{what} checkpoint: {len(buf)} bytes, expected {need}", min(len(buf), need))
    ids = np.frombuffer(buf, dtype="<u4", count=p, offset=offset).astype(np.int64)
    offset += 4 * p
    for a in arrays:
        a[...] = np.frombuffer(buf, dtype="<f8", count=a.size, offset=offset).reshape(a.shape)
        offset += 8 * a.size
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise FormatError("non-finite parameter values", _CKPT_HEADER.size + 4 * p)
    model.bank = PrototypeBank(model.bank.vectors, ids)
    return model


def save_checkpoint(model: PcpModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_checkpoint(path: str | Path) -> PcpModel:
    return model_from_bytes(Path(path).read_bytes())
