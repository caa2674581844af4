"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from pcp.autodiff.tensor import (
    Tensor,
    add,
    as_tensor,
    checked,
    div,
    exp,
    flatten,
    is_checked,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    scale,
    sub,
    tsum,
)
from pcp.autodiff.functional import (
    batch_norm1d,
    conv1d,
    conv1d_out_len,
    cosine_similarity,
    dropout,
    euclidean_distance,
    linear,
    log_softmax,
    max_pool1d,
    maxpool1d_out_len,
    relu,
    softmax,
)
from pcp.autodiff.optim import Adam, AdamState, adam_step
from pcp.autodiff.gradcheck import finite_diff_gradcheck, nudge_from_zero, nudge_pool_ties

__all__ = [name for name in dir() if not name.startswith("_")]
