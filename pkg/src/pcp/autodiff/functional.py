"""Neural-network primitives with analytic gradients.

Layouts follow the usual convention: sequences are ``(batch, channels,
length)``; linear weights are ``(in_features, out_features)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pcp.autodiff.tensor import Tensor, as_tensor
from pcp.errors import NumericError, ShapeError


def conv1d_out_len(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def maxpool1d_out_len(length: int, window: int) -> int:
    return length // window


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-D cross-correlation.

    ``x`` is (N, C_in, L), ``weight`` is (C_out, C_in, K); the output is
    (N, C_out, floor((L - K) / stride) + 1).
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    n, c_in, length = x.shape
    c_out, _, k = weight.shape
    if length < k:
        raise ShapeError(f"conv1d: input length {length} shorter than kernel {k}")
    l_out = conv1d_out_len(length, k, stride)
    # (N, C_in, L_out, K)
    windows = sliding_window_view(x.data, k, axis=2)[:, :, ::stride][:, :, :l_out]
    cols = windows.transpose(0, 2, 1, 3).reshape(n * l_out, c_in * k)
    w2 = weight.data.reshape(c_out, c_in * k)
    out = (cols @ w2.T).reshape(n, l_out, c_out).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(n * l_out, c_out)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ w2).reshape(n, l_out, c_in, k)
        gx = np.zeros_like(x.data)
        stop = stride * (l_out - 1) + 1
        for j in range(k):
            gx[:, :, j : j + stop : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv1d")


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and length axes.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like common frameworks).
    """
    if x.ndim != 3 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm1d: input {x.shape} incompatible with {gamma.shape[0]} channels")
    axes = (0, 2)
    if training:
        count = x.shape[0] * x.shape[2]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if count > 1:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None]
        if training:
            gx = inv_std[None, :, None] * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), backward, "batchnorm1d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def max_pool1d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == window), trailing remainder dropped."""
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d: expected (N, C, L) input, got {x.shape}")
    n, c, length = x.shape
    l_out = maxpool1d_out_len(length, window)
    if l_out == 0:
        raise ShapeError(f"maxpool1d: input length {length} shorter than window {window}")
    blocks = x.data[:, :, : l_out * window].reshape(n, c, l_out, window)
    idx = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, l_out, window))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=3)
        gx = np.zeros_like(x.data)
        gx[:, :, : l_out * window] = gb.reshape(n, c, l_out * window)
        return (gx,)

    return Tensor._result(out, (x,), backward, "maxpool1d")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1 / (1 - rate) at train time."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        rng = np.random.default_rng()
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x of shape (N, in) and weight (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data.T, x.data.T @ g, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "linear")


def _row_norms(a: np.ndarray, eps: float, op: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((a * a).sum(axis=1))
    if eps == 0.0 and np.any(norms == 0.0):
        raise NumericError(f"{op}: zero-norm row, cosine similarity undefined")
    clamped = norms < eps
    return np.where(clamped, eps, norms), clamped


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """Matrix of cosines between the rows of ``a`` (m, E) and ``b`` (n, E).

    With ``eps == 0`` a zero-norm row raises; otherwise norms are clamped
    from below at ``eps``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    na, ca = _row_norms(a.data, eps, "cosine_similarity")
    nb, cb = _row_norms(b.data, eps, "cosine_similarity")
    ah = a.data / na[:, None]
    bh = b.data / nb[:, None]
    out = ah @ bh.T

    def backward(g):
        ga = g @ bh
        ga = (ga - np.where(ca, 0.0, (ga * ah).sum(axis=1))[:, None] * ah) / na[:, None]
        gb = g.T @ ah
        gb = (gb - np.where(cb, 0.0, (gb * bh).sum(axis=1))[:, None] * bh) / nb[:, None]
        return ga, gb

    return Tensor._result(out, (a, b), backward, "cosine_similarity")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward, "log_softmax")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax (no graph), stable for large logits."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of Euclidean distances between rows of ``a`` (m, E) and ``b`` (n, E).

    The gradient at a zero distance is taken as zero (a valid subgradient).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"euclidean_distance: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.sqrt((diff * diff).sum(axis=2))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(out > 0, g / out, 0.0)
        d = coef[:, :, None] * diff
        return d.sum(axis=1), -d.sum(axis=0)

    return Tensor._result(out, (a, b), backward, "euclidean_distance")
