"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pcp.autodiff.tensor import Tensor, checked, tsum, mul


def nudge_from_zero(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Push entries within ``margin`` of zero out to +/- ``margin`` (ReLU kink)."""
    x = np.array(x, dtype=np.float64)
    near = np.abs(x) < margin
    x[near] = np.where(x[near] >= 0, margin, -margin)
    return x


def nudge_pool_ties(x: np.ndarray, window: int, margin: float = 1e-3) -> np.ndarray:
    """Separate the two largest entries of every pooling window by at least ``margin``."""
    x = np.array(x, dtype=np.float64)
    length = x.shape[-1] // window * window
    blocks = x[..., :length].reshape(*x.shape[:-1], -1, window)
    if window > 1:
        order = np.sort(blocks, axis=-1)
        gap = order[..., -1] - order[..., -2]
        idx = blocks.argmax(axis=-1)
        bump = np.where(gap < margin, margin - gap, 0.0)
        np.put_along_axis(blocks, idx[..., None], np.take_along_axis(blocks, idx[..., None], -1) + bump[..., None], -1)
    x[..., :length] = blocks.reshape(*x.shape[:-1], length)
    return x


def finite_diff_gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
    max_coords: int | None = None,
) -> float:
    """Max over all input coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``fn`` maps tensors to a tensor; non-scalar outputs are contracted with a
    fixed random vector so that every output coordinate contributes. With
    ``max_coords`` only a seeded random sample of that many coordinates per
    input is differenced. Errors are reported, never raised.
    """
    points = [np.array(x, dtype=np.float64) for x in inputs]
    probe: list[np.ndarray] = []

    def scalar(arrays, track: bool) -> Tensor:
        ts = [Tensor(a, requires_grad=track) for a in arrays]
        out = fn(*ts)
        if out.size != 1:
            if not probe:
                probe.append(np.random.default_rng(seed).standard_normal(out.shape))
            out = tsum(mul(out, Tensor(probe[0])))
        return out, ts

    try:
        out, ts = scalar(points, True)
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
        worst = 0.0
        with checked(False):
            for k, x in enumerate(points):
                flat = x.reshape(-1)
                coords = range(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.random.default_rng([seed, k]).choice(flat.size, max_coords, replace=False)
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + eps
                    plus = scalar(points, False)[0].item()
                    flat[i] = orig - eps
                    minus = scalar(points, False)[0].item()
                    flat[i] = orig
                    numeric = (plus - minus) / (2.0 * eps)
                    err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                    worst = max(worst, err)
        return float(worst) if np.isfinite(worst) else float("inf")
    except Exception:
        return float("inf")
