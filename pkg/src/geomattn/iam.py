"""Interpretable Attention Module.

A parameter-free spatial attention built from three steps on a nonnegative
activation tensor ``L`` of shape ``[..., c, h, w]``:

1. ``local_softmax``: each activation divided by the exp-sum over its
   ``K x K`` neighbourhood (window clipped at the borders), per channel.
2. ``channel_nms``: each activation divided by the maximum over channels at
   the same location.
3. ``fuse_normalize``: channel-wise max of the product of the two, then
   normalization to a spatial distribution.

All three are differentiable; maxima route their gradient to the first
maximal channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff.tensor import Tensor, as_tensor, make, mul, tmax, tsum

NMS_EPS = 1e-12
DEGENERATE_MASS = 1e-12


@dataclass
class AttentionMaps:
    L: Tensor
    M: Tensor
    G: Tensor
    Q_tilde: Tensor
    Q: Tensor
    K: int
    degenerate: np.ndarray  # bool per map; True where Q fell back to uniform


def _check_window(K: int) -> None:
    if not isinstance(K, (int, np.integer)) or K < 1 or K % 2 != 1:
        raise ValueError(f"neighbourhood side K must be a positive odd integer, got {K!r}")


def local_softmax(L: Tensor, K: int) -> Tensor:
    """Per-channel softmax ratio over the clipped ``K x K`` window around each point."""
    _check_window(K)
    L = as_tensor(L)
    if L.ndim < 2:
        raise ValueError(f"local_softmax needs [..., h, w], got shape {L.shape}")
    if not np.all(np.isfinite(L.data)):
        raise ValueError("local_softmax input must be finite")
    h, w = L.shape[-2:]
    r = K // 2
    lead = ((0, 0),) * (L.ndim - 2)
    Lp = np.pad(L.data, lead + ((r, r), (r, r)), constant_values=-np.inf)
    win = sliding_window_view(Lp, (K, K), axis=(-2, -1))
    wmax = win.max(axis=(-2, -1))
    e = np.exp(win - wmax[..., None, None])
    S = e.sum(axis=(-2, -1))
    M = np.exp(L.data - wmax) / S

    def backward(g):
        a = g * M
        P = e / S[..., None, None]
        gp = np.zeros_like(Lp)
        for i in range(K):
            for j in range(K):
                gp[..., i:i + h, j:j + w] -= a * P[..., i, j]
        return (a + gp[..., r:r + h, r:r + w],)

    return make(M, (L,), backward, "local_softmax")


def channel_nms(L: Tensor) -> Tensor:
    """Ratio of each activation to the channel maximum at its location (plus eps)."""
    L = as_tensor(L)
    if L.ndim < 3:
        raise ValueError(f"channel_nms needs [..., c, h, w], got shape {L.shape}")
    if np.any(L.data < 0):
        raise ValueError("channel_nms requires a nonnegative input (apply ReLU upstream)")
    x = L.data
    idx = np.argmax(x, axis=-3)[..., None, :, :]
    mx = np.take_along_axis(x, idx, axis=-3)
    denom = mx + NMS_EPS
    G = x / denom

    def backward(g):
        gx = g / denom
        through_max = -(g * x).sum(axis=-3, keepdims=True) / denom ** 2
        np.put_along_axis(gx, idx, np.take_along_axis(gx, idx, axis=-3) + through_max, axis=-3)
        return (gx,)

    return make(G, (L,), backward, "channel_nms")


def fuse_normalize(M: Tensor, G: Tensor):
    """Return ``(Q_tilde, Q, degenerate)``.

    ``Q_tilde`` is the channel max of ``M * G``; ``Q`` is ``Q_tilde`` divided by
    its spatial sum. Maps whose total mass is below 1e-12 become uniform and are
    flagged in ``degenerate``.
    """
    M, G = as_tensor(M), as_tensor(G)
    if M.shape != G.shape:
        raise ValueError(f"M and G shapes differ: {M.shape} vs {G.shape}")
    if M.ndim < 3:
        raise ValueError(f"fuse_normalize needs [..., c, h, w], got shape {M.shape}")
    Qt = tmax(mul(M, G), axis=-3)
    S = tsum(Qt, axis=(-2, -1), keepdims=True)
    h, w = Qt.shape[-2:]
    deg = (S.data < DEGENERATE_MASS).astype(np.float64)
    Q = (Qt * (1.0 - deg)) / (S + deg) + deg / (h * w)
    return Qt, Q, deg.reshape(deg.shape[:-2]).astype(bool)


def iam_forward(L: Tensor, K: int) -> AttentionMaps:
    M = local_softmax(L, K)
    G = channel_nms(L)
    Qt, Q, deg = fuse_normalize(M, G)
    return AttentionMaps(L=L, M=M, G=G, Q_tilde=Qt, Q=Q, K=K, degenerate=deg)


def uniform_attention(batch_shape: tuple, h: int, w: int) -> Tensor:
    return Tensor(np.full(tuple(batch_shape) + (h, w), 1.0 / (h * w)))
