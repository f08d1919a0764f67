"""Network operations on :class:`Tensor`: convolution, pooling, rotation,
softmax variants, normalization."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` ([c,h,w] or [n,c,h,w]) with ``kernels`` [co,ci,k,k].

    Output side is ``(side + 2*pad - k) // stride + 1``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be rank 4 [c_out,c_in,k,k], got shape {kernels.shape}")
    co, ci, kh, kw = kernels.shape
    if kh != kw:
        raise ValueError(f"kernel axis 3 (width {kw}) must equal axis 2 (height {kh})")
    if kh % 2 != 1:
        raise ValueError(f"kernel side must be odd, got {kh}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ValueError(f"input must be [c,h,w] or [n,c,h,w], got shape {x.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if c != ci:
        raise ValueError(f"channel axis mismatch: input has {c} channels, kernels expect {ci}")
    if h + 2 * pad < kh or w + 2 * pad < kh:
        raise ValueError(f"spatial axes ({h},{w}) too small for kernel {kh} with pad {pad}")
    k, s = kh, stride
    ho, wo = conv_output_size(h, k, s, pad), conv_output_size(w, k, s, pad)
    # channels-last im2col: rows are output pixels, columns ordered (i, j, c)
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + w, :] = xd.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(co, k * k * c)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gmat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        gk = None
        if kernels.requires_grad:
            gk = np.ascontiguousarray((gmat.T @ cols).reshape(co, k, k, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, k, k, c)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += gcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))
            if single:
                gx = gx[0]
        return gx, gk

    return make(out, (x, kernels), backward, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes: [..., c, h, w] -> [..., c]."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"global_avg_pool needs [..., c, h, w], got shape {x.shape}")
    h, w = x.shape[-2:]
    inv = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g[..., None, None] * inv, x.shape).copy(),)

    return make(x.data.mean(axis=(-2, -1)), (x,), backward, "gap")


def rotate90(x: Tensor, times: int) -> Tensor:
    """Rotate the two trailing axes counter-clockwise by ``times`` quarter turns.

    One turn sends ``x[..., u, v]`` to ``out[..., w-1-v, u]``.
    """
    if times not in (0, 1, 2, 3):
        raise ValueError(f"times must be in {{0,1,2,3}}, got {times}")
    x = as_tensor(x)
    out = np.ascontiguousarray(np.rot90(x.data, times, axes=(-2, -1)))
    return make(out, (x,), lambda g: (np.ascontiguousarray(np.rot90(g, -times, axes=(-2, -1))),),
                "rot90")


def flip_horizontal(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return make(np.ascontiguousarray(x.data[..., ::-1]), (x,),
                lambda g: (np.ascontiguousarray(g[..., ::-1]),), "hflip")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), backward, "log_softmax")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm)
    out = x.data / denom

    def backward(g):
        proj = np.where(clipped, 0.0, (g * out).sum(axis=axis, keepdims=True))
        return ((g - out * proj) / denom,)

    return make(out, (x,), backward, "l2_normalize")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis except axis 1 (features / channels).

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    In eval mode the running buffers are used and nothing is mutated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ValueError(f"batch_norm expects [n, c, ...], got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    gm, bt = gamma.data.reshape(bshape), beta.data.reshape(bshape)

    if not training:
        inv_std = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv_std
        out = gm * xhat + bt

        def backward_eval(g):
            return (g * gm * inv_std,
                    (g * xhat).sum(axis=axes).reshape(gamma.shape),
                    g.sum(axis=axes).reshape(beta.shape))

        return make(out, (x, gamma, beta), backward_eval, "batch_norm_eval")

    m = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = gm * xhat + bt
    unbiased = var.reshape(-1) * (m / (m - 1)) if m > 1 else var.reshape(-1)
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu.reshape(-1)
    running_var *= momentum
    running_var += (1.0 - momentum) * unbiased

    def backward(g):
        dxhat = g * gm
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        gx = inv_std / m * (m * dxhat - s1 - xhat * s2)
        return (gx,
                (g * xhat).sum(axis=axes).reshape(gamma.shape),
                g.sum(axis=axes).reshape(beta.shape))

    return make(out, (x, gamma, beta), backward, "batch_norm")

