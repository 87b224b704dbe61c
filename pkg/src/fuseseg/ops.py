"""Layer primitives: convolution, batch norm, activations, bilinear
resampling, and softmax cross-entropy.

Conventions, fixed so results are reproducible:

* conv2d computes cross-correlation (no kernel flip), im2col + GEMM, with a
  fixed accumulation order.
* bilinear resampling uses half-pixel sample centers (align-corners false)
  with edge clamping; source position for output index ``i`` is
  ``(i + 0.5) * in/out - 0.5``.
* relu's derivative at exactly 0 is 0.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ShapeError
from .tensor import Tensor, accumulate, push


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of NCHW input with OIHW weights.

    Output spatial extent is ``floor((in + 2*padding - kernel)/stride) + 1``.
    Differentiable w.r.t. input, weights and bias.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: need NCHW x and OIHW weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {i}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride/padding ({stride}, {padding})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit {h}x{w} input (padding {padding})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, ho, wo, kh, kw) -> rows of flattened receptive fields
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)))

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        if bias is not None:
            accumulate(bias, g2.sum(axis=0))
        if weight.requires_grad:
            accumulate(weight, (g2.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), x.dtype)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += \
                        dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            accumulate(x, dxp)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return push(out, inputs, bwd)


def batch_norm2d(x: Tensor, weight: Tensor, bias: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    Training mode standardizes with batch statistics over (N, H, W) and
    updates the running buffers in place with the given momentum; inference
    mode uses the running buffers.  Variances are population (biased)
    variances throughout.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm2d: need NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"batch_norm2d: affine shapes {weight.shape}/{bias.shape} != ({c},)")
    m = n * h * w
    if training and m == 1:
        raise ShapeError("batch_norm2d: batch statistics undefined for a single value per channel")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu.astype(running_mean.dtype)
        running_var[:] = (1.0 - momentum) * running_var + momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu[:, None, None]) * inv_std[:, None, None]
    out = Tensor((weight.data[:, None, None] * xhat + bias.data[:, None, None]).astype(x.dtype))

    def bwd(g):
        accumulate(bias, g.sum(axis=(0, 2, 3)))
        accumulate(weight, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * weight.data[:, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[:, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[:, None, None]
        accumulate(x, dx.astype(x.dtype))

    return push(out, (x, weight, bias), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def bwd(g):
        accumulate(x, g * mask)

    return push(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(x.dtype)
    out = Tensor(s)

    def bwd(g):
        accumulate(x, g * s * (1.0 - s))

    return push(out, (x,), bwd)


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic 1-d bilinear interpolation matrix (n_out, n_in),
    half-pixel centers, edges clamped."""
    idx = np.arange(n_out)
    src = np.clip((idx + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w_hi = (src - lo).astype(dtype)
    m = np.zeros((n_out, n_in), dtype)
    m[idx, lo] += 1.0 - w_hi
    m[idx, hi] += w_hi
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize NCHW spatial extents by separable bilinear interpolation."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize: need NCHW input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad target extents ({out_h}, {out_w})")
    _, _, h, w = x.shape
    rmat = interp_matrix(out_h, h, x.dtype)
    cmat = interp_matrix(out_w, w, x.dtype)
    t = np.tensordot(x.data, rmat, axes=([2], [1]))          # (n, c, w, ho)
    y = np.tensordot(t, cmat, axes=([2], [1]))                # (n, c, ho, wo)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        t2 = np.tensordot(g, rmat, axes=([2], [0]))           # (n, c, wo, h)
        dx = np.tensordot(t2, cmat, axes=([2], [0]))          # (n, c, h, w)
        accumulate(x, np.ascontiguousarray(dx))

    return push(out, (x,), bwd)


def bilinear_upsample(x: Tensor, scale: int = 2) -> Tensor:
    """Double (or ``scale``-fold) the spatial extents of an NCHW tensor."""
    if scale < 1:
        raise ShapeError(f"bilinear_upsample: scale must be >= 1, got {scale}")
    _, _, h, w = x.shape
    return bilinear_resize(x, h * scale, w * scale)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over all pixels of -log softmax(logits)[label].

    ``logits`` is (N, K, H, W); ``labels`` is an integer (N, H, W) map with
    values in [0, K).
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 4:
        raise ShapeError(f"cross_entropy: logits must be NCHW, got {logits.shape}")
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != {(n, h, w)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"cross_entropy: labels must be integers, got {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"cross_entropy: labels outside [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    m = n * h * w
    out = Tensor(np.asarray(-picked.sum() / m, dtype=logits.dtype))

    def bwd(g):
        gl = np.exp(logp)
        ni = np.arange(n)[:, None, None]
        hi = np.arange(h)[None, :, None]
        wi = np.arange(w)[None, None, :]
        gl[ni, labels, hi, wi] -= 1.0
        accumulate(logits, (gl * (g / m)).astype(logits.dtype))

    return push(out, (logits,), bwd)
