"""Numerical kernels for the layer vocabulary, with hand-written backward passes.

All functions work channels-last: activations are (batch, x, y, z, channels).
Convolutions use zero "same" padding so spatial extents never change except
through pooling/upsampling. Kernels are indexed (in_channel, dx, dy, dz,
out_channel) so an im2col row multiplies the reshaped kernel directly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _im2col(x: np.ndarray) -> np.ndarray:
    """(n, sx, sy, sz, c) -> (n*sx*sy*sz, c*27) rows of 3^3 zero-padded windows."""
    n, sx, sy, sz, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))  # (n,sx,sy,sz,c,3,3,3)
    return win.reshape(n * sx * sy * sz, c * 27)


def conv3d_forward(x, kernel, bias):
    n, sx, sy, sz, cin = x.shape
    f = kernel.shape[-1]
    out = _im2col(x) @ kernel.reshape(cin * 27, f)
    out += bias
    return out.reshape(n, sx, sy, sz, f)


def conv3d_backward(dout, x, kernel):
    n, sx, sy, sz, cin = x.shape
    f = kernel.shape[-1]
    dmat = dout.reshape(-1, f)
    dkernel = (_im2col(x).T @ dmat).reshape(kernel.shape)
    dbias = dmat.sum(axis=0)
    # full correlation: scatter each kernel tap's contribution back onto the pad
    dcols = dmat @ kernel.reshape(cin * 27, f).T
    dcols = dcols.reshape(n, sx, sy, sz, cin, 3, 3, 3)
    dxp = np.zeros((n, sx + 2, sy + 2, sz + 2, cin), dtype=dout.dtype)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                dxp[:, dx : dx + sx, dy : dy + sy, dz : dz + sz, :] += dcols[
                    :, :, :, :, :, dx, dy, dz
                ]
    return dxp[:, 1:-1, 1:-1, 1:-1, :], dkernel, dbias


def pointwise_forward(x, kernel, bias):
    return x @ kernel + bias


def pointwise_backward(dout, x, kernel):
    cin, f = kernel.shape
    dmat = dout.reshape(-1, f)
    dkernel = x.reshape(-1, cin).T @ dmat
    dbias = dmat.sum(axis=0)
    return dout @ kernel.T, dkernel, dbias


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dout, pre_activation):
    return dout * (pre_activation > 0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel normalization over batch + spatial axes.

    Returns (out, (mean, var)); in train mode these are the batch statistics
    the caller folds into the running averages, in inference mode they are the
    running statistics actually used.
    """
    if train:
        mean = np.mean(x, axis=(0, 1, 2, 3), dtype=np.float64).astype(x.dtype)
        var = np.var(x, axis=(0, 1, 2, 3), dtype=np.float64).astype(x.dtype)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    out = (x - mean) * (gamma * inv) + beta
    return out, (mean, var)


def batchnorm_backward(dout, x, gamma, stats, train: bool):
    mean, var = stats
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    dgamma = np.sum(dout * xhat, axis=(0, 1, 2, 3))
    dbeta = np.sum(dout, axis=(0, 1, 2, 3))
    if train:
        m = dout.size // dout.shape[-1]
        dx = (gamma * inv) * (dout - dbeta / m - xhat * (dgamma / m))
    else:
        dx = dout * (gamma * inv)
    return dx, dgamma, dbeta


def _pool_windows(x):
    n, sx, sy, sz, c = x.shape
    r = x.reshape(n, sx // 2, 2, sy // 2, 2, sz // 2, 2, c)
    r = r.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return r.reshape(n, sx // 2, sy // 2, sz // 2, 8, c)


def maxpool2_forward(x):
    """2^3 stride-2 max pooling; ties break to the lowest window index."""
    if any(s % 2 for s in x.shape[1:4]):
        raise ValueError(f"spatial extents {x.shape[1:4]} not divisible by 2")
    windows = _pool_windows(x)
    idx = np.argmax(windows, axis=4)
    out = np.take_along_axis(windows, idx[:, :, :, :, None, :], axis=4)[:, :, :, :, 0, :]
    return out, idx


def maxpool2_backward(dout, idx, in_shape):
    n, sx, sy, sz, c = in_shape
    dwin = np.zeros((n, sx // 2, sy // 2, sz // 2, 8, c), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[:, :, :, :, None, :], dout[:, :, :, :, None, :], axis=4)
    dwin = dwin.reshape(n, sx // 2, sy // 2, sz // 2, 2, 2, 2, c)
    dwin = dwin.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return dwin.reshape(in_shape)


def repeat2_forward(x):
    """Nearest-neighbor x2 repetition along each spatial axis."""
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def repeat2_backward(dout):
    n, sx, sy, sz, c = dout.shape
    r = dout.reshape(n, sx // 2, 2, sy // 2, 2, sz // 2, 2, c)
    return r.sum(axis=(2, 4, 6))


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels, class_weights=None):
    """Mean weighted negative log-likelihood over every voxel.

    logits: (n, sx, sy, sz, k); labels: (n, sx, sy, sz) integer classes.
    Returns (loss, dlogits).
    """
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} != logits spatial {logits.shape[:-1]}")
    k = logits.shape[-1]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    onehot_idx = labels[..., None]
    logp_true = np.take_along_axis(logp, onehot_idx, axis=-1)[..., 0]
    n_vox = labels.size
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=logits.dtype)
        if w.shape != (k,) or (w <= 0).any():
            raise ValueError(f"class_weights must be {k} positive values")
        wv = w[labels]
    else:
        wv = None
    if wv is None:
        loss = -logp_true.mean()
    else:
        loss = -(wv * logp_true).sum() / n_vox
    dlogits = np.exp(logp)
    np.put_along_axis(
        dlogits, onehot_idx, np.take_along_axis(dlogits, onehot_idx, axis=-1) - 1.0, axis=-1
    )
    if wv is None:
        dlogits /= n_vox
    else:
        dlogits *= (wv / n_vox)[..., None]
    return float(loss), dlogits
