"""Independent reference implementations used as test oracles.

Everything here is written directly from the mathematical definitions with
plain numpy loops or scipy, sharing no code with the package.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import map_coordinates


def conv3d_loops(x, w, b, stride, padding):
    """Direct cross-correlation with zero padding, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, *size = x.shape
    cout, _, *k = w.shape
    out_shape = [(s + 2 * p - kk) // st + 1 for s, p, kk, st in zip(size, padding, k, stride)]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    y = np.zeros((n, cout, *out_shape))
    for i in range(out_shape[0]):
        for j in range(out_shape[1]):
            for l in range(out_shape[2]):
                a, c, e = i * stride[0], j * stride[1], l * stride[2]
                window = xp[:, :, a : a + k[0], c : c + k[1], e : e + k[2]]
                y[:, :, i, j, l] = np.einsum("nidhw,oidhw->no", window, w)
    if b is not None:
        y += np.asarray(b, dtype=np.float64)[None, :, None, None, None]
    return y


def conv_transposed_scatter(x, w, b, stride, padding, output_padding):
    """Transposed convolution by scattering every input voxel times the kernel. ``w`` is [Cin, Cout, k, k, k]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, *size = x.shape
    _, cout, *k = w.shape
    full = [(s - 1) * st + kk for s, st, kk in zip(size, stride, k)]
    y = np.zeros((n, cout, *[f + op for f, op in zip(full, output_padding)]))
    for i in range(size[0]):
        for j in range(size[1]):
            for l in range(size[2]):
                a, c, e = i * stride[0], j * stride[1], l * stride[2]
                y[:, :, a : a + k[0], c : c + k[1], e : e + k[2]] += np.einsum("ni,iodhw->nodhw", x[:, :, i, j, l], w)
    p = padding
    y = y[:, :, p[0] : y.shape[2] - p[0], p[1] : y.shape[3] - p[1], p[2] : y.shape[4] - p[2]]
    out = [(s - 1) * st - 2 * pp + kk + op for s, st, pp, kk, op in zip(size, stride, padding, k, output_padding)]
    y = y[:, :, : out[0], : out[1], : out[2]]
    if b is not None:
        y = y + np.asarray(b, dtype=np.float64)[None, :, None, None, None]
    return y


def resize_align_corners(x: np.ndarray, size) -> np.ndarray:
    """Trilinear align-corners resize of the last three axes via scipy's order-1 spline."""
    x = np.asarray(x, dtype=np.float64)
    axes = []
    for n_in, n_out in zip(x.shape[-3:], size):
        if n_out == 1:
            axes.append(np.array([(n_in - 1) / 2.0]))
        else:
            axes.append(np.arange(n_out) * (n_in - 1) / (n_out - 1))
    grid = np.meshgrid(*axes, indexing="ij")
    lead = x.shape[:-3]
    flat = x.reshape(-1, *x.shape[-3:])
    out = np.stack([map_coordinates(v, grid, order=1, mode="nearest") for v in flat])
    return out.reshape(*lead, *size)


def soft_dice(y, p, smooth=1.0) -> float:
    y = np.asarray(y, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    return 1.0 - (2.0 * float(y @ p) + smooth) / (y.sum() + p.sum() + smooth)


def focal(y, p, gamma=2.0, clamp=1e-7, symmetric=False) -> float:
    y = np.asarray(y, dtype=np.float64).ravel()
    p = np.clip(np.asarray(p, dtype=np.float64).ravel(), clamp, 1 - clamp)
    terms = [yi * (1 - pi) ** gamma * math.log(pi) for yi, pi in zip(y, p)]
    if symmetric:
        terms = [t + (1 - yi) * pi**gamma * math.log(1 - pi) for t, yi, pi in zip(terms, y, p)]
    return -sum(terms) / len(terms)


def confusion(pred, gt) -> tuple[int, int, int, int]:
    tp = fp = fn = tn = 0
    for a, b in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def adam_reference(theta, grads, lr_seq, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a float64 vector, one gradient per step."""
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, (g, lr) in enumerate(zip(grads, lr_seq), start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


def lerp_world(values, spacing_in, n_out, spacing_out=1.0):
    """1-D align-corners sampling of a profile over its world extent."""
    values = np.asarray(values, dtype=np.float64)
    n_in = len(values)
    xs = np.arange(n_in) * spacing_in
    span = xs[-1]
    q = np.linspace(0.0, span, n_out) if n_out > 1 else np.array([span / 2])
    return np.interp(q, xs, values)
