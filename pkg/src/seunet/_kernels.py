"""Raw numpy 3-D convolution kernels.

Everything funnels into ``correlate_valid``, a stride-1 cross-correlation on
an implicitly zero-padded input. The padded volume is flattened so that each
kernel offset (a, b, e) becomes a constant shift ``a*H*W + b*W + e`` in the
flat index; the W-axis offsets are pre-expanded into the contraction axis,
which leaves kd*kh contiguous-slice GEMMs per sample. Output columns that
wrap across rows are computed and then discarded.

Strided convolutions, input gradients and transposed convolutions are
expressed through zero-dilation of the stride-1 grid.
"""

from __future__ import annotations

import numpy as np

Triple = tuple[int, int, int]

# cap on the expanded operand per depth chunk
_CHUNK_BYTES = 128 << 20


def triple(v) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t  # type: ignore[return-value]


def _padded_buffer(x: np.ndarray, lo: Triple, hi: Triple, tail: int) -> tuple[np.ndarray, Triple]:
    n, c, d, h, w = x.shape
    dp, hp, wp = d + lo[0] + hi[0], h + lo[1] + hi[1], w + lo[2] + hi[2]
    buf = np.zeros((n, c, dp * hp * wp + tail), dtype=x.dtype)
    grid = buf[:, :, : dp * hp * wp].reshape(n, c, dp, hp, wp)
    grid[:, :, lo[0] : lo[0] + d, lo[1] : lo[1] + h, lo[2] : lo[2] + w] = x
    return buf, (dp, hp, wp)


def _expand_w(row: np.ndarray, start: int, length: int, kw: int) -> np.ndarray:
    """Rows ``(c, e)`` holding ``row[c, start + e : start + e + length]``."""
    c = row.shape[0]
    out = np.empty((c, kw, length), dtype=row.dtype)
    for e in range(kw):
        out[:, e] = row[:, start + e : start + e + length]
    return out.reshape(c * kw, length)


def _depth_chunk(c: int, kw: int, plane: int, itemsize: int, do: int) -> int:
    return max(1, min(do, _CHUNK_BYTES // max(1, c * kw * plane * itemsize)))


def correlate_valid(x: np.ndarray, w: np.ndarray, lo: Triple, hi: Triple) -> np.ndarray:
    """Stride-1 cross-correlation of zero-padded ``x`` [N,C,D,H,W] with ``w`` [O,C,kd,kh,kw]."""
    n, c = x.shape[:2]
    o, _, kd, kh, kw = w.shape
    tail = (kh - 1) * (x.shape[4] + lo[2] + hi[2]) + kw
    buf, (dp, hp, wp) = _padded_buffer(x, lo, hi, tail)
    do, ho, wo = dp - kd + 1, hp - kh + 1, wp - kw + 1
    if min(do, ho, wo) < 1:
        raise ValueError(f"kernel {w.shape[2:]} larger than padded input {(dp, hp, wp)}")
    plane = hp * wp
    wr = np.ascontiguousarray(w.transpose(2, 3, 0, 1, 4).reshape(kd, kh, o, c * kw))
    out = np.empty((n, o, do, ho, wo), dtype=np.result_type(x, w))
    step = _depth_chunk(c, kw, plane, x.itemsize, do)
    for i in range(n):
        for d0 in range(0, do, step):
            d1 = min(do, d0 + step)
            length = (d1 - d0) * plane
            span = length + (kd - 1) * plane + (kh - 1) * wp
            xe = _expand_w(buf[i], d0 * plane, span, kw)
            acc = np.zeros((o, length), dtype=out.dtype)
            for a in range(kd):
                for b in range(kh):
                    s = a * plane + b * wp
                    acc += wr[a, b] @ xe[:, s : s + length]
            out[i, :, d0:d1] = acc.reshape(o, d1 - d0, hp, wp)[:, :, :ho, :wo]
    return out


def correlate_weight(x: np.ndarray, g: np.ndarray, lo: Triple, hi: Triple, kernel: Triple) -> np.ndarray:
    """Gradient of ``correlate_valid`` w.r.t. the kernel, given output gradient ``g``."""
    n, c = x.shape[:2]
    o = g.shape[1]
    kd, kh, kw = kernel
    tail = (kh - 1) * (x.shape[4] + lo[2] + hi[2]) + kw
    buf, (dp, hp, wp) = _padded_buffer(x, lo, hi, tail)
    do, ho, wo = dp - kd + 1, hp - kh + 1, wp - kw + 1
    if g.shape[2:] != (do, ho, wo):
        raise ValueError(f"output gradient shape {g.shape[2:]} does not match {(do, ho, wo)}")
    plane = hp * wp
    dw = np.zeros((kd, kh, o, c * kw), dtype=np.result_type(x, g))
    step = _depth_chunk(c, kw, plane, x.itemsize, do)
    for i in range(n):
        for d0 in range(0, do, step):
            d1 = min(do, d0 + step)
            length = (d1 - d0) * plane
            span = length + (kd - 1) * plane + (kh - 1) * wp
            xe = _expand_w(buf[i], d0 * plane, span, kw)
            gg = np.zeros((o, d1 - d0, hp, wp), dtype=dw.dtype)
            gg[:, :, :ho, :wo] = g[i, :, d0:d1]
            gg = gg.reshape(o, length)
            for a in range(kd):
                for b in range(kh):
                    s = a * plane + b * wp
                    dw[a, b] += gg @ xe[:, s : s + length].T
    return np.ascontiguousarray(dw.reshape(kd, kh, o, c, kw).transpose(2, 3, 0, 1, 4))


def _dilate(g: np.ndarray, stride: Triple, extent: Triple) -> np.ndarray:
    if stride == (1, 1, 1) and g.shape[2:] == extent:
        return g
    out = np.zeros(g.shape[:2] + extent, dtype=g.dtype)
    d, h, w = g.shape[2:]
    sd, sh, sw = stride
    out[:, :, : d * sd : sd, : h * sh : sh, : w * sw : sw] = g
    return out


def conv_output_extent(size: Triple, kernel: Triple, stride: Triple, padding: Triple) -> Triple:
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(size, kernel, stride, padding))  # type: ignore[return-value]


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: Triple, padding: Triple) -> np.ndarray:
    out = correlate_valid(x, w, padding, padding)
    if stride != (1, 1, 1):
        out = np.ascontiguousarray(out[:, :, :: stride[0], :: stride[1], :: stride[2]])
    return out


def conv3d_grad_input(g: np.ndarray, w: np.ndarray, in_extent: Triple, stride: Triple, padding: Triple) -> np.ndarray:
    """Adjoint of ``conv3d_forward`` with respect to its input (also the transposed convolution)."""
    kernel = w.shape[2:]
    full = tuple(n + 2 * p - k + 1 for n, p, k in zip(in_extent, padding, kernel))
    g1 = _dilate(g, stride, full)  # type: ignore[arg-type]
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    lo = tuple(max(0, k - 1 - p) for k, p in zip(kernel, padding))
    # padding wider than k-1 is handled by computing a border and cropping it
    crop = tuple(max(0, p - (k - 1)) for k, p in zip(kernel, padding))
    hi = tuple(n + 2 * c - f - l + k - 1 for n, c, f, l, k in zip(in_extent, crop, full, lo, kernel))
    dx = correlate_valid(g1, flipped, lo, hi)  # type: ignore[arg-type]
    if any(crop):
        dx = dx[:, :, crop[0] : crop[0] + in_extent[0], crop[1] : crop[1] + in_extent[1], crop[2] : crop[2] + in_extent[2]]
    return np.ascontiguousarray(dx)


def conv3d_grad_weight(x: np.ndarray, g: np.ndarray, kernel: Triple, stride: Triple, padding: Triple) -> np.ndarray:
    full = tuple(n + 2 * p - k + 1 for n, p, k in zip(x.shape[2:], padding, kernel))
    return correlate_weight(x, _dilate(g, stride, full), padding, padding, kernel)  # type: ignore[arg-type]


def conv3d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: Triple, padding: Triple) -> np.ndarray:
    """Direct nested-loop cross-correlation in float64; the correctness oracle."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, d, h, wd = x.shape
    o, c2, kd, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {c2}")
    do, ho, wo = conv_output_extent((d, h, wd), (kd, kh, kw), stride, padding)
    if min(do, ho, wo) < 1:
        raise ValueError("output extent < 1")
    out = np.zeros((n, o, do, ho, wo))
    for s in range(n):
        for oc in range(o):
            for z in range(do):
                for y in range(ho):
                    for q in range(wo):
                        acc = 0.0 if b is None else float(b[oc])
                        for ic in range(c):
                            for a in range(kd):
                                zi = z * stride[0] - padding[0] + a
                                if zi < 0 or zi >= d:
                                    continue
                                for bb in range(kh):
                                    yi = y * stride[1] - padding[1] + bb
                                    if yi < 0 or yi >= h:
                                        continue
                                    for e in range(kw):
                                        qi = q * stride[2] - padding[2] + e
                                        if 0 <= qi < wd:
                                            acc += w[oc, ic, a, bb, e] * x[s, ic, zi, yi, qi]
                        out[s, oc, z, y, q] = acc
    return out
