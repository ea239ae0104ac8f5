"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public functions dispatch on :func:`ctseg._accel.use_numba`.  The
``*_nb`` / ``*_np`` variants are importable so that the benchmark and the
backend-equivalence tests can call both directly.
"""

import numpy as np
from scipy import ndimage

from ._accel import njit, use_numba

# ----------------------------------------------------------------------------
# dilated convolution (same padding, stride 1)
#
# numba path: direct row-blocked loops.  numpy path: per-tap BLAS matmuls
# (im2col for the weight gradient).
# ----------------------------------------------------------------------------


@njit(fastmath=True)
def _axpy(acc, src, wv, n):
    for k in range(n):
        acc[k] += wv * src[k]


@njit(fastmath=True)
def _dot(a, b, n):
    s = a[0] * 0
    for k in range(n):
        s += a[k] * b[k]
    return s


@njit
def _pad_cols(x, p):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h, w + 2 * p), dtype=x.dtype)
    xp[:, :, :, p : p + w] = x
    return xp


@njit
def _conv_nb(x, w, dilation):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ch = kh // 2
    xp = _pad_cols(x, (kw // 2) * dilation)
    out = np.zeros((n, c_out, h, wd), dtype=x.dtype)
    for b in range(n):
        for y in range(h):
            for o in range(c_out):
                row = out[b, o, y]
                for c in range(c_in):
                    for i in range(kh):
                        yy = y + (i - ch) * dilation
                        if yy < 0 or yy >= h:
                            continue
                        src = xp[b, c, yy]
                        for j in range(kw):
                            _axpy(row, src[j * dilation : j * dilation + wd], w[o, c, i, j], wd)
    return out


@njit
def _conv_grad_w_nb(x, g, kh, kw, dilation):
    n, c_in, h, wd = x.shape
    c_out = g.shape[1]
    ch = kh // 2
    xp = _pad_cols(x, (kw // 2) * dilation)
    gw = np.zeros((c_out, c_in, kh, kw), dtype=np.float64)
    for b in range(n):
        for y in range(h):
            for o in range(c_out):
                grow = g[b, o, y]
                for c in range(c_in):
                    for i in range(kh):
                        yy = y + (i - ch) * dilation
                        if yy < 0 or yy >= h:
                            continue
                        src = xp[b, c, yy]
                        for j in range(kw):
                            gw[o, c, i, j] += _dot(grow, src[j * dilation : j * dilation + wd], wd)
    return gw


def _im2col(x, kh, kw, dilation):
    c_in, h, w = x.shape
    ph, pw = dilation * (kh // 2), dilation * (kw // 2)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c_in, kh, kw, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i * dilation : i * dilation + h, j * dilation : j * dilation + w]
    return cols.reshape(c_in * kh * kw, h * w)


def _cols(xi, kh, kw, dilation):
    if kh == 1 and kw == 1:
        return xi.reshape(xi.shape[0], -1)
    return _im2col(xi, kh, kw, dilation)


def _conv_np(x, w, dilation):
    # one channel-mixing matmul per tap; taps are accumulated in (i, j) order
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ph, pw = dilation * (kh // 2), dilation * (kw // 2)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, c_out, h * wd), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, :, i * dilation : i * dilation + h, j * dilation : j * dilation + wd]
            out += w[:, :, i, j] @ tap.reshape(n, c_in, h * wd)
    return out.reshape(n, c_out, h, wd)


def _conv_grad_input_np(g, w, dilation):
    return _conv_np(g, flip_kernel(w), dilation)


def _conv_grad_w_np(x, g, kh, kw, dilation):
    n, c_in, h, wd = x.shape
    c_out = g.shape[1]
    gw = np.zeros((c_out, c_in * kh * kw), dtype=np.float64)
    for b in range(n):
        gw += g[b].reshape(c_out, h * wd) @ _cols(x[b], kh, kw, dilation).T
    return gw.reshape(c_out, c_in, kh, kw)


def flip_kernel(w):
    """Kernel whose same-padded convolution is the adjoint of convolving with ``w``."""
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def conv2d(x, w, dilation):
    """Bias-free stride-1 dilated convolution of N x Cin x H x W by Cout x Cin x Kh x Kw."""
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if use_numba():
        return _conv_nb(x, w, dilation)
    return _conv_np(x, w, dilation)


def conv2d_grad_input(g, w, dilation):
    g = np.ascontiguousarray(g)
    w = np.ascontiguousarray(w, dtype=g.dtype)
    if use_numba():
        return _conv_nb(g, flip_kernel(w), dilation)
    return _conv_grad_input_np(g, w, dilation)


def conv2d_grad_weight(x, g, kh, kw, dilation):
    """Weight gradient accumulated in float64."""
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    if use_numba():
        return _conv_grad_w_nb(x, g, kh, kw, dilation)
    return _conv_grad_w_np(x, g, kh, kw, dilation)


# ----------------------------------------------------------------------------
# fused batch-norm + ReLU (network hot path)
# ----------------------------------------------------------------------------


@njit
def _channel_stats_nb(x):
    n, c, h, w = x.shape
    m = n * h * w
    mean = np.zeros(c, dtype=np.float64)
    var = np.zeros(c, dtype=np.float64)
    for k in range(c):
        s = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    s += x[b, k, y, xx]
        mu = s / m
        ss = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    d = x[b, k, y, xx] - mu
                    ss += d * d
        mean[k] = mu
        var[k] = ss / m
    return mean, var


def _channel_stats_np(x):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    d = x - mean.astype(x.dtype)[None, :, None, None]
    var = np.mean(np.square(d, dtype=np.float64), axis=(0, 2, 3))
    return mean, var


def channel_stats(x):
    """Per-channel mean and population variance over N, H, W (float64)."""
    x = np.ascontiguousarray(x)
    if use_numba():
        return _channel_stats_nb(x)
    return _channel_stats_np(x)


@njit
def _affine_relu_nb(x, scale, shift):
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for b in range(n):
        for k in range(c):
            sc = scale[k]
            sh = shift[k]
            for y in range(h):
                for xx in range(w):
                    v = x[b, k, y, xx] * sc + sh
                    out[b, k, y, xx] = v if v > 0 else 0
    return out


def _affine_relu_np(x, scale, shift):
    y = x * scale[None, :, None, None]
    y += shift[None, :, None, None]
    return np.maximum(y, 0, out=y)


def bn_scale_shift(mean, invstd, gamma, beta, dtype):
    scale = gamma * invstd
    shift = beta - mean * scale
    return scale.astype(dtype), shift.astype(dtype)


def affine_relu(x, scale, shift):
    """``max(x * scale[c] + shift[c], 0)``: batch-norm apply fused with ReLU."""
    x = np.ascontiguousarray(x)
    scale = np.ascontiguousarray(scale, dtype=x.dtype)
    shift = np.ascontiguousarray(shift, dtype=x.dtype)
    if use_numba():
        return _affine_relu_nb(x, scale, shift)
    return _affine_relu_np(x, scale, shift)


@njit
def _bn_relu_backward_nb(g, x, scale, shift, mean, invstd, train):
    n, c, h, w = x.shape
    m = n * h * w
    gx = np.empty_like(x)
    dgamma = np.zeros(c, dtype=np.float64)
    dbeta = np.zeros(c, dtype=np.float64)
    for k in range(c):
        sc = scale[k]
        sh = shift[k]
        mu = mean[k]
        inv = invstd[k]
        sg = 0.0
        sgx = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    xv = x[b, k, y, xx]
                    if xv * sc + sh > 0:
                        gv = g[b, k, y, xx]
                        sg += gv
                        sgx += gv * ((xv - mu) * inv)
        dbeta[k] = sg
        dgamma[k] = sgx
        if train:
            a = sg / m
            bq = sgx / m
        else:
            a = 0.0
            bq = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    xv = x[b, k, y, xx]
                    gv = g[b, k, y, xx] if xv * sc + sh > 0 else 0.0
                    gx[b, k, y, xx] = sc * (gv - a - (xv - mu) * inv * bq)
    return gx, dgamma, dbeta


def _bn_relu_backward_np(g, x, scale, shift, mean, invstd, train):
    y = x * scale[None, :, None, None]
    y += shift[None, :, None, None]
    gy = np.where(y > 0, g, 0).astype(x.dtype, copy=False)
    del y
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * invstd.astype(x.dtype)[None, :, None, None]
    dbeta = gy.sum(axis=(0, 2, 3), dtype=np.float64)
    dgamma = (gy * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    sc = scale[None, :, None, None]
    if not train:
        return gy * sc, dgamma, dbeta
    m = x.shape[0] * x.shape[2] * x.shape[3]
    gx = gy - (dbeta / m).astype(x.dtype)[None, :, None, None]
    gx -= xhat * (dgamma / m).astype(x.dtype)[None, :, None, None]
    gx *= sc
    return gx, dgamma, dbeta


def bn_relu_backward(g, x, scale, shift, mean, invstd, train=True):
    """Adjoint of ``affine_relu`` applied after batch statistics of ``x``.

    Returns ``(grad_x, grad_gamma, grad_beta)``.  With ``train`` false the
    statistics are treated as constants (inference-mode normalisation).
    """
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    scale = np.ascontiguousarray(scale, dtype=x.dtype)
    shift = np.ascontiguousarray(shift, dtype=x.dtype)
    mean = np.ascontiguousarray(mean, dtype=np.float64)
    invstd = np.ascontiguousarray(invstd, dtype=np.float64)
    if use_numba():
        return _bn_relu_backward_nb(g, x, scale, shift, mean, invstd, bool(train))
    return _bn_relu_backward_np(g, x, scale, shift, mean, invstd, bool(train))


# ----------------------------------------------------------------------------
# 6-connected component labelling
# ----------------------------------------------------------------------------


@njit
def _label6_nb(mask):
    nx, ny, nz = mask.shape
    labels = np.zeros((nx, ny, nz), dtype=np.int32)
    queue = np.empty((nx * ny * nz, 3), dtype=np.int64)
    current = 0
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z] or labels[x, y, z] != 0:
                    continue
                current += 1
                labels[x, y, z] = current
                head = 0
                tail = 1
                queue[0, 0] = x
                queue[0, 1] = y
                queue[0, 2] = z
                while head < tail:
                    cx = queue[head, 0]
                    cy = queue[head, 1]
                    cz = queue[head, 2]
                    head += 1
                    for k in range(6):
                        px, py, pz = cx, cy, cz
                        if k == 0:
                            px -= 1
                        elif k == 1:
                            px += 1
                        elif k == 2:
                            py -= 1
                        elif k == 3:
                            py += 1
                        elif k == 4:
                            pz -= 1
                        else:
                            pz += 1
                        if px < 0 or py < 0 or pz < 0 or px >= nx or py >= ny or pz >= nz:
                            continue
                        if mask[px, py, pz] and labels[px, py, pz] == 0:
                            labels[px, py, pz] = current
                            queue[tail, 0] = px
                            queue[tail, 1] = py
                            queue[tail, 2] = pz
                            tail += 1
    return labels, current


def _label6_np(mask):
    structure = ndimage.generate_binary_structure(3, 1)
    labels, n = ndimage.label(mask, structure=structure)
    return labels.astype(np.int32), int(n)


def label6(mask):
    """Label 6-connected foreground components of a 3D boolean array.

    Labels are numbered 1..n in order of each component's first voxel in
    C-order raster scan, for both backends.
    """
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if mask.ndim != 3:
        raise ValueError("label6 expects a 3D array")
    if use_numba():
        labels, n = _label6_nb(mask)
        return labels, int(n)
    return _label6_np(mask)


# ----------------------------------------------------------------------------
# confusion counting
# ----------------------------------------------------------------------------


@njit
def _confusion_nb(ref, pred, domain):
    # uint8 views; slot 2*r + p holds tn, fp, fn, tp (branch-free)
    counts = np.zeros(4, dtype=np.int64)
    for i in range(ref.size):
        counts[2 * ref[i] + pred[i]] += domain[i]
    return counts[3], counts[1], counts[2], counts[0]


def _confusion_np(ref, pred, domain):
    r = ref[domain]
    p = pred[domain]
    tp = int(np.count_nonzero(r & p))
    fp = int(np.count_nonzero(~r & p))
    fn = int(np.count_nonzero(r & ~p))
    tn = int(r.size - tp - fp - fn)
    return tp, fp, fn, tn


def confusion_counts(ref, pred, domain):
    """(TP, FP, FN, TN) over the voxels where ``domain`` is true."""
    ref = np.ascontiguousarray(ref, dtype=np.bool_).ravel()
    pred = np.ascontiguousarray(pred, dtype=np.bool_).ravel()
    domain = np.ascontiguousarray(domain, dtype=np.bool_).ravel()
    if use_numba():
        return tuple(int(v) for v in _confusion_nb(ref.view(np.uint8), pred.view(np.uint8), domain.view(np.uint8)))
    return _confusion_np(ref, pred, domain)


# ----------------------------------------------------------------------------
# resampling (half-pixel centres, edge clamp)
# ----------------------------------------------------------------------------


def linear_taps(n_in, n_out):
    """Source indices (i0, i1) and weight of i1 for each output sample."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def nearest_taps(n_in, n_out):
    """Nearest source index per output sample under the same half-pixel mapping."""
    dst = np.arange(n_out, dtype=np.int64)
    return np.minimum(((2 * dst + 1) * n_in) // (2 * n_out), n_in - 1)


@njit
def _bilinear_nb(img, r0, r1, rt, c0, c1, ct):
    rows = r0.shape[0]
    cols = c0.shape[0]
    out = np.empty((rows, cols), dtype=np.float64)
    for r in range(rows):
        ty = rt[r]
        for c in range(cols):
            tx = ct[c]
            top = (1.0 - tx) * img[r0[r], c0[c]] + tx * img[r0[r], c1[c]]
            bot = (1.0 - tx) * img[r1[r], c0[c]] + tx * img[r1[r], c1[c]]
            out[r, c] = (1.0 - ty) * top + ty * bot
    return out


def _bilinear_np(img, r0, r1, rt, c0, c1, ct):
    tx = ct[None, :]
    top = (1.0 - tx) * img[r0][:, c0] + tx * img[r0][:, c1]
    bot = (1.0 - tx) * img[r1][:, c0] + tx * img[r1][:, c1]
    ty = rt[:, None]
    return (1.0 - ty) * top + ty * bot


def bilinear_resize(img, rows, cols):
    img = np.ascontiguousarray(img, dtype=np.float64)
    r0, r1, rt = linear_taps(img.shape[0], rows)
    c0, c1, ct = linear_taps(img.shape[1], cols)
    if use_numba():
        return _bilinear_nb(img, r0, r1, rt, c0, c1, ct)
    return _bilinear_np(img, r0, r1, rt, c0, c1, ct)


def nearest_resize(img, rows, cols):
    ri = nearest_taps(img.shape[0], rows)
    ci = nearest_taps(img.shape[1], cols)
    return np.asarray(img)[ri][:, ci]
