# Compiled hot kernels: RLE runs and the fused per-mask loss.
#
# The mask kernel exploits the nearest-neighbor upsampling structure: all
# pixels of one grid cell share a logit, so pixel sums collapse to per-cell
# terms weighted by the block size and the per-cell foreground pixel count.

import numpy as np

cimport numpy as cnp

from libc.math cimport exp, fabs, log1p

cnp.import_array()


def rle_encode(const unsigned char[::1] flat):
    """Run lengths of a 0/1 sequence, background-first."""
    cdef Py_ssize_t n = flat.shape[0]
    out = np.empty(n + 1, dtype=np.int64)
    cdef long long[::1] o = out
    cdef unsigned char current = 0
    cdef long long run = 0
    cdef Py_ssize_t i, m = 0
    for i in range(n):
        if flat[i] == current:
            run += 1
        else:
            o[m] = run
            m += 1
            current = 1 - current
            run = 1
    o[m] = run
    m += 1
    return np.asarray(out[:m]).copy()


def rle_decode(const long long[::1] counts, Py_ssize_t n):
    """Inverse of rle_encode; counts must sum to n."""
    out = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] o = out
    cdef unsigned char value = 0
    cdef Py_ssize_t i, j, pos = 0
    cdef long long c
    for i in range(counts.shape[0]):
        c = counts[i]
        if value:
            for j in range(pos, pos + c):
                o[j] = 1
        pos += c
        value = 1 - value
    return out


cdef inline double softplus(double x) nogil:
    # log(1 + e^x), stable for large |x|
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


def fused_mask_loss(
    const double[:, :, ::1] grid,
    const double[:, ::1] w_mask,
    double b_mask,
    const double[::1] prompt,
    const double[:, ::1] fg_counts,
    double block,
    double w_bce,
    double w_dice,
    double eps,
    double[::1] d_prompt,
    double[:, ::1] d_w_mask,
):
    """Decode one mask and evaluate BCE+Dice with gradients in one pass.

    fg_counts[y, x] is the number of foreground ground-truth pixels inside
    cell (y, x)'s upsampled block; block is the pixels-per-cell count.
    Writes gradients of (w_bce * bce + w_dice * dice) w.r.t. prompt and
    w_mask into the provided buffers (overwriting them) and returns
    (bce, dice, d_b_mask).
    """
    cdef Py_ssize_t h = grid.shape[0]
    cdef Py_ssize_t w = grid.shape[1]
    cdef Py_ssize_t d = grid.shape[2]
    cdef Py_ssize_t dsam = prompt.shape[0]
    cdef Py_ssize_t x, y, a, k

    cells_arr = np.empty((h, w), dtype=np.float64)
    probs_arr = np.empty((h, w), dtype=np.float64)
    q_arr = np.empty(d, dtype=np.float64)
    g_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] cells = cells_arr
    cdef double[:, ::1] probs = probs_arr
    cdef double[::1] q = q_arr
    cdef double[::1] g = g_arr

    cdef double acc, logit, p, k1, k0
    cdef double n_px = h * w * block
    cdef double bce = 0.0
    cdef double sum_p = 0.0, sum_pm = 0.0, sum_m = 0.0

    for a in range(d):
        acc = 0.0
        for k in range(dsam):
            acc += w_mask[a, k] * prompt[k]
        q[a] = acc

    for y in range(h):
        for x in range(w):
            acc = b_mask
            for a in range(d):
                acc += grid[y, x, a] * q[a]
            cells[y, x] = acc
            p = 1.0 / (1.0 + exp(-acc)) if acc >= 0 else exp(acc) / (1.0 + exp(acc))
            probs[y, x] = p
            k1 = fg_counts[y, x]
            k0 = block - k1
            bce += k1 * softplus(-acc) + k0 * softplus(acc)
            sum_p += block * p
            sum_pm += k1 * p
            sum_m += k1
    bce /= n_px

    cdef double numerator = 2.0 * sum_pm + eps
    cdef double denominator = sum_p + sum_m + eps
    cdef double dice = 1.0 - numerator / denominator
    cdef double den2 = denominator * denominator

    cdef double d_cell, d_b = 0.0
    for y in range(h):
        for x in range(w):
            p = probs[y, x]
            k1 = fg_counts[y, x]
            d_cell = w_bce * (block * p - k1) / n_px
            d_cell += (
                w_dice
                * (numerator * block - 2.0 * k1 * denominator)
                / den2
                * p
                * (1.0 - p)
            )
            d_b += d_cell
            for a in range(d):
                g[a] += d_cell * grid[y, x, a]

    for k in range(dsam):
        acc = 0.0
        for a in range(d):
            acc += w_mask[a, k] * g[a]
        d_prompt[k] = acc
    for a in range(d):
        for k in range(dsam):
            d_w_mask[a, k] = g[a] * prompt[k]

    return bce, dice, d_b
