"""Numba kernels for multi-resolution grid interpolation (forward and table gradient)."""

import numba
import numpy as np

P1 = np.int64(2654435761)
P2 = np.int64(805459861)


@numba.njit(cache=True, inline="always")
def _axes(c, level, res, i_out, f_out):
    n = res[level]
    x = c[0] * n
    b = np.floor(x)
    i_t = np.int64(b)
    f_out[0] = x - b
    i_out[0] = i_t % n
    for a in (1, 2):
        x = c[a] * n
        i = np.int64(np.floor(x))
        if i < 0:
            i = 0
        if i > n - 1:
            i = n - 1
        i_out[a] = i
        f_out[a] = x - i


@numba.njit(cache=True, inline="always")
def _row(it, ip, ir, n, dense, offset, mask):
    if dense:
        return offset + it + n * (ip + (n + 1) * ir)
    return offset + ((it ^ (ip * P1) ^ (ir * P2)) & mask)


@numba.njit(cache=True)
def interp_forward(c, table, res, dense, offsets, hash_size):
    npts = c.shape[0]
    nl = res.shape[0]
    nf = table.shape[1]
    out = np.zeros((npts, nl * nf), dtype=table.dtype)
    mask = np.int64(hash_size - 1)
    i0 = np.empty(3, dtype=np.int64)
    fr = np.empty(3, dtype=c.dtype)
    for p in range(npts):
        for level in range(nl):
            _axes(c[p], level, res, i0, fr)
            n = res[level]
            for bt in range(2):
                it = (i0[0] + bt) % n
                wt = fr[0] if bt else 1.0 - fr[0]
                for bp in range(2):
                    wp = fr[1] if bp else 1.0 - fr[1]
                    for br in range(2):
                        wr = fr[2] if br else 1.0 - fr[2]
                        row = _row(it, i0[1] + bp, i0[2] + br, n, dense[level], offsets[level], mask)
                        w = wt * wp * wr
                        for k in range(nf):
                            out[p, level * nf + k] += w * table[row, k]
    return out


@numba.njit(cache=True)
def interp_backward(c, grad, n_rows, res, dense, offsets, hash_size):
    npts = c.shape[0]
    nl = res.shape[0]
    nf = grad.shape[1] // nl
    gt = np.zeros((n_rows, nf), dtype=grad.dtype)
    mask = np.int64(hash_size - 1)
    i0 = np.empty(3, dtype=np.int64)
    fr = np.empty(3, dtype=c.dtype)
    for p in range(npts):
        for level in range(nl):
            _axes(c[p], level, res, i0, fr)
            n = res[level]
            for bt in range(2):
                it = (i0[0] + bt) % n
                wt = fr[0] if bt else 1.0 - fr[0]
                for bp in range(2):
                    wp = fr[1] if bp else 1.0 - fr[1]
                    for br in range(2):
                        wr = fr[2] if br else 1.0 - fr[2]
                        row = _row(it, i0[1] + bp, i0[2] + br, n, dense[level], offsets[level], mask)
                        w = wt * wp * wr
                        for k in range(nf):
                            gt[row, k] += w * grad[p, level * nf + k]
    return gt
