"""Pure-numpy MaxSim kernels.

Fallback backend: always available, bitwise-deterministic, used whenever the
compiled extension is missing or disabled. Inputs arrive pre-validated from
the dispatching package (C-contiguous float32/float64 tokens, uint8 masks,
every span with at least one attended token).

Tie rule shared with the compiled backend: the argmax keeps the FIRST
position attaining the maximum (numpy's argmax convention).
"""

import numpy as np


def maxsim_pairs(x, x_mask, y, y_mask):
    """Row-aligned scores: out[a] = maxsim(x[a], y[a]). Returns (scores, argmax)."""
    xm = x_mask != 0
    ym = y_mask != 0
    neg = np.array(-np.inf, dtype=x.dtype)
    sim = x @ np.swapaxes(y, 1, 2)
    sim = np.where(ym[:, None, :], sim, neg)
    idx = sim.argmax(axis=2)
    best = np.take_along_axis(sim, idx[..., None], axis=2)[..., 0]
    best[~xm] = 0.0
    scores = best.sum(axis=1)
    argmax = np.where(xm, idx, -1).astype(np.intc)
    return scores, argmax


def maxsim_pairs_backward(grad_out, argmax, x, y):
    dx = np.zeros_like(x)
    dy = np.zeros_like(y)
    a_idx, i_idx = np.nonzero(argmax >= 0)
    j_idx = argmax[a_idx, i_idx]
    w = grad_out[a_idx][:, None]
    np.add.at(dx, (a_idx, i_idx), w * y[a_idx, j_idx])
    np.add.at(dy, (a_idx, j_idx), w * x[a_idx, i_idx])
    return dx, dy


def maxsim_matrix(x, x_mask, y, y_mask):
    """All-pairs scores: out[a, b] = maxsim(x[a], y[b]). Returns (scores, argmax)."""
    num_x, len_x, dim = x.shape
    num_y, len_y = y.shape[0], y.shape[1]
    xm = x_mask != 0
    ym = y_mask != 0
    neg = np.array(-np.inf, dtype=x.dtype)
    y_flat = y.reshape(num_y * len_y, dim)
    scores = np.empty((num_x, num_y), dtype=x.dtype)
    argmax = np.empty((num_x, num_y, len_x), dtype=np.intc)
    # one GEMM per anchor row keeps the scratch at len_x * num_y * len_y floats
    for a in range(num_x):
        sim = (x[a] @ y_flat.T).reshape(len_x, num_y, len_y)
        sim = np.where(ym[None, :, :], sim, neg)
        idx = sim.argmax(axis=2)
        best = np.take_along_axis(sim, idx[..., None], axis=2)[..., 0]
        best[~xm[a]] = 0.0
        scores[a] = best.sum(axis=0)
        argmax[a] = np.where(xm[a][None, :], idx.T, -1)
    return scores, argmax


def maxsim_matrix_backward(grad_out, argmax, x, y):
    dx = np.zeros_like(x)
    dy = np.zeros_like(y)
    for a in range(x.shape[0]):
        b_idx, i_idx = np.nonzero(argmax[a] >= 0)
        j_idx = argmax[a, b_idx, i_idx]
        w = grad_out[a, b_idx][:, None]
        np.add.at(dx, (np.full_like(b_idx, a), i_idx), w * y[b_idx, j_idx])
        np.add.at(dy, (b_idx, j_idx), w * x[a, i_idx])
    return dx, dy
