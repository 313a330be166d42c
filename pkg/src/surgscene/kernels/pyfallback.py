"""Pure-numpy implementations of the hot kernels.

Selected automatically when the compiled extension is unavailable (or when
``SURGSCENE_KERNELS=python``).  Signatures and semantics match
``_ckernels`` exactly; the two are cross-checked in the test suite and
compared in ``benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

import numpy as np


def rle_encode(flat: np.ndarray) -> np.ndarray:
    """Run lengths of a 0/1 sequence, background-first."""
    flat = np.asarray(flat, dtype=np.uint8)
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    boundaries = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(boundaries)
    if flat[0] == 1:
        counts = np.concatenate(([0], counts))
    return counts.astype(np.int64)


def rle_decode(counts: np.ndarray, n: int) -> np.ndarray:
    """Inverse of rle_encode; counts must sum to n."""
    counts = np.asarray(counts, dtype=np.int64)
    values = np.zeros(counts.size, dtype=np.uint8)
    values[1::2] = 1
    out = np.repeat(values, counts)
    assert out.size == n
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    expx = np.exp(x[~positive])
    out[~positive] = expx / (1.0 + expx)
    return out


def fused_mask_loss(
    grid: np.ndarray,
    w_mask: np.ndarray,
    b_mask: float,
    prompt: np.ndarray,
    fg_counts: np.ndarray,
    block: float,
    w_bce: float,
    w_dice: float,
    eps: float,
    d_prompt: np.ndarray,
    d_w_mask: np.ndarray,
) -> tuple[float, float, float]:
    """Cell-level fused decode + BCE/Dice with gradients; see _ckernels."""
    d = grid.shape[2]
    n_px = grid.shape[0] * grid.shape[1] * block
    cells = grid @ (w_mask @ prompt) + b_mask
    probs = _sigmoid(cells)
    k0 = block - fg_counts
    softplus_pos = np.log1p(np.exp(-np.abs(cells))) + np.maximum(cells, 0.0)
    softplus_neg = softplus_pos - cells
    bce = float((fg_counts * softplus_neg + k0 * softplus_pos).sum() / n_px)

    sum_p = block * float(probs.sum())
    sum_pm = float((fg_counts * probs).sum())
    sum_m = float(fg_counts.sum())
    numerator = 2.0 * sum_pm + eps
    denominator = sum_p + sum_m + eps
    dice = 1.0 - numerator / denominator

    d_cell = w_bce * (block * probs - fg_counts) / n_px
    d_cell += (
        w_dice
        * (numerator * block - 2.0 * fg_counts * denominator)
        / denominator**2
        * probs
        * (1.0 - probs)
    )
    pulled = grid.reshape(-1, d).T @ d_cell.ravel()
    d_prompt[:] = w_mask.T @ pulled
    d_w_mask[:] = np.outer(pulled, prompt)
    return bce, dice, float(d_cell.sum())
