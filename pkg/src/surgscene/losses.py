"""Composite training objective: token CE, mask BCE, mask Dice, entity CE.

The total loss is

    total = L_llm + lambda_bce * L_bce + lambda_dice * L_dice + lambda_ent * L_ent

where L_llm is mean cross-entropy over all template token positions, L_ent
is the same loss restricted to entity-name positions (phase, instrument,
verb, target), and the mask terms are averaged over all prompt-conditioned
masks of the batch.  Every operation has an analytic backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5
    lambda_ent: float = 1.0
    # Extra weight on entity positions when ent_mode="reweight" folds the
    # entity term into L_llm instead of adding a separate term.
    w_ent: float = 2.0
    ent_mode: str = "extra_term"  # or "reweight"
    dice_eps: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_bce", "lambda_dice", "lambda_ent"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.w_ent < 1.0:
            raise ValueError(f"w_ent must be >= 1, got {self.w_ent}")
        if self.ent_mode not in ("extra_term", "reweight"):
            raise ValueError(f"unknown ent_mode {self.ent_mode!r}")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be > 0")


@dataclass
class TokenTargets:
    """Teacher-forcing targets for one token stream."""

    target_ids: np.ndarray  # (L,) int
    entity_positions: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)
        if self.target_ids.ndim != 1:
            raise ValueError("target_ids must be 1-D")
        for position in self.entity_positions:
            if not 0 <= position < self.target_ids.size:
                raise ValueError(f"entity position {position} out of range")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def token_ce(logits: np.ndarray, targets: TokenTargets) -> tuple[float, float]:
    """(mean CE over all positions, mean CE over entity positions).

    The entity mean is 0.0 when there are no entity positions.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n_positions = logits.shape[0]
    if n_positions == 0:
        raise ValueError("empty token sequence")
    if logits.ndim != 2 or n_positions != targets.target_ids.size:
        raise ValueError(
            f"logits shape {logits.shape} inconsistent with "
            f"{targets.target_ids.size} targets"
        )
    if targets.target_ids.size and (
        targets.target_ids.min() < 0 or targets.target_ids.max() >= logits.shape[1]
    ):
        raise ValueError("target id out of vocabulary range")
    log_probs = _log_softmax(logits)
    per_position = -log_probs[np.arange(n_positions), targets.target_ids]
    llm = float(per_position.mean())
    if targets.entity_positions:
        rows = sorted(targets.entity_positions)
        ent = float(per_position[rows].mean())
    else:
        ent = 0.0
    return llm, ent


def token_ce_backward(
    logits: np.ndarray,
    targets: TokenTargets,
    d_llm: float = 1.0,
    d_ent: float = 0.0,
) -> np.ndarray:
    """Gradient of d_llm * L_llm + d_ent * L_ent w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n_positions = logits.shape[0]
    probs = np.exp(_log_softmax(logits))
    one_hot = np.zeros_like(probs)
    one_hot[np.arange(n_positions), targets.target_ids] = 1.0
    per_position = probs - one_hot
    weights = np.full(n_positions, d_llm / n_positions)
    if targets.entity_positions:
        rows = sorted(targets.entity_positions)
        weights[rows] += d_ent / len(rows)
    return per_position * weights[:, None]


def token_ce_reweighted(
    logits: np.ndarray, targets: TokenTargets, w_ent: float
) -> float:
    """Weighted-mean CE with weight ``w_ent`` on entity positions.

    Alternative to the extra entity term: the up-weighting lives inside the
    language loss itself (``ent_mode="reweight"``).
    """
    logits = np.asarray(logits, dtype=np.float64)
    n_positions = logits.shape[0]
    if n_positions == 0:
        raise ValueError("empty token sequence")
    log_probs = _log_softmax(logits)
    per_position = -log_probs[np.arange(n_positions), targets.target_ids]
    weights = np.ones(n_positions)
    if targets.entity_positions:
        weights[sorted(targets.entity_positions)] = w_ent
    return float((per_position * weights).sum() / weights.sum())


def token_ce_reweighted_backward(
    logits: np.ndarray, targets: TokenTargets, w_ent: float, d_loss: float = 1.0
) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    n_positions = logits.shape[0]
    probs = np.exp(_log_softmax(logits))
    one_hot = np.zeros_like(probs)
    one_hot[np.arange(n_positions), targets.target_ids] = 1.0
    weights = np.ones(n_positions)
    if targets.entity_positions:
        weights[sorted(targets.entity_positions)] = w_ent
    weights *= d_loss / weights.sum()
    return (probs - one_hot) * weights[:, None]


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    expx = np.exp(x[~positive])
    out[~positive] = expx / (1.0 + expx)
    return out


def bce_loss(logits: np.ndarray, mask: np.ndarray) -> float:
    """Mean per-pixel binary cross-entropy between logits and a 0/1 mask."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape != mask.shape:
        raise ValueError(f"shape mismatch: {logits.shape} vs {mask.shape}")
    # log(1 + e^-|x|) + max(x, 0) - x*m is the numerically stable form.
    per_pixel = np.log1p(np.exp(-np.abs(logits)))
    per_pixel += np.maximum(logits, 0.0) - logits * mask
    return float(per_pixel.mean())


def bce_backward(logits: np.ndarray, mask: np.ndarray, d_loss: float = 1.0) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape != mask.shape:
        raise ValueError(f"shape mismatch: {logits.shape} vs {mask.shape}")
    return d_loss * (sigmoid(logits) - mask) / logits.size


def dice_loss(probs: np.ndarray, mask: np.ndarray, eps: float = 1.0) -> float:
    """1 - (2 * sum(p*m) + eps) / (sum(p) + sum(m) + eps)."""
    probs = np.asarray(probs, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if probs.shape != mask.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {mask.shape}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    numerator = 2.0 * float((probs * mask).sum()) + eps
    denominator = float(probs.sum()) + float(mask.sum()) + eps
    return 1.0 - numerator / denominator


def dice_backward(
    probs: np.ndarray, mask: np.ndarray, eps: float = 1.0, d_loss: float = 1.0
) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    numerator = 2.0 * float((probs * mask).sum()) + eps
    denominator = float(probs.sum()) + float(mask.sum()) + eps
    # d/dp [ -num/den ] = -(2*m*den - num) / den^2
    return d_loss * (numerator - 2.0 * mask * denominator) / (denominator**2)


@dataclass(frozen=True)
class LossParts:
    llm: float
    bce: float
    dice: float
    ent: float


def total_loss(parts: LossParts, weights: LossWeights) -> float:
    """Weighted combination of the four terms (Eq. of the training objective)."""
    for name, value in vars(parts).items():
        if not np.isfinite(value):
            raise ValueError(f"non-finite loss part {name}={value}")
    return (
        parts.llm
        + weights.lambda_bce * parts.bce
        + weights.lambda_dice * parts.dice
        + weights.lambda_ent * parts.ent
    )
