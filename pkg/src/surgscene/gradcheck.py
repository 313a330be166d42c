"""Central finite-difference verification of every analytic backward pass.

Each registered check builds a small random instance, computes a scalar
loss with analytic gradients, then perturbs every input/parameter entry by
±step (central differences, 64-bit).  The reported error per tensor is

    ||analytic - numeric||_2 / max(||analytic||_2 + ||numeric||_2, 1e-12)

and a check passes when the max over tensors and seeds is <= tolerance.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import losses
from .fusion import (
    MODE_FULL,
    ProjectionParams,
    PromptBatch,
    group_occurrences,
    project_hidden,
    project_hidden_backward,
    residual_fuse,
    residual_fuse_backward,
)
from .grammar import INSTRUMENT, TARGET, FrameSemantics, SegMarker
from .kernels import fused_mask_loss
from .toy_model import (
    TokenVocab,
    ToyDecoderParams,
    ToyReasonerParams,
    VideoClip,
    build_token_stream,
    decode_mask,
    decode_mask_backward,
    marker_entity_rows,
    reason,
    reason_backward,
    seg_hidden_backward,
    seg_hidden_states,
    token_logits_backward,
    token_logits_for_frame,
)
from .vocab import LabelSpace

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-4


def finite_difference(loss_fn: Callable[[], float], tensor: np.ndarray,
                      step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` w.r.t. ``tensor`` in place."""
    grad = np.zeros_like(tensor, dtype=np.float64)
    flat = tensor.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = loss_fn()
        flat[i] = original - step
        lower = loss_fn()
        flat[i] = original
        flat_grad[i] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _compare(
    loss_fn: Callable[[], float],
    pairs: list[tuple[np.ndarray, np.ndarray]],
    step: float,
) -> float:
    """Max relative error over (tensor, analytic_grad) pairs."""
    worst = 0.0
    for tensor, analytic in pairs:
        numeric = finite_difference(loss_fn, tensor, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _toy_space() -> LabelSpace:
    return LabelSpace(
        phases=("alpha", "beta", "gamma"),
        instruments=("probe", "forceps", "cutter"),
        verbs=("touch", "pull", "cut"),
        targets=("tissue-a", "tissue-b", "duct", "vessel"),
        valid_triplets=((0, 0, 0), (0, 1, 1), (1, 1, 1), (1, 2, 2), (2, 0, 3), (2, 2, 0)),
    )


def _random_markers(rng: np.random.Generator, space: LabelSpace, n_frames: int,
                    count: int) -> tuple[SegMarker, ...]:
    markers = []
    for position, _ in enumerate(range(count)):
        kind = INSTRUMENT if rng.random() < 0.5 else TARGET
        n_labels = len(space.instruments if kind == INSTRUMENT else space.targets)
        markers.append(
            SegMarker(
                entity_kind=kind,
                triplet_index=0,
                frame_index=int(rng.integers(n_frames)),
                label_id=int(rng.integers(n_labels)),
                token_position=position,
            )
        )
    return tuple(markers)


# ---------------------------------------------------------------------------
# Individual checks (each returns max relative error for one seed)


def check_projection(seed: int, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    d_llm, d_sam, n = 5, 3, 4
    params = ProjectionParams.init(d_llm, d_sam, rng)
    # Non-zero fusion head so the hidden path is generic here.
    params.hidden_proj.b1[:] = rng.normal(0.0, 0.3, size=d_llm)
    h = rng.normal(size=(n, d_llm))
    weights = rng.normal(size=(n, d_sam))
    markers = _random_markers(rng, _toy_space(), 2, n)

    def loss() -> float:
        batch, _ = project_hidden(h, params, markers)
        return float((batch.embeddings * weights).sum())

    batch, cache = project_hidden(h, params, markers)
    d_h, grads = project_hidden_backward(params, cache, weights)
    pairs = [(h, d_h)]
    pairs += [
        (params.hidden_proj.tensors()[k], grads.tensors()[k])
        for k in ("w1", "b1", "w2", "b2")
    ]
    return _compare(loss, pairs, step)


def check_fusion(seed: int, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    space = _toy_space()
    d_sam, n = 3, 4
    params = ProjectionParams.init(4, d_sam, rng)
    params.fuse_proj.w2[:] = rng.normal(0.0, 0.4, size=params.fuse_proj.w2.shape)
    z = rng.normal(size=(n, d_sam))
    markers = _random_markers(rng, space, 2, n)
    weights = rng.normal(size=(n, d_sam))

    def loss() -> float:
        batch = PromptBatch(embeddings=z.copy(), markers=markers)
        fused, _ = residual_fuse(batch, group_occurrences(markers), params, MODE_FULL)
        return float((fused.embeddings * weights).sum())

    batch = PromptBatch(embeddings=z.copy(), markers=markers)
    _, cache = residual_fuse(batch, group_occurrences(markers), params, MODE_FULL)
    d_z, grads = residual_fuse_backward(params, cache, weights)
    pairs = [(z, d_z)]
    pairs += [
        (params.fuse_proj.tensors()[k], grads.tensors()[k])
        for k in ("w1", "b1", "w2", "b2")
    ]
    return _compare(loss, pairs, step)


def check_reasoner(seed: int, step: float = DEFAULT_STEP) -> float:
    """Trunk, classifier heads, seg hiddens and teacher-forced token CE."""
    rng = np.random.default_rng(seed)
    space = _toy_space()
    vocab = TokenVocab.build(space, n_max=2, extra_tokens=("peek",))
    n_frames, grid_d, d_llm = 2, 3, 4
    params = ToyReasonerParams.init(space, vocab, grid_d, d_llm, rng)
    params.role_bias[:] = rng.normal(0.0, 0.2, size=params.role_bias.shape)
    frames = rng.normal(size=(n_frames, 2, 2, grid_d))
    clip = VideoClip(frames=frames, mask_h=4, mask_w=4)
    markers = _random_markers(rng, space, n_frames, 3)
    rows = marker_entity_rows(markers, params)
    semantics = FrameSemantics(frame_index=0, phase=1, triplets=((0, 1, 1), (2, 2, 0)))
    stream = build_token_stream(semantics, " peek ", space, vocab)
    w_phase = rng.normal(size=(n_frames, len(space.phases)))
    w_trip = rng.normal(size=(n_frames, space.num_triplets))
    w_hidden = rng.normal(size=(len(markers), d_llm))

    def loss() -> float:
        outputs = reason(clip, params, space)
        value = float((outputs.phase_logits * w_phase).sum())
        value += float((outputs.triplet_logits * w_trip).sum())
        bases = outputs.frame_states[[m.frame_index for m in markers]]
        hidden, _ = seg_hidden_states(bases, rows, params)
        value += float((hidden * w_hidden).sum())
        logits = token_logits_for_frame(
            vocab, params, stream,
            outputs.phase_logits[0], outputs.triplet_logits[0],
            outputs.count_logits[0],
        )
        targets = losses.TokenTargets(stream.token_ids, stream.entity_positions)
        llm, ent = losses.token_ce(logits, targets)
        return value + llm + 0.5 * ent

    outputs = reason(clip, params, space)
    frame_rows = [m.frame_index for m in markers]
    bases = outputs.frame_states[frame_rows]
    hidden, seg_cache = seg_hidden_states(bases, rows, params)
    logits = token_logits_for_frame(
        vocab, params, stream,
        outputs.phase_logits[0], outputs.triplet_logits[0], outputs.count_logits[0],
    )
    targets = losses.TokenTargets(stream.token_ids, stream.entity_positions)
    d_logits = losses.token_ce_backward(logits, targets, d_llm=1.0, d_ent=0.5)
    d_role_bias, d_phase_0, d_trip_0, d_count_0 = token_logits_backward(
        vocab, params, stream, outputs.triplet_logits[0], d_logits
    )
    d_phase = w_phase.copy()
    d_trip = w_trip.copy()
    d_count = np.zeros_like(outputs.count_logits)
    d_phase[0] += d_phase_0
    d_trip[0] += d_trip_0
    d_count[0] += d_count_0
    d_bases, seg_grads = seg_hidden_backward(params, seg_cache, w_hidden)
    d_states = np.zeros_like(outputs.frame_states)
    np.add.at(d_states, frame_rows, d_bases)
    d_pooled, grads = reason_backward(
        params, outputs, d_phase=d_phase, d_trip=d_trip, d_count=d_count,
        d_frame_states=d_states,
    )
    for name, value in seg_grads.items():
        grads[name] += value
    grads["role_bias"] += d_role_bias
    cells = frames.shape[1] * frames.shape[2]
    d_frames = np.broadcast_to(
        d_pooled[:, None, None, :] / cells, frames.shape
    ).copy()

    pairs = [(frames, d_frames)]
    pairs += [(tensor, grads[name]) for name, tensor in params.tensors().items()]
    return _compare(loss, pairs, step)


def check_decoder(seed: int, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    grid_h, grid_w, grid_d, d_sam = 2, 3, 4, 3
    out_h, out_w = 4, 6
    params = ToyDecoderParams.init(grid_d, d_sam, rng)
    grid = rng.normal(size=(grid_h, grid_w, grid_d))
    prompt = rng.normal(size=d_sam)
    weights = rng.normal(size=(out_h, out_w))
    b_holder = np.array([params.b_mask])

    def loss() -> float:
        params.b_mask = float(b_holder[0])
        return float((decode_mask(grid, prompt, params, out_h, out_w) * weights).sum())

    d_prompt, d_w, d_b, d_grid = decode_mask_backward(grid, prompt, params, weights)
    return _compare(
        loss,
        [
            (grid, d_grid),
            (prompt, d_prompt),
            (params.w_mask, d_w),
            (b_holder, np.array([d_b])),
        ],
        step,
    )


def check_bce(seed: int, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 4))
    mask = (rng.random((3, 4)) < 0.5).astype(float)

    def loss() -> float:
        return losses.bce_loss(logits, mask)

    return _compare(loss, [(logits, losses.bce_backward(logits, mask))], step)


def check_dice(seed: int, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    # Keep probabilities in (step, 1 - step) so perturbations stay valid.
    probs = 0.02 + 0.96 * rng.random((3, 4))
    mask = (rng.random((3, 4)) < 0.5).astype(float)
    eps = 0.7

    def loss() -> float:
        return losses.dice_loss(probs, mask, eps)

    return _compare(loss, [(probs, losses.dice_backward(probs, mask, eps))], step)


def check_token_ce(seed: int, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    length, n_vocab = 6, 5
    logits = rng.normal(size=(length, n_vocab))
    targets = losses.TokenTargets(
        rng.integers(n_vocab, size=length), frozenset({1, 4})
    )

    def loss_pair() -> float:
        llm, ent = losses.token_ce(logits, targets)
        return llm + 2.0 * ent

    error = _compare(
        loss_pair,
        [(logits, losses.token_ce_backward(logits, targets, d_llm=1.0, d_ent=2.0))],
        step,
    )

    def loss_reweighted() -> float:
        return losses.token_ce_reweighted(logits, targets, w_ent=3.0)

    error = max(
        error,
        _compare(
            loss_reweighted,
            [(logits, losses.token_ce_reweighted_backward(logits, targets, w_ent=3.0))],
            step,
        ),
    )
    return error


def check_fused_mask(seed: int, step: float = DEFAULT_STEP) -> float:
    """The fused kernel's combined BCE+Dice gradient (active backend)."""
    rng = np.random.default_rng(seed)
    grid_h, grid_w, grid_d, d_sam, block = 2, 3, 4, 3, 4.0
    grid = np.ascontiguousarray(rng.normal(size=(grid_h, grid_w, grid_d)))
    w_mask = np.ascontiguousarray(rng.normal(size=(grid_d, d_sam)))
    prompt = np.ascontiguousarray(rng.normal(size=d_sam))
    fg = np.ascontiguousarray(rng.integers(0, 5, size=(grid_h, grid_w)).astype(float))
    w_bce, w_dice, eps = 1.3, 0.7, 1.0
    d_prompt = np.zeros(d_sam)
    d_w = np.zeros((grid_d, d_sam))

    def loss() -> float:
        bce, dice, _ = fused_mask_loss(
            grid, w_mask, 0.1, prompt, fg, block, w_bce, w_dice, eps,
            np.zeros(d_sam), np.zeros((grid_d, d_sam)),
        )
        return w_bce * bce + w_dice * dice

    fused_mask_loss(
        grid, w_mask, 0.1, prompt, fg, block, w_bce, w_dice, eps, d_prompt, d_w
    )
    return _compare(loss, [(prompt, d_prompt), (w_mask, d_w)], step)


CHECKS: dict[str, Callable[[int, float], float]] = {
    "projection": check_projection,
    "fusion": check_fusion,
    "reasoner": check_reasoner,
    "decoder": check_decoder,
    "bce": check_bce,
    "dice": check_dice,
    "token_ce": check_token_ce,
    "fused_mask": check_fused_mask,
}

MODULE_ALIASES = {
    "all": tuple(CHECKS),
    "fusion": ("projection", "fusion"),
    "losses": ("bce", "dice", "token_ce"),
    "toy_model": ("reasoner", "decoder"),
    "kernels": ("fused_mask",),
}


def run_gradcheck(
    ops: tuple[str, ...] | None = None,
    n_seeds: int = 20,
    step: float = DEFAULT_STEP,
) -> dict[str, float]:
    """Max relative error per op over ``n_seeds`` random instances."""
    names = tuple(CHECKS) if ops is None else ops
    results = {}
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown gradcheck op {name!r}")
        results[name] = max(CHECKS[name](seed, step) for seed in range(n_seeds))
    return results
