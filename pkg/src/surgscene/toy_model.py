"""Desk-scale differentiable stand-ins for the reasoner and mask decoder.

The reasoner is a per-frame classifier bank over mean-pooled grid features:
phase logits, triplet-presence logits, a count head, and per-marker hidden
states for [SEG] positions.  Its text output is produced by thresholding
triplet logits at 0, taking the phase argmax (ties to the lowest id) and
rendering through the exact grammar template, so the marker-count law holds
end to end.

Language supervision is teacher-forced token cross-entropy over the
template vocabulary: every token position is scored by a position-role
conditioned head (entity-name positions are wired to the phase/triplet
heads, structural positions to learned bias rows), which keeps the loss
structure of the full objective while staying small enough for
finite-difference verification.

The decoder scores each grid cell with a bilinear form of cell feature and
fused prompt, then nearest-neighbor upsamples to mask resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grammar import (
    INSTRUMENT,
    TARGET,
    FrameSemantics,
    SegMarker,
    render,
)
from .vocab import LabelSpace

# ---------------------------------------------------------------------------
# Inputs


@dataclass
class VideoClip:
    """Synthetic stand-in for an encoded clip: per-frame feature grids."""

    frames: np.ndarray  # (T, h, w, d) float
    mask_h: int
    mask_w: int
    video_id: str = "clip"

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError("frames must be (T, h, w, d) with T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("non-finite frame features")
        _, h, w, _ = self.frames.shape
        if self.mask_h % h or self.mask_w % w:
            raise ValueError(
                f"mask resolution {self.mask_h}x{self.mask_w} must be a "
                f"multiple of the grid {h}x{w}"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]


@dataclass
class ReasonerInput:
    """Instruction token ids concatenated with per-frame visual tokens."""

    instruction_ids: np.ndarray  # (n_q,) int
    visual_tokens: np.ndarray  # (T, d) pooled grid features

    def __post_init__(self) -> None:
        self.instruction_ids = np.asarray(self.instruction_ids, dtype=np.int64)
        self.visual_tokens = np.asarray(self.visual_tokens, dtype=np.float64)
        if self.instruction_ids.ndim != 1 or self.visual_tokens.ndim != 2:
            raise ValueError("bad reasoner input shapes")

    @property
    def sequence_length(self) -> int:
        return self.instruction_ids.size + self.visual_tokens.shape[0]


DEFAULT_INSTRUCTION = (0, 1, 2)  # fixed query over the tiny instruction vocab


def make_reasoner_input(
    clip: VideoClip, instruction_ids=DEFAULT_INSTRUCTION
) -> ReasonerInput:
    """Mean-pool each frame grid into one visual token."""
    return ReasonerInput(
        instruction_ids=np.asarray(instruction_ids),
        visual_tokens=clip.frames.mean(axis=(1, 2)),
    )


# ---------------------------------------------------------------------------
# Template token vocabulary and position roles

_FIXED_THINK_TOKENS = ("<think>", "</think><answer>", "<think></think><answer>")
_STRUCT_TOKENS = _FIXED_THINK_TOKENS + (
    "During",
    "phase,",
    "surgical",
    "triplet(s)",
    "identified:",
    "identified.",
    "instrument",
    "target",
    "action",
    "is",
    "are",
    "[SEG],",
    "</answer>",
)

ROLE_THINK = 0
ROLE_COUNT = 1
ROLE_PHASE_NAME = 2
ROLE_INST_NAME = 3
ROLE_TARG_NAME = 4
ROLE_VERB_NAME = 5
ROLE_ISARE = 6
_ROLE_ENUM_BASE = 7

ENTITY_ROLES = frozenset(
    {ROLE_PHASE_NAME, ROLE_INST_NAME, ROLE_TARG_NAME, ROLE_VERB_NAME}
)


@dataclass
class TokenVocab:
    """Closed vocabulary of the rendered template plus think-text words."""

    tokens: tuple[str, ...]
    n_max: int
    phase_slots: np.ndarray
    inst_slots: np.ndarray
    targ_slots: np.ndarray
    verb_slots: np.ndarray
    count_slots: np.ndarray
    n_roles: int
    _struct_roles: dict[str, int]
    _token_to_id: dict[str, int]

    @classmethod
    def build(
        cls, space: LabelSpace, n_max: int = 3, extra_tokens: tuple[str, ...] = ()
    ) -> "TokenVocab":
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        ordered: dict[str, int] = {}

        def add(token: str) -> int:
            if token not in ordered:
                ordered[token] = len(ordered)
            return ordered[token]

        for token in _STRUCT_TOKENS:
            add(token)
        count_slots = np.array([add(str(n)) for n in range(n_max + 1)])
        for k in range(1, n_max + 1):
            add(f"({k})")
        phase_slots = np.array([add(name) for name in space.phases])
        inst_slots = np.array([add(name) for name in space.instruments])
        targ_slots = np.array([add(name) for name in space.targets])
        verb_slots = np.array([add(f"{name}.") for name in space.verbs])
        for token in extra_tokens:
            add(token)

        n_roles = _ROLE_ENUM_BASE + n_max + len(_STRUCT_TOKENS)
        struct_roles = {
            token: _ROLE_ENUM_BASE + n_max + i
            for i, token in enumerate(_STRUCT_TOKENS)
        }
        return cls(
            tokens=tuple(ordered),
            n_max=n_max,
            phase_slots=phase_slots,
            inst_slots=inst_slots,
            targ_slots=targ_slots,
            verb_slots=verb_slots,
            count_slots=count_slots,
            n_roles=n_roles,
            _struct_roles=struct_roles,
            _token_to_id=ordered,
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def token_id(self, token: str) -> int:
        if token not in self._token_to_id:
            raise KeyError(f"token {token!r} not in template vocabulary")
        return self._token_to_id[token]

    def enum_role(self, k: int) -> int:
        return _ROLE_ENUM_BASE + min(k, self.n_max) - 1

    def struct_role(self, token: str) -> int:
        return self._struct_roles[token]


@dataclass
class TokenStream:
    """Teacher-forcing view of one frame's rendered text.

    ``continuations`` drives presence calibration: at each enumeration
    position (and at the answer close, via the enum token that would start
    the next item) the named vocab slot receives log-sum-exp evidence over
    the triplet classes that could still be enumerated.  This mirrors the
    continue-vs-stop decision an autoregressive decoder is trained on, and
    is what pins absent-class logits below the detection threshold.
    """

    token_ids: np.ndarray  # (L,)
    roles: np.ndarray  # (L,)
    entity_positions: frozenset[int]
    continuations: tuple[tuple[int, int, np.ndarray], ...] = ()
    # each entry: (position, vocab slot id, candidate triplet-class ids)


def build_token_stream(
    semantics: FrameSemantics,
    think_text: str,
    space: LabelSpace,
    vocab: TokenVocab,
) -> TokenStream:
    """Tokenize the rendered text and attach a role to every position.

    The token sequence is exactly ``render(...)`` split on whitespace; think
    text must therefore tokenize into known vocabulary entries (the harness
    pads narratives with spaces so the tags stay separate tokens).  Items
    are expected in ascending triplet-class order (the canonical rendering
    order of this model).
    """
    text = render(semantics, think_text, space)
    tokens = text.split()
    n = semantics.n_triplets
    item_ids = [space.triplet_id(t) for t in semantics.triplets]

    roles: list[int] = []
    cursor = 0
    while tokens[cursor] != "During":
        token = tokens[cursor]
        if token in _FIXED_THINK_TOKENS:
            roles.append(vocab.struct_role(token))
        else:
            roles.append(ROLE_THINK)
        cursor += 1

    def struct(token: str) -> int:
        return vocab.struct_role(token)

    roles.extend(
        [
            struct("During"),
            ROLE_PHASE_NAME,
            struct("phase,"),
            ROLE_COUNT,
            struct("surgical"),
            struct("triplet(s)"),
            ROLE_ISARE,
            struct("identified." if n == 0 else "identified:"),
        ]
    )
    continuations: list[tuple[int, int, np.ndarray]] = []

    def not_yet_enumerated(done: list[int]) -> np.ndarray:
        return np.array(
            [c for c in range(space.num_triplets) if c not in done], dtype=np.int64
        )

    for k in range(1, n + 1):
        candidates = not_yet_enumerated(item_ids[: k - 1])
        if candidates.size:
            continuations.append((len(roles), vocab.token_id(f"({k})"), candidates))
        roles.extend(
            [
                vocab.enum_role(k),
                struct("instrument"),
                struct("is"),
                ROLE_INST_NAME,
                struct("[SEG],"),
                struct("target"),
                struct("is"),
                ROLE_TARG_NAME,
                struct("[SEG],"),
                struct("action"),
                struct("is"),
                ROLE_VERB_NAME,
            ]
        )
    stop_candidates = not_yet_enumerated(item_ids)
    if stop_candidates.size and n + 1 <= vocab.n_max:
        continuations.append(
            (len(roles), vocab.token_id(f"({n + 1})"), stop_candidates)
        )
    roles.append(struct("</answer>"))
    if len(roles) != len(tokens):  # pragma: no cover - template/stream drift
        raise RuntimeError("role layout out of sync with rendered template")

    token_ids = np.array([vocab.token_id(t) for t in tokens], dtype=np.int64)
    role_array = np.array(roles, dtype=np.int64)
    entity = frozenset(np.flatnonzero(np.isin(role_array, list(ENTITY_ROLES))).tolist())
    return TokenStream(
        token_ids=token_ids,
        roles=role_array,
        entity_positions=entity,
        continuations=tuple(continuations),
    )


# ---------------------------------------------------------------------------
# Reasoner parameters and forward/backward


def _component_membership(space: LabelSpace) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """0/1 matrices mapping triplet classes to their components."""
    k = space.num_triplets
    a_inst = np.zeros((k, len(space.instruments)))
    a_verb = np.zeros((k, len(space.verbs)))
    a_targ = np.zeros((k, len(space.targets)))
    for row, (i, v, o) in enumerate(space.valid_triplets):
        a_inst[row, i] = 1.0
        a_verb[row, v] = 1.0
        a_targ[row, o] = 1.0
    return a_inst, a_verb, a_targ


@dataclass
class ToyReasonerParams:
    """Trainable tensors of the toy reasoner (plus fixed wiring matrices)."""

    w_emb: np.ndarray  # (d, d_llm)
    b_emb: np.ndarray  # (d_llm,)
    instr_embed: np.ndarray  # (instr_vocab, d)
    w_phase: np.ndarray  # (d_llm, P)
    b_phase: np.ndarray
    w_trip: np.ndarray  # (d_llm, K)
    b_trip: np.ndarray
    w_count: np.ndarray  # (d_llm, n_max + 1)
    b_count: np.ndarray
    w_seg: np.ndarray  # (d_llm, d_llm)
    b_seg: np.ndarray
    ent_embed: np.ndarray  # (n_inst + n_targ, d_llm)
    role_bias: np.ndarray  # (n_roles, V)
    a_inst: np.ndarray = field(repr=False, default=None)  # fixed wiring
    a_verb: np.ndarray = field(repr=False, default=None)
    a_targ: np.ndarray = field(repr=False, default=None)
    n_inst: int = 0

    @classmethod
    def init(
        cls,
        space: LabelSpace,
        vocab: TokenVocab,
        d: int,
        d_llm: int,
        rng: np.random.Generator,
        instr_vocab: int = 8,
        scale: float = 0.5,
    ) -> "ToyReasonerParams":
        a_inst, a_verb, a_targ = _component_membership(space)

        def dense(rows: int, cols: int) -> np.ndarray:
            return rng.normal(0.0, scale / np.sqrt(rows), size=(rows, cols))

        return cls(
            w_emb=dense(d, d_llm),
            b_emb=np.zeros(d_llm),
            instr_embed=rng.normal(0.0, 0.1, size=(instr_vocab, d)),
            w_phase=dense(d_llm, len(space.phases)),
            b_phase=np.zeros(len(space.phases)),
            w_trip=dense(d_llm, space.num_triplets),
            b_trip=np.zeros(space.num_triplets),
            w_count=dense(d_llm, vocab.n_max + 1),
            b_count=np.zeros(vocab.n_max + 1),
            w_seg=dense(d_llm, d_llm),
            b_seg=np.zeros(d_llm),
            ent_embed=rng.normal(
                0.0, scale, size=(len(space.instruments) + len(space.targets), d_llm)
            ),
            role_bias=np.zeros((vocab.n_roles, len(vocab))),
            a_inst=a_inst,
            a_verb=a_verb,
            a_targ=a_targ,
            n_inst=len(space.instruments),
        )

    _TRAINABLE = (
        "w_emb", "b_emb", "instr_embed", "w_phase", "b_phase", "w_trip",
        "b_trip", "w_count", "b_count", "w_seg", "b_seg", "ent_embed",
        "role_bias",
    )

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self._TRAINABLE}

    def entity_row(self, kind: str, label_id: int) -> int:
        return label_id if kind == INSTRUMENT else self.n_inst + label_id


def zeros_like_tensors(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in tensors.items()}


@dataclass
class ReasonerOutputs:
    phase_logits: np.ndarray  # (T, P)
    triplet_logits: np.ndarray  # (T, K)
    count_logits: np.ndarray  # (T, n_max + 1)
    frame_states: np.ndarray  # (T, d_llm) trunk activations
    _pooled: np.ndarray = field(repr=False, default=None)
    _pre: np.ndarray = field(repr=False, default=None)


def reason(
    clip: VideoClip,
    params: ToyReasonerParams,
    space: LabelSpace,
    instruction_ids=DEFAULT_INSTRUCTION,
) -> ReasonerOutputs:
    """Deterministic forward pass over all frames of a clip."""
    del space  # head dimensions are fixed at init; kept for call symmetry
    inputs = make_reasoner_input(clip, instruction_ids)
    pooled = inputs.visual_tokens + params.instr_embed[inputs.instruction_ids].mean(
        axis=0
    )
    pre = pooled @ params.w_emb + params.b_emb
    u = np.tanh(pre)
    return ReasonerOutputs(
        phase_logits=u @ params.w_phase + params.b_phase,
        triplet_logits=u @ params.w_trip + params.b_trip,
        count_logits=u @ params.w_count + params.b_count,
        frame_states=u,
        _pooled=pooled,
        _pre=pre,
    )


def reason_backward(
    params: ToyReasonerParams,
    outputs: ReasonerOutputs,
    d_phase: np.ndarray | None = None,
    d_trip: np.ndarray | None = None,
    d_count: np.ndarray | None = None,
    d_frame_states: np.ndarray | None = None,
    instruction_ids=DEFAULT_INSTRUCTION,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients w.r.t. pooled frame features and reasoner tensors.

    Returns (d_pooled, grads); divide d_pooled by the cell count to map it
    back onto the (T, h, w, d) feature grid of the mean pool.
    """
    u = outputs.frame_states
    n_frames, d_llm = u.shape
    grads = zeros_like_tensors(params.tensors())
    d_u = np.zeros_like(u)
    if d_frame_states is not None:
        d_u += d_frame_states
    for d_out, w_name, b_name, weight in (
        (d_phase, "w_phase", "b_phase", params.w_phase),
        (d_trip, "w_trip", "b_trip", params.w_trip),
        (d_count, "w_count", "b_count", params.w_count),
    ):
        if d_out is None:
            continue
        grads[w_name] += u.T @ d_out
        grads[b_name] += d_out.sum(axis=0)
        d_u += d_out @ weight.T
    d_pre = d_u * (1.0 - u * u)
    grads["w_emb"] += outputs._pooled.T @ d_pre
    grads["b_emb"] += d_pre.sum(axis=0)
    d_pooled = d_pre @ params.w_emb.T
    instr = np.asarray(instruction_ids, dtype=np.int64)
    d_instr_mean = d_pooled.sum(axis=0) / instr.size
    np.add.at(grads["instr_embed"], instr, d_instr_mean)
    return d_pooled, grads


# -- [SEG] hidden states -----------------------------------------------------


def seg_hidden_states(
    bases: np.ndarray,
    entity_rows: np.ndarray,
    params: ToyReasonerParams,
) -> tuple[np.ndarray, dict]:
    """Hidden state per marker: tanh(base @ w_seg + b_seg + ent_embed[row]).

    ``bases`` is one trunk vector per marker (its frame's state, or an
    occurrence mean in shared-token mode).
    """
    bases = np.atleast_2d(np.asarray(bases, dtype=np.float64))
    entity_rows = np.asarray(entity_rows, dtype=np.int64)
    pre = bases @ params.w_seg + params.b_seg + params.ent_embed[entity_rows]
    hidden = np.tanh(pre)
    return hidden, {"bases": bases, "hidden": hidden, "rows": entity_rows}


def seg_hidden_backward(
    params: ToyReasonerParams, cache: dict, d_hidden: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients w.r.t. marker bases and the seg-head tensors."""
    hidden = cache["hidden"]
    d_pre = np.asarray(d_hidden) * (1.0 - hidden * hidden)
    grads = {
        "w_seg": cache["bases"].T @ d_pre,
        "b_seg": d_pre.sum(axis=0),
        "ent_embed": np.zeros_like(params.ent_embed),
    }
    np.add.at(grads["ent_embed"], cache["rows"], d_pre)
    return d_pre @ params.w_seg.T, grads


def marker_entity_rows(
    markers: tuple[SegMarker, ...], params: ToyReasonerParams
) -> np.ndarray:
    return np.array(
        [params.entity_row(m.entity_kind, m.label_id) for m in markers],
        dtype=np.int64,
    )


# ---------------------------------------------------------------------------
# Token-position logits (teacher forcing)


def _log_sum_exp(values: np.ndarray) -> float:
    peak = values.max()
    return float(peak + np.log(np.exp(values - peak).sum()))


# Gain on the continue-vs-stop evidence.  The decision positions are a tiny
# fraction of the token stream, so their cross-entropy pressure is heavily
# diluted by the mean over positions; a sharper decision head concentrates
# it and makes the presence threshold converge at desk-scale budgets.
DECISION_GAIN = 4.0


def token_logits_for_frame(
    vocab: TokenVocab,
    params: ToyReasonerParams,
    stream: TokenStream,
    phase_logits: np.ndarray,
    triplet_logits: np.ndarray,
    count_logits: np.ndarray,
) -> np.ndarray:
    """Assemble (L, V) logits: a bias row per role plus head scatters.

    Entity-name slots receive the phase/triplet head outputs; enumeration
    slots receive continue-vs-stop evidence (log-sum-exp of the candidate
    triplet logits), which calibrates absolute presence levels.
    """
    logits = params.role_bias[stream.roles].copy()
    inst_evidence = triplet_logits @ params.a_inst
    verb_evidence = triplet_logits @ params.a_verb
    targ_evidence = triplet_logits @ params.a_targ
    for role, slots, evidence in (
        (ROLE_PHASE_NAME, vocab.phase_slots, phase_logits),
        (ROLE_INST_NAME, vocab.inst_slots, inst_evidence),
        (ROLE_TARG_NAME, vocab.targ_slots, targ_evidence),
        (ROLE_VERB_NAME, vocab.verb_slots, verb_evidence),
        (ROLE_COUNT, vocab.count_slots, count_logits),
    ):
        for position in np.flatnonzero(stream.roles == role):
            logits[position, slots] += evidence
    # Continue-vs-stop decisions compete against a fixed zero reference on
    # the closing tag (no learned bias on either slot); this is what anchors
    # absent-class logits below the detection threshold.
    close_slot = vocab.token_id("</answer>")
    for position, slot, candidates in stream.continuations:
        logits[position, slot] = DECISION_GAIN * _log_sum_exp(triplet_logits[candidates])
        logits[position, close_slot] = 0.0
    return logits


def token_logits_backward(
    vocab: TokenVocab,
    params: ToyReasonerParams,
    stream: TokenStream,
    triplet_logits: np.ndarray,
    d_logits: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Scatter token-logit gradients back to the heads and role biases.

    Returns (d_role_bias, d_phase, d_trip, d_count) for one frame;
    ``triplet_logits`` must be the forward values (the continuation
    evidence is nonlinear in them).
    """
    d_for_bias = d_logits
    if stream.continuations:
        close_slot = vocab.token_id("</answer>")
        d_for_bias = d_logits.copy()
        for position, slot, _ in stream.continuations:
            d_for_bias[position, slot] = 0.0
            d_for_bias[position, close_slot] = 0.0
    d_role_bias = np.zeros_like(params.role_bias)
    np.add.at(d_role_bias, stream.roles, d_for_bias)
    d_phase = np.zeros(params.w_phase.shape[1])
    d_trip = np.zeros(params.w_trip.shape[1])
    d_count = np.zeros(params.w_count.shape[1])
    for role, slots, a_matrix, sink in (
        (ROLE_PHASE_NAME, vocab.phase_slots, None, d_phase),
        (ROLE_INST_NAME, vocab.inst_slots, params.a_inst, d_trip),
        (ROLE_TARG_NAME, vocab.targ_slots, params.a_targ, d_trip),
        (ROLE_VERB_NAME, vocab.verb_slots, params.a_verb, d_trip),
        (ROLE_COUNT, vocab.count_slots, None, d_count),
    ):
        for position in np.flatnonzero(stream.roles == role):
            pulled = d_logits[position, slots]
            sink += pulled if a_matrix is None else a_matrix @ pulled
    for position, slot, candidates in stream.continuations:
        values = triplet_logits[candidates]
        weights = np.exp(values - values.max())
        weights /= weights.sum()
        d_trip[candidates] += DECISION_GAIN * d_logits[position, slot] * weights
    return d_role_bias, d_phase, d_trip, d_count


# ---------------------------------------------------------------------------
# Prediction helpers


def predict_semantics(
    outputs: ReasonerOutputs, space: LabelSpace, first_frame_index: int = 0
) -> list[FrameSemantics]:
    """Threshold triplet logits at 0, argmax phases (ties to lowest id)."""
    result = []
    for t in range(outputs.phase_logits.shape[0]):
        present = np.flatnonzero(outputs.triplet_logits[t] > 0.0)
        result.append(
            FrameSemantics(
                frame_index=first_frame_index + t,
                phase=int(np.argmax(outputs.phase_logits[t])),
                triplets=tuple(space.valid_triplets[k] for k in present),
            )
        )
    return result


# ---------------------------------------------------------------------------
# Mask decoder


@dataclass
class ToyDecoderParams:
    """Bilinear cell scorer: logit(cell) = feature @ w_mask @ prompt + bias."""

    w_mask: np.ndarray  # (d, d_sam)
    b_mask: float

    @classmethod
    def init(
        cls, d: int, d_sam: int, rng: np.random.Generator, scale: float = 0.5
    ) -> "ToyDecoderParams":
        return cls(w_mask=rng.normal(0.0, scale / np.sqrt(d), size=(d, d_sam)), b_mask=0.0)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w_mask": self.w_mask, "b_mask": np.atleast_1d(self.b_mask)}


def upsample_nearest(cells: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Replicate each cell into an (out_h/h) x (out_w/w) block."""
    h, w = cells.shape
    if out_h % h or out_w % w:
        raise ValueError("output resolution must be a multiple of the grid")
    return np.repeat(np.repeat(cells, out_h // h, axis=0), out_w // w, axis=1)


def downsample_sum(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of nearest-neighbor upsampling: sum each block."""
    out_h, out_w = pixels.shape
    return pixels.reshape(h, out_h // h, w, out_w // w).sum(axis=(1, 3))


def decode_mask(
    grid: np.ndarray,
    prompt: np.ndarray,
    params: ToyDecoderParams,
    out_h: int,
    out_w: int,
) -> np.ndarray:
    """Mask logits (out_h, out_w) for one frame grid and one fused prompt."""
    grid = np.asarray(grid, dtype=np.float64)
    prompt = np.asarray(prompt, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[2] != params.w_mask.shape[0]:
        raise ValueError(f"grid shape {grid.shape} does not match decoder")
    if prompt.shape != (params.w_mask.shape[1],):
        raise ValueError(f"prompt shape {prompt.shape} does not match decoder")
    cells = grid @ (params.w_mask @ prompt) + params.b_mask
    return upsample_nearest(cells, out_h, out_w)


def decode_mask_backward(
    grid: np.ndarray,
    prompt: np.ndarray,
    params: ToyDecoderParams,
    d_logits: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Gradients (d_prompt, d_w_mask, d_b_mask, d_grid) for one mask."""
    h, w, d = grid.shape
    d_cells = downsample_sum(np.asarray(d_logits, dtype=np.float64), h, w)
    flat_grid = grid.reshape(h * w, d)
    pulled = flat_grid.T @ d_cells.ravel()  # (d,)
    d_prompt = params.w_mask.T @ pulled
    d_w_mask = np.outer(pulled, prompt)
    d_b_mask = float(d_cells.sum())
    d_grid = d_cells[:, :, None] * (params.w_mask @ prompt)
    return d_prompt, d_w_mask, d_b_mask, d_grid


def binarize(logits: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    return np.asarray(logits) > threshold


# ---------------------------------------------------------------------------
# Checkpoints: flat binary + text manifest


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors as one flat binary plus a manifest."""
    path = Path(path)
    manifest_lines = []
    offset = 0
    with open(path, "wb") as blob:
        for name, value in tensors.items():
            data = np.ascontiguousarray(value, dtype=np.float64)
            blob.write(data.tobytes())
            shape = "x".join(str(s) for s in data.shape) or "scalar"
            manifest_lines.append(f"{name} {shape} {offset}")
            offset += data.nbytes
    path.with_suffix(path.suffix + ".manifest").write_text(
        "\n".join(manifest_lines) + "\n"
    )


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = np.fromfile(path, dtype=np.float64)
    tensors: dict[str, np.ndarray] = {}
    manifest = path.with_suffix(path.suffix + ".manifest").read_text()
    for line in manifest.strip().splitlines():
        name, shape_text, offset_text = line.split()
        shape = (
            ()
            if shape_text == "scalar"
            else tuple(int(s) for s in shape_text.split("x"))
        )
        count = int(np.prod(shape)) if shape else 1
        start = int(offset_text) // 8
        tensors[name] = blob[start : start + count].reshape(shape).copy()
    return tensors
