"""Synthetic-scene generation, end-to-end training, and the ablation matrix.

The generator plants per-entity feature signatures in rectangular grid
regions, encodes the workflow phase both globally (one-hot channels) and in
the mask geometry (the last phase shrinks every entity mask to its inner
band), and samples triplets from a phase-conditioned table.  This bakes the
phase/interaction coupling into the data, so joint training measurably
helps each task and the ablation directions are observable at desk scale.

Training is plain full-clip gradient descent with a fixed step size; every
run is bitwise deterministic given its config and seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, dataset_io, kernels, losses, metrics
from .fusion import (
    MODE_FULL,
    MODE_NO_FUSION,
    MLPGrads,
    ProjectionParams,
    PromptBatch,
    group_occurrences,
    project_hidden,
    project_hidden_backward,
    residual_fuse,
    residual_fuse_backward,
)
from .grammar import INSTRUMENT, TARGET, FrameSemantics, SegMarker, parse, render
from .toy_model import (
    ROLE_COUNT,
    ROLE_INST_NAME,
    ROLE_PHASE_NAME,
    ROLE_TARG_NAME,
    ROLE_VERB_NAME,
    TokenStream,
    TokenVocab,
    ToyDecoderParams,
    ToyReasonerParams,
    VideoClip,
    build_token_stream,
    decode_mask,
    downsample_sum,
    predict_semantics,
    reason,
    reason_backward,
    save_tensors,
    seg_hidden_backward,
    seg_hidden_states,
    token_logits_backward,
    token_logits_for_frame,
    upsample_nearest,
)
from .vocab import LabelSpace, label_space_from_dict

ABLATIONS = (
    "full",
    "no_residual_fusion",
    "no_per_frame_token",
    "no_phase",
    "no_triplet",
    "no_grounding",
)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# Configs


def toy_label_space_config() -> dict:
    """Default small label space: rich enough for grouping and association APs."""
    return {
        "phases": ["inspection", "dissection", "closure"],
        "instruments": ["probe", "forceps", "cutter"],
        "verbs": ["touch", "pull", "cut"],
        "targets": ["tissue-a", "tissue-b", "duct", "vessel"],
        "valid_triplets": [
            [0, 0, 0], [0, 1, 1], [1, 1, 1], [1, 2, 2], [2, 0, 3], [2, 2, 0],
        ],
    }


def default_phase_triplet_table() -> list[list[float]]:
    return [
        [0.40, 0.40, 0.07, 0.05, 0.04, 0.04],
        [0.05, 0.05, 0.40, 0.40, 0.05, 0.05],
        [0.04, 0.04, 0.05, 0.07, 0.40, 0.40],
    ]


@dataclass
class SynthConfig:
    """Generator knobs.

    Each entity class owns a grid rectangle; present entities plant their
    signature there.  Masks cover the full rectangle except that (a) frames
    of the last phase and (b) entities whose per-video appearance amplitude
    is low shrink to the inner band.  Phase varies within a video, so mask
    geometry needs per-frame prompts; the appearance amplitude is constant
    per video but noisy to estimate from one frame, so it rewards temporal
    fusion of the prompt rows.
    """

    seed: int = 0
    videos: int = 20
    frames_per_video: int = 16
    grid_h: int = 8
    grid_w: int = 8
    grid_d: int = 8
    mask_h: int = 32
    mask_w: int = 32
    space_config: dict = field(default_factory=toy_label_space_config)
    phase_triplet_table: list[list[float]] = field(
        default_factory=default_phase_triplet_table
    )
    n_triplet_weights: list[float] = field(default_factory=lambda: [0.15, 0.55, 0.30])
    phase_amp: float = 1.0
    entity_amp: float = 4.0
    inner_amp: float = 1.5
    noise: float = 0.3
    exposure_levels: list[float] = field(default_factory=lambda: [0.75, 1.25])
    exposure_jitter: float = 0.45
    exposure_amp: float = 1.5
    phase_scaled_masks: bool = True
    narratives: bool = True

    def space(self) -> LabelSpace:
        return label_space_from_dict(self.space_config)

    def validate(self) -> None:
        space = self.space()
        n_phases = len(space.phases)
        if self.frames_per_video < n_phases:
            raise ValueError("need at least one frame per phase")
        table = np.asarray(self.phase_triplet_table, dtype=np.float64)
        if table.shape != (n_phases, space.num_triplets):
            raise ValueError(
                f"phase_triplet_table must be {n_phases}x{space.num_triplets}"
            )
        if (table < 0).any() or not np.allclose(table.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("phase_triplet_table rows must be probabilities")
        weights = np.asarray(self.n_triplet_weights, dtype=np.float64)
        if (weights < 0).any() or not math.isclose(weights.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("n_triplet_weights must be probabilities")
        if not self.exposure_levels or any(a <= 0 for a in self.exposure_levels):
            raise ValueError("exposure_levels must be positive")
        if n_phases < 3:
            raise ValueError("need at least 3 phases for the geometry flags")
        if self.mask_h % self.grid_h or self.mask_w % self.grid_w:
            raise ValueError("mask resolution must be a multiple of the grid")
        if self.grid_d < 8:
            raise ValueError(
                f"grid_d={self.grid_d} too small for the feature layout (needs >= 8)"
            )
        if self.grid_h < 5 or self.grid_w < 2 * max(
            len(space.instruments), len(space.targets)
        ):
            raise ValueError("grid too small for the entity region layout")


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 800
    lr: float = 0.4
    d_llm: int = 16
    d_sam: int = 8
    n_max: int = 3
    activation: str = "tanh"
    init_scale: float = 0.5
    log_every: int = 10


def _filtered_kwargs(cls, raw: dict) -> dict:
    known = {f.name for f in getattr(cls, "__dataclass_fields__", {}).values()}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return raw


def load_run_config(path: str | Path) -> tuple[SynthConfig, TrainConfig, losses.LossWeights]:
    """Parse a run-config JSON file with 'synth', 'train', 'loss' sections."""
    raw = json.loads(Path(path).read_text())
    synth = SynthConfig(**_filtered_kwargs(SynthConfig, raw.get("synth", {})))
    train_cfg = TrainConfig(**_filtered_kwargs(TrainConfig, raw.get("train", {})))
    weights = losses.LossWeights(
        **_filtered_kwargs(losses.LossWeights, raw.get("loss", {}))
    )
    synth.validate()
    return synth, train_cfg, weights


# ---------------------------------------------------------------------------
# Synthetic dataset generation


@dataclass(frozen=True)
class _Rect:
    rows: slice
    cols: slice
    top_row: slice
    left_col: slice


def _entity_rects(
    space: LabelSpace, grid_h: int, grid_w: int
) -> dict[tuple[str, int], _Rect]:
    """2x2-cell region per entity class; disjoint within each kind."""
    rects = {}
    inst_r0 = max(1, grid_h // 4 - 1)
    targ_r0 = grid_h - max(1, grid_h // 4 - 1) - 2
    for i in range(len(space.instruments)):
        c0 = (i * grid_w) // len(space.instruments)
        rects[(INSTRUMENT, i)] = _Rect(
            rows=slice(inst_r0, inst_r0 + 2),
            cols=slice(c0, c0 + 2),
            top_row=slice(inst_r0, inst_r0 + 1),
            left_col=slice(c0, c0 + 1),
        )
    for o in range(len(space.targets)):
        c0 = (o * grid_w) // len(space.targets)
        rects[(TARGET, o)] = _Rect(
            rows=slice(targ_r0, targ_r0 + 2),
            cols=slice(c0, c0 + 2),
            top_row=slice(targ_r0, targ_r0 + 1),
            left_col=slice(c0, c0 + 1),
        )
    return rects


_GOLDEN_ANGLE = 2.399963229728653

# Feature channel allocation (first 8 channels; extras stay noise-only):
# 0 phase level (ordered scalar), 1 top-row flag, 2 left-column flag,
# 3-4 instrument direction, 5-6 target direction, 7 exposure carrier.
# Keeping every signal on its own channel group makes each decoder gate a
# separable linear readout.
_PHASE_CH = 0
_ROW_CH = 1
_COL_CH = 2
_INST_CH = slice(3, 5)
_TARG_CH = slice(5, 7)
_EXPO_CH = 7


def _ring_directions(count: int) -> np.ndarray:
    """Unit directions spread on the circle by the golden angle.

    Golden spacing avoids antipodal pairs for any count, so sums of a few
    co-present directions stay distinguishable from single ones.
    """
    angles = _GOLDEN_ANGLE * np.arange(count)
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _entity_cell_mask(
    rect: _Rect, grid_h: int, grid_w: int, top_only: bool, left_only: bool
) -> np.ndarray:
    cells = np.zeros((grid_h, grid_w), dtype=bool)
    cells[
        rect.top_row if top_only else rect.rows,
        rect.left_col if left_only else rect.cols,
    ] = True
    return cells


def _phase_schedule(
    rng: np.random.Generator, n_frames: int, n_phases: int
) -> np.ndarray:
    """Left-to-right phase progression covering every phase at least once."""
    boundaries = np.sort(
        rng.choice(np.arange(1, n_frames), size=n_phases - 1, replace=False)
    )
    phases = np.zeros(n_frames, dtype=np.int64)
    for b in boundaries:
        phases[b:] += 1
    return phases


def _sample_frame_triplets(
    rng: np.random.Generator, table_row: np.ndarray, n_weights: np.ndarray
) -> list[int]:
    count = int(rng.choice(len(n_weights), p=n_weights))
    chosen: list[int] = []
    for _ in range(count):
        for _attempt in range(10):
            k = int(rng.choice(table_row.size, p=table_row))
            if k not in chosen:
                chosen.append(k)
                break
    return sorted(chosen)


def generate_synthetic(config: SynthConfig, out_dir: str | Path) -> dataset_io.DatasetStats:
    """Generate a dataset (annotations + features + folds) under ``out_dir``."""
    config.validate()
    space = config.space()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rects = _entity_rects(space, config.grid_h, config.grid_w)
    inst_dirs = _ring_directions(len(space.instruments))
    targ_dirs = _ring_directions(len(space.targets))
    table = np.asarray(config.phase_triplet_table, dtype=np.float64)
    n_weights = np.asarray(config.n_triplet_weights, dtype=np.float64)
    n_phases = len(space.phases)

    annotations: list[dataset_io.FrameAnnotation] = []
    seeds = np.random.SeedSequence(config.seed).spawn(config.videos)
    gate_exposure = len(config.exposure_levels) > 1
    low_exposure = min(config.exposure_levels)
    for v in range(config.videos):
        rng = np.random.default_rng(seeds[v])
        video_id = f"video{v:02d}"
        phases = _phase_schedule(rng, config.frames_per_video, n_phases)
        exposure = float(rng.choice(config.exposure_levels))
        features = np.empty(
            (config.frames_per_video, config.grid_h, config.grid_w, config.grid_d)
        )
        for t in range(config.frames_per_video):
            p = int(phases[t])
            grid = rng.normal(
                0.0, config.noise, size=(config.grid_h, config.grid_w, config.grid_d)
            )
            grid[:, :, _PHASE_CH] += config.phase_amp * (p - (n_phases - 1) / 2.0)
            # Exposure is constant per video but observed with per-frame
            # jitter: single-frame estimates are unreliable, occurrence
            # means are not.
            observed = exposure * max(
                0.2, 1.0 + rng.normal(0.0, config.exposure_jitter)
            )
            grid[:, :, _EXPO_CH] += config.exposure_amp * observed
            triplet_ids = _sample_frame_triplets(rng, table[p], n_weights)
            late_phase = config.phase_scaled_masks and p == n_phases - 1
            entities: dict[tuple[str, int], None] = {}
            for k in triplet_ids:
                i, _, o = space.valid_triplets[k]
                entities.setdefault((INSTRUMENT, i))
                entities.setdefault((TARGET, o))
            triplet_records = []
            masks: dict[tuple[str, int], dataset_io.RleMask] = {}
            for key in entities:
                kind, label = key
                rect = rects[key]
                channels = _INST_CH if kind == INSTRUMENT else _TARG_CH
                dirs = inst_dirs if kind == INSTRUMENT else targ_dirs
                grid[rect.rows, rect.cols, channels] += config.entity_amp * dirs[label]
                grid[rect.top_row, rect.cols, _ROW_CH] += config.inner_amp
                grid[rect.rows, rect.left_col, _COL_CH] += config.inner_amp
                cell_mask = _entity_cell_mask(
                    rect, config.grid_h, config.grid_w,
                    top_only=late_phase,
                    left_only=gate_exposure and exposure == low_exposure,
                )
                masks[key] = dataset_io.rle_encode(
                    upsample_nearest(cell_mask.astype(np.float64), config.mask_h,
                                     config.mask_w) > 0.5
                )
            for k in triplet_ids:
                i, _, o = space.valid_triplets[k]
                triplet_records.append(
                    dataset_io.TripletAnnotation(
                        triplet_id=k,
                        instrument_mask=masks[(INSTRUMENT, i)],
                        target_mask=masks[(TARGET, o)],
                    )
                )
            features[t] = grid
            narrative = (
                f"routine {space.phases[p]} activity" if config.narratives else None
            )
            annotations.append(
                dataset_io.FrameAnnotation(
                    video_id=video_id,
                    frame_index=t,
                    phase_id=p,
                    triplets=tuple(triplet_records),
                    narrative=narrative,
                )
            )
        np.save(out_dir / "features" / f"{video_id}.npy", features)

    folds = {
        k: [f"video{v:02d}" for v in range(config.videos) if v % 5 == k - 1]
        for k in range(1, 6)
    }
    dataset_io.save_dataset(
        out_dir, annotations, space_config=config.space_config, folds=folds
    )
    (out_dir / "synth_config.json").write_text(
        json.dumps(asdict(config), indent=2, sort_keys=True) + "\n"
    )
    _, stats, issues = dataset_io.load_dataset(out_dir, space, strict=True)
    assert not issues
    return stats


# ---------------------------------------------------------------------------
# Model bundle and clip preparation


@dataclass
class PipelineParams:
    reasoner: ToyReasonerParams
    projection: ProjectionParams
    decoder: ToyDecoderParams
    vocab: TokenVocab
    space: LabelSpace

    @classmethod
    def init(
        cls, space: LabelSpace, vocab: TokenVocab, grid_d: int, cfg: TrainConfig
    ) -> "PipelineParams":
        rng = np.random.default_rng(cfg.seed)
        return cls(
            reasoner=ToyReasonerParams.init(
                space, vocab, grid_d, cfg.d_llm, rng, scale=cfg.init_scale
            ),
            projection=ProjectionParams.init(
                cfg.d_llm, cfg.d_sam, rng, activation=cfg.activation
            ),
            decoder=ToyDecoderParams.init(
                grid_d, cfg.d_sam, rng, scale=cfg.init_scale
            ),
            vocab=vocab,
            space=space,
        )

    def tensors(self) -> dict[str, np.ndarray]:
        merged = {}
        for name, value in self.reasoner.tensors().items():
            merged[f"reasoner.{name}"] = value
        for prefix, mlp in (
            ("projection.hidden", self.projection.hidden_proj),
            ("projection.fuse", self.projection.fuse_proj),
        ):
            for name, value in mlp.tensors().items():
                merged[f"{prefix}.{name}"] = value
        merged["decoder.w_mask"] = self.decoder.w_mask
        return merged

    def save(self, path: str | Path) -> None:
        tensors = dict(self.tensors())
        tensors["decoder.b_mask"] = np.atleast_1d(self.decoder.b_mask)
        save_tensors(path, tensors)


@dataclass
class FrameData:
    semantics: FrameSemantics
    stream: TokenStream
    markers: tuple[SegMarker, ...]
    fg_counts: list[np.ndarray]


@dataclass
class ClipData:
    video_id: str
    clip: VideoClip
    frames: list[FrameData]
    all_markers: tuple[SegMarker, ...]
    marker_frames: np.ndarray
    marker_rows: np.ndarray
    marker_fg: list[np.ndarray]
    gt_phase: np.ndarray
    gt_present: np.ndarray
    gt_class_masks: list[dict[tuple[str, int], np.ndarray]]


def _think_text(narrative: str | None) -> str:
    return f" {narrative} " if narrative else ""


def narrative_tokens(annotations: list[dataset_io.FrameAnnotation]) -> tuple[str, ...]:
    words: set[str] = set()
    for annotation in annotations:
        if annotation.narrative:
            words.update(annotation.narrative.split())
    return tuple(sorted(words))


def prepare_clip(
    video_id: str,
    annotations: list[dataset_io.FrameAnnotation],
    features: np.ndarray,
    space: LabelSpace,
    vocab: TokenVocab,
    mask_h: int,
    mask_w: int,
) -> ClipData:
    """Precompute streams, markers, per-cell mask counts and ground truth."""
    annotations = sorted(annotations, key=lambda a: a.frame_index)
    if len(annotations) != features.shape[0]:
        raise ValueError(
            f"{video_id}: {len(annotations)} annotations for "
            f"{features.shape[0]} feature frames"
        )
    clip = VideoClip(
        frames=features, mask_h=mask_h, mask_w=mask_w, video_id=video_id
    )
    grid_h, grid_w = features.shape[1], features.shape[2]
    frames: list[FrameData] = []
    n_inst = len(space.instruments)
    gt_present = np.zeros((len(annotations), space.num_triplets), dtype=bool)
    gt_class_masks: list[dict[tuple[str, int], np.ndarray]] = []
    for t, annotation in enumerate(annotations):
        semantics = FrameSemantics(
            frame_index=t,
            phase=annotation.phase_id,
            triplets=tuple(
                space.valid_triplets[item.triplet_id] for item in annotation.triplets
            ),
        )
        think = _think_text(annotation.narrative)
        parsed = parse(render(semantics, think, space), space, frame_index=t)
        stream = build_token_stream(semantics, think, space, vocab)
        fg_counts = []
        class_masks: dict[tuple[str, int], np.ndarray] = {}
        for item in annotation.triplets:
            gt_present[t, item.triplet_id] = True
            for kind, rle in (
                (INSTRUMENT, item.instrument_mask),
                (TARGET, item.target_mask),
            ):
                mask = dataset_io.rle_decode(rle)
                fg_counts.append(
                    np.ascontiguousarray(
                        downsample_sum(mask.astype(np.float64), grid_h, grid_w)
                    )
                )
                label = (
                    space.valid_triplets[item.triplet_id][0]
                    if kind == INSTRUMENT
                    else space.valid_triplets[item.triplet_id][2]
                )
                key = (kind, label)
                class_masks[key] = (
                    mask if key not in class_masks else class_masks[key] | mask
                )
        frames.append(
            FrameData(
                semantics=semantics,
                stream=stream,
                markers=parsed.seg_markers,
                fg_counts=fg_counts,
            )
        )
        gt_class_masks.append(class_masks)

    all_markers = tuple(m for f in frames for m in f.markers)
    marker_fg = [fg for f in frames for fg in f.fg_counts]
    marker_frames = np.array([m.frame_index for m in all_markers], dtype=np.int64)
    marker_rows = np.array(
        [
            m.label_id if m.entity_kind == INSTRUMENT else n_inst + m.label_id
            for m in all_markers
        ],
        dtype=np.int64,
    )
    return ClipData(
        video_id=video_id,
        clip=clip,
        frames=frames,
        all_markers=all_markers,
        marker_frames=marker_frames,
        marker_rows=marker_rows,
        marker_fg=marker_fg,
        gt_phase=np.array([a.phase_id for a in annotations], dtype=np.int64),
        gt_present=gt_present,
        gt_class_masks=gt_class_masks,
    )


def load_prepared_dataset(
    root: str | Path, cfg: TrainConfig
) -> tuple[dict[str, ClipData], LabelSpace, TokenVocab, dict]:
    """Load a generated dataset and precompute everything training needs."""
    root = Path(root)
    synth_raw = json.loads((root / "synth_config.json").read_text())
    space = label_space_from_dict(
        json.loads((root / "label_space.json").read_text())
    )
    annotations, _, issues = dataset_io.load_dataset(root, space, strict=True)
    assert not issues
    vocab = TokenVocab.build(
        space, n_max=cfg.n_max, extra_tokens=narrative_tokens(annotations)
    )
    by_video: dict[str, list[dataset_io.FrameAnnotation]] = {}
    for annotation in annotations:
        by_video.setdefault(annotation.video_id, []).append(annotation)
    clips = {}
    for video_id in sorted(by_video):
        features = np.load(root / "features" / f"{video_id}.npy")
        clips[video_id] = prepare_clip(
            video_id,
            by_video[video_id],
            features,
            space,
            vocab,
            synth_raw["mask_h"],
            synth_raw["mask_w"],
        )
    return clips, space, vocab, synth_raw


# ---------------------------------------------------------------------------
# Loss over one clip (teacher forced) with full backward pass

_EXCLUDED_ROLES = {
    "no_phase": (ROLE_PHASE_NAME,),
    "no_triplet": (ROLE_INST_NAME, ROLE_TARG_NAME, ROLE_VERB_NAME, ROLE_COUNT),
}


def _supervised_positions(stream: TokenStream, ablation: str) -> np.ndarray:
    keep = np.ones(stream.roles.size, dtype=bool)
    for role in _EXCLUDED_ROLES.get(ablation, ()):
        keep &= stream.roles != role
    if ablation == "no_triplet":
        # Enumeration/stop decisions carry triplet-presence supervision.
        for position, _, _ in stream.continuations:
            keep[position] = False
    return np.flatnonzero(keep)


def _shared_entities(
    clip_data: ClipData,
) -> tuple[list[tuple[str, int]], list[np.ndarray], list[list[int]]]:
    """Entity keys (first-seen order), occurrence frame rows, occurrence marker ids."""
    keys: list[tuple[str, int]] = []
    occ_frames: dict[tuple[str, int], list[int]] = {}
    occ_markers: dict[tuple[str, int], list[int]] = {}
    for idx, marker in enumerate(clip_data.all_markers):
        key = marker.entity_key
        if key not in occ_frames:
            keys.append(key)
            occ_frames[key] = []
            occ_markers[key] = []
        occ_frames[key].append(marker.frame_index)
        occ_markers[key].append(idx)
    return (
        keys,
        [np.array(occ_frames[k], dtype=np.int64) for k in keys],
        [occ_markers[k] for k in keys],
    )


def clip_loss_and_grads(
    params: PipelineParams,
    clip_data: ClipData,
    weights: losses.LossWeights,
    ablation: str = "full",
) -> tuple[losses.LossParts, float, dict[str, np.ndarray]]:
    """One teacher-forced forward/backward pass over a whole clip."""
    space, vocab = params.space, params.vocab
    outputs = reason(clip_data.clip, params.reasoner, space)
    n_frames = clip_data.clip.n_frames
    grads = {name: np.zeros_like(t) for name, t in params.tensors().items()}
    grads["decoder.b_mask"] = np.zeros(1)

    # -- token cross-entropy over supervised positions of all frames
    frame_logits = []
    supervised = []
    for t, frame in enumerate(clip_data.frames):
        logits = token_logits_for_frame(
            vocab, params.reasoner, frame.stream,
            outputs.phase_logits[t], outputs.triplet_logits[t],
            outputs.count_logits[t],
        )
        rows = _supervised_positions(frame.stream, ablation)
        frame_logits.append(logits)
        supervised.append(rows)
    big_logits = np.concatenate(
        [frame_logits[t][supervised[t]] for t in range(n_frames)]
    )
    big_targets = np.concatenate(
        [clip_data.frames[t].stream.token_ids[supervised[t]] for t in range(n_frames)]
    )
    entity_positions = set()
    offset = 0
    for t in range(n_frames):
        rows = supervised[t]
        local = {int(r): i for i, r in enumerate(rows)}
        for position in clip_data.frames[t].stream.entity_positions:
            if position in local:
                entity_positions.add(offset + local[position])
        offset += rows.size
    targets = losses.TokenTargets(big_targets, frozenset(entity_positions))
    if weights.ent_mode == "reweight":
        llm = losses.token_ce_reweighted(big_logits, targets, weights.w_ent)
        ent = 0.0
        d_big = losses.token_ce_reweighted_backward(big_logits, targets, weights.w_ent)
    else:
        llm, ent = losses.token_ce(big_logits, targets)
        d_big = losses.token_ce_backward(
            big_logits, targets, d_llm=1.0, d_ent=weights.lambda_ent
        )

    d_phase = np.zeros_like(outputs.phase_logits)
    d_trip = np.zeros_like(outputs.triplet_logits)
    d_count = np.zeros_like(outputs.count_logits)
    offset = 0
    for t in range(n_frames):
        rows = supervised[t]
        d_frame = np.zeros_like(frame_logits[t])
        d_frame[rows] = d_big[offset : offset + rows.size]
        offset += rows.size
        d_bias, d_p, d_k, d_c = token_logits_backward(
            vocab, params.reasoner, clip_data.frames[t].stream,
            outputs.triplet_logits[t], d_frame,
        )
        grads["reasoner.role_bias"] += d_bias
        d_phase[t] += d_p
        d_trip[t] += d_k
        d_count[t] += d_c

    # -- grounding losses over all [SEG]-conditioned masks
    bce = dice = 0.0
    d_states = np.zeros_like(outputs.frame_states)
    n_markers = len(clip_data.all_markers)
    if ablation != "no_grounding" and n_markers > 0:
        shared = ablation == "no_per_frame_token"
        fusion_mode = MODE_NO_FUSION if ablation == "no_residual_fusion" else MODE_FULL
        block = float(
            (clip_data.clip.mask_h // clip_data.clip.grid_shape[0])
            * (clip_data.clip.mask_w // clip_data.clip.grid_shape[1])
        )
        n_inst = len(space.instruments)
        if shared:
            keys, occ_frames, occ_markers = _shared_entities(clip_data)
            bases = np.stack(
                [outputs.frame_states[f].mean(axis=0) for f in occ_frames]
            )
            rows = np.array(
                [k[1] if k[0] == INSTRUMENT else n_inst + k[1] for k in keys],
                dtype=np.int64,
            )
            prompt_markers = tuple(
                SegMarker(kind, 0, int(frames[0]), label, idx)
                for idx, ((kind, label), frames) in enumerate(zip(keys, occ_frames))
            )
            decode_jobs = [
                (row, int(f), clip_data.marker_fg[m])
                for row, (frames, marker_ids) in enumerate(zip(occ_frames, occ_markers))
                for f, m in zip(frames, marker_ids)
            ]
        else:
            bases = outputs.frame_states[clip_data.marker_frames]
            rows = clip_data.marker_rows
            prompt_markers = clip_data.all_markers
            decode_jobs = [
                (idx, int(clip_data.marker_frames[idx]), clip_data.marker_fg[idx])
                for idx in range(n_markers)
            ]

        hidden, seg_cache = seg_hidden_states(bases, rows, params.reasoner)
        batch, proj_cache = project_hidden(hidden, params.projection, prompt_markers)
        fused, fuse_cache = residual_fuse(
            batch, group_occurrences(prompt_markers), params.projection, fusion_mode
        )
        z_fused = np.ascontiguousarray(fused.embeddings)
        w_bce = weights.lambda_bce / len(decode_jobs)
        w_dice = weights.lambda_dice / len(decode_jobs)
        d_fused = np.zeros_like(z_fused)
        d_prompt_buf = np.zeros(z_fused.shape[1])
        d_w_buf = np.zeros_like(params.decoder.w_mask)
        w_mask = np.ascontiguousarray(params.decoder.w_mask)
        frames_c = np.ascontiguousarray(clip_data.clip.frames)
        for prompt_row, frame_row, fg in decode_jobs:
            mask_bce, mask_dice, d_b = kernels.fused_mask_loss(
                frames_c[frame_row], w_mask, params.decoder.b_mask,
                z_fused[prompt_row], fg, block, w_bce, w_dice,
                weights.dice_eps, d_prompt_buf, d_w_buf,
            )
            bce += mask_bce
            dice += mask_dice
            d_fused[prompt_row] += d_prompt_buf
            grads["decoder.w_mask"] += d_w_buf
            grads["decoder.b_mask"][0] += d_b
        bce /= len(decode_jobs)
        dice /= len(decode_jobs)

        d_z, fuse_grads = residual_fuse_backward(params.projection, fuse_cache, d_fused)
        d_hidden, hidden_grads = project_hidden_backward(
            params.projection, proj_cache, d_z
        )
        d_bases, seg_grads = seg_hidden_backward(params.reasoner, seg_cache, d_hidden)
        _accumulate_mlp(grads, "projection.fuse", fuse_grads)
        _accumulate_mlp(grads, "projection.hidden", hidden_grads)
        for name, value in seg_grads.items():
            grads[f"reasoner.{name}"] += value
        if shared:
            for row, frames in enumerate(occ_frames):
                np.add.at(d_states, frames, d_bases[row] / frames.size)
        else:
            np.add.at(d_states, clip_data.marker_frames, d_bases)

    _, reasoner_grads = reason_backward(
        params.reasoner, outputs,
        d_phase=d_phase, d_trip=d_trip, d_count=d_count,
        d_frame_states=d_states,
    )
    for name, value in reasoner_grads.items():
        grads[f"reasoner.{name}"] += value

    parts = losses.LossParts(llm=llm, bce=bce, dice=dice, ent=ent)
    if not all(math.isfinite(v) for v in vars(parts).values()):
        return parts, math.inf, grads
    effective = losses.LossWeights(
        lambda_bce=0.0 if ablation == "no_grounding" else weights.lambda_bce,
        lambda_dice=0.0 if ablation == "no_grounding" else weights.lambda_dice,
        lambda_ent=weights.lambda_ent,
        w_ent=weights.w_ent,
        ent_mode=weights.ent_mode,
        dice_eps=weights.dice_eps,
    )
    total = losses.total_loss(parts, effective)
    return parts, total, grads


def _accumulate_mlp(grads: dict, prefix: str, mlp_grads: MLPGrads) -> None:
    for name, value in mlp_grads.tensors().items():
        grads[f"{prefix}.{name}"] += value


# ---------------------------------------------------------------------------
# Evaluation


def _predicted_prompts(
    params: PipelineParams,
    outputs,
    markers: tuple[SegMarker, ...],
    ablation: str,
) -> tuple[np.ndarray, tuple[SegMarker, ...], list[list[int]]]:
    """Fused prompt rows for predicted markers plus per-row decode frames.

    Returns (prompts, prompt_markers, decode_frames) where decode_frames[i]
    lists the frame rows row i must be decoded in.
    """
    n_inst = len(params.space.instruments)
    fusion_mode = MODE_NO_FUSION if ablation == "no_residual_fusion" else MODE_FULL
    if ablation == "no_per_frame_token":
        keys: list[tuple[str, int]] = []
        occ: dict[tuple[str, int], list[int]] = {}
        for marker in markers:
            if marker.entity_key not in occ:
                keys.append(marker.entity_key)
                occ[marker.entity_key] = []
            occ[marker.entity_key].append(marker.frame_index)
        if not keys:
            return np.zeros((0, params.projection.d_sam)), (), []
        bases = np.stack(
            [outputs.frame_states[np.array(occ[k])].mean(axis=0) for k in keys]
        )
        rows = np.array(
            [k[1] if k[0] == INSTRUMENT else n_inst + k[1] for k in keys],
            dtype=np.int64,
        )
        prompt_markers = tuple(
            SegMarker(kind, 0, occ[(kind, label)][0], label, idx)
            for idx, (kind, label) in enumerate(keys)
        )
        decode_frames = [occ[k] for k in keys]
    else:
        if not markers:
            return np.zeros((0, params.projection.d_sam)), (), []
        bases = outputs.frame_states[[m.frame_index for m in markers]]
        rows = np.array(
            [
                m.label_id if m.entity_kind == INSTRUMENT else n_inst + m.label_id
                for m in markers
            ],
            dtype=np.int64,
        )
        prompt_markers = markers
        decode_frames = [[m.frame_index] for m in markers]
    hidden, _ = seg_hidden_states(bases, rows, params.reasoner)
    batch, _ = project_hidden(hidden, params.projection, prompt_markers)
    fused, _ = residual_fuse(
        batch, group_occurrences(prompt_markers), params.projection, fusion_mode
    )
    return fused.embeddings, prompt_markers, decode_frames


def evaluate(
    params: PipelineParams,
    clips: list[ClipData],
    ablation: str = "full",
) -> metrics.MetricReport:
    """Three-task evaluation; ablated tasks are reported as absent."""
    space = params.space
    phase_pairs = []
    score_rows = []
    present_rows = []
    seg = metrics.SegAccumulator()
    for clip_data in clips:
        outputs = reason(clip_data.clip, params.reasoner, space)
        predicted = predict_semantics(outputs, space)
        phase_pairs.append(
            (clip_data.gt_phase, outputs.phase_logits.argmax(axis=1))
        )
        score_rows.append(losses.sigmoid(outputs.triplet_logits))
        present_rows.append(clip_data.gt_present)
        if ablation == "no_grounding":
            continue
        rendered = [
            parse(render(s, "", space), space, frame_index=s.frame_index)
            for s in predicted
        ]
        markers = tuple(m for out in rendered for m in out.seg_markers)
        prompts, prompt_markers, decode_frames = _predicted_prompts(
            params, outputs, markers, ablation
        )
        pred_class_masks: list[dict[tuple[str, int], np.ndarray]] = [
            {} for _ in range(clip_data.clip.n_frames)
        ]
        for row, marker in enumerate(prompt_markers):
            for frame_row in decode_frames[row]:
                logits = decode_mask(
                    clip_data.clip.frames[frame_row], prompts[row], params.decoder,
                    clip_data.clip.mask_h, clip_data.clip.mask_w,
                )
                mask = logits > 0.0
                key = marker.entity_key
                frame_masks = pred_class_masks[frame_row]
                frame_masks[key] = (
                    mask if key not in frame_masks else frame_masks[key] | mask
                )
        for t in range(clip_data.clip.n_frames):
            gt_masks = clip_data.gt_class_masks[t]
            for key in sorted(set(pred_class_masks[t]) | set(gt_masks)):
                seg.add(
                    key[0], key[1],
                    pred_class_masks[t].get(key), gt_masks.get(key),
                )

    phase = (
        None
        if ablation == "no_phase"
        else metrics.phase_metrics(phase_pairs, len(space.phases))
    )
    ap = (
        None
        if ablation == "no_triplet"
        else metrics.triplet_ap_suite(
            np.concatenate(score_rows), np.concatenate(present_rows), space
        )
    )
    seg_result = None if ablation == "no_grounding" else seg.result()
    return metrics.MetricReport.combine(phase, ap, seg_result)


# ---------------------------------------------------------------------------
# Training driver, manifests, cross-validation


@dataclass
class RunManifest:
    """Everything needed to reproduce a run, plus its results.

    Wall-clock time is kept out of the serialized manifest so that reruns
    with identical config and seed produce bitwise-identical files; the CLI
    reports timing separately.
    """

    version: str
    kernels_backend: str
    dataset_root: str
    synth_config: dict
    train_config: dict
    loss_weights: dict
    ablation: str
    train_videos: list[str]
    test_videos: list[str]
    steps_run: int
    loss_curve: list[list[float]]
    final_loss: float | None
    metrics: dict
    wall_clock_seconds: float | None = None

    def to_json(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if k != "wall_clock_seconds"}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        raw = json.loads(Path(path).read_text())
        return cls(wall_clock_seconds=None, **raw)


def default_split(root: str | Path, clips: dict[str, ClipData]) -> tuple[list[str], list[str]]:
    """Fold-1 test split from the dataset's fold config."""
    folds = dataset_io.load_folds(Path(root) / "folds.json")
    splits = dataset_io.split_folds(sorted(clips), folds)
    first = sorted(splits)[0]
    return splits[first]


def train(
    dataset_root: str | Path,
    train_cfg: TrainConfig,
    weights: losses.LossWeights,
    ablation: str = "full",
    train_videos: list[str] | None = None,
    test_videos: list[str] | None = None,
) -> tuple[RunManifest, PipelineParams]:
    """Gradient-descent training on one split, then evaluation on the other."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; pick from {ABLATIONS}")
    clips, space, vocab, synth_raw = load_prepared_dataset(dataset_root, train_cfg)
    if train_videos is None or test_videos is None:
        train_videos, test_videos = default_split(dataset_root, clips)
    missing = [v for v in list(train_videos) + list(test_videos) if v not in clips]
    if missing:
        raise ValueError(f"unknown videos in split: {missing}")
    grid_d = next(iter(clips.values())).clip.grid_shape[2]
    params = PipelineParams.init(space, vocab, grid_d, train_cfg)
    tensors = params.tensors()
    tensors["decoder.b_mask"] = np.atleast_1d(np.float64(params.decoder.b_mask))

    loss_curve: list[list[float]] = []
    final_loss = None
    for step in range(train_cfg.steps):
        clip_data = clips[train_videos[step % len(train_videos)]]
        parts, total, grads = clip_loss_and_grads(params, clip_data, weights, ablation)
        if not math.isfinite(total):
            raise TrainingDiverged(step, total)
        for name, grad in grads.items():
            tensors[name] -= train_cfg.lr * grad
        params.decoder.b_mask = float(tensors["decoder.b_mask"][0])
        final_loss = total
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            loss_curve.append([float(step), float(total)])

    report = evaluate(params, [clips[v] for v in test_videos], ablation)
    manifest = RunManifest(
        version=__version__,
        kernels_backend=kernels.BACKEND,
        dataset_root=str(dataset_root),
        synth_config=synth_raw,
        train_config=asdict(train_cfg),
        loss_weights=asdict(weights),
        ablation=ablation,
        train_videos=list(train_videos),
        test_videos=list(test_videos),
        steps_run=train_cfg.steps,
        loss_curve=loss_curve,
        final_loss=final_loss,
        metrics=report.to_dict(),
    )
    return manifest, params


def _class_masks_from_records(
    triplets: list[dict], space: LabelSpace
) -> dict[tuple[str, int], np.ndarray]:
    masks: dict[tuple[str, int], np.ndarray] = {}
    for item in triplets:
        i, _, o = space.valid_triplets[item["ivt"]]
        for kind, label, key_name in (
            (INSTRUMENT, i, "inst_mask"),
            (TARGET, o, "target_mask"),
        ):
            mask = dataset_io.rle_decode(dataset_io.RleMask.from_dict(item[key_name]))
            key = (kind, label)
            masks[key] = mask if key not in masks else masks[key] | mask
    return masks


def evaluate_prediction_files(
    pred_dir: str | Path,
    gt_root: str | Path,
    space: LabelSpace,
    video_ids: list[str] | None = None,
) -> metrics.MetricReport:
    """Score prediction files against a ground-truth dataset.

    One prediction file per video mirrors the annotation layout, with
    records ``{"frame", "phase", "triplet_scores", "triplets": [...]}``
    (masks RLE-encoded like annotations).
    """
    pred_dir = Path(pred_dir)
    annotations, _, _ = dataset_io.load_dataset(gt_root, space, strict=True)
    by_video: dict[str, list[dataset_io.FrameAnnotation]] = {}
    for annotation in annotations:
        by_video.setdefault(annotation.video_id, []).append(annotation)
    if video_ids is None:
        video_ids = sorted(by_video)
    phase_pairs = []
    score_rows = []
    present_rows = []
    seg = metrics.SegAccumulator()
    for video_id in video_ids:
        if video_id not in by_video:
            raise dataset_io.DatasetError(f"unknown video {video_id!r}")
        path = pred_dir / f"{video_id}.json"
        if not path.is_file():
            raise dataset_io.DatasetError(f"missing prediction file {path}")
        records = {r["frame"]: r for r in json.loads(path.read_text())}
        gt_frames = sorted(by_video[video_id], key=lambda a: a.frame_index)
        gt_phase = np.array([a.phase_id for a in gt_frames])
        pred_phase = []
        for annotation in gt_frames:
            record = records.get(annotation.frame_index)
            if record is None:
                raise dataset_io.DatasetError(
                    f"{video_id}: no prediction for frame {annotation.frame_index}"
                )
            pred_phase.append(int(record["phase"]))
            scores = np.asarray(record["triplet_scores"], dtype=np.float64)
            if scores.shape != (space.num_triplets,):
                raise dataset_io.DatasetError(
                    f"{video_id}: triplet_scores must have {space.num_triplets} entries"
                )
            score_rows.append(scores)
            present = np.zeros(space.num_triplets, dtype=bool)
            for item in annotation.triplets:
                present[item.triplet_id] = True
            present_rows.append(present)
            pred_masks = _class_masks_from_records(record.get("triplets", []), space)
            gt_masks = _class_masks_from_records(
                [
                    {
                        "ivt": item.triplet_id,
                        "inst_mask": item.instrument_mask.to_dict(),
                        "target_mask": item.target_mask.to_dict(),
                    }
                    for item in annotation.triplets
                ],
                space,
            )
            for key in sorted(set(pred_masks) | set(gt_masks)):
                seg.add(key[0], key[1], pred_masks.get(key), gt_masks.get(key))
        phase_pairs.append((gt_phase, np.asarray(pred_phase)))
    phase = metrics.phase_metrics(phase_pairs, len(space.phases))
    ap = metrics.triplet_ap_suite(
        np.stack(score_rows), np.stack(present_rows), space
    )
    return metrics.MetricReport.combine(phase, ap, seg.result())


def crossval(
    dataset_root: str | Path,
    train_cfg: TrainConfig,
    weights: losses.LossWeights,
    ablation: str = "full",
) -> tuple[list[RunManifest], dict[str, tuple[float, float]]]:
    """Train/evaluate per fold of the dataset's fold config and aggregate."""
    root = Path(dataset_root)
    folds = dataset_io.load_folds(root / "folds.json")
    video_ids = sorted(
        path.stem for path in (root / "annotations").glob("*.json")
    )
    splits = dataset_io.split_folds(video_ids, folds)
    manifests = []
    for fold_id in sorted(splits):
        train_ids, test_ids = splits[fold_id]
        manifest, _ = train(
            root, train_cfg, weights, ablation,
            train_videos=train_ids, test_videos=test_ids,
        )
        manifests.append(manifest)
    reports = [metrics.MetricReport.from_dict(m.metrics) for m in manifests]
    aggregate = metrics.crossval_aggregate(reports, expected_folds=5)
    return manifests, aggregate
