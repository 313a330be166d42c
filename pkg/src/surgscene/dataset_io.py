"""Annotation dataset format: per-frame phase, triplets, RLE masks, folds.

Directory layout::

    root/annotations/<video_id>.json   one array of frame records per video
    root/folds.json                    {"folds": {"1": [video ids], ...}}
    root/label_space.json              label-space config

Frame record keys (bit-exact): ``frame``, ``phase``, ``triplets`` (array of
objects with ``ivt``, ``inst_mask`` {``size``, ``counts``}, ``target_mask``
{``size``, ``counts``}), optional ``narrative``.

Masks are run-length encoded over column-major pixel order with
background-first counts, the dominant convention of public mask tooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .vocab import LabelSpace


class DatasetError(ValueError):
    """A dataset record or layout violates the schema."""


@dataclass(frozen=True)
class RleMask:
    """Run-length encoded binary mask (column-major, background first)."""

    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, raw: dict) -> "RleMask":
        if not isinstance(raw, dict) or "size" not in raw or "counts" not in raw:
            raise DatasetError(f"mask must have 'size' and 'counts', got {raw!r}")
        size = raw["size"]
        counts = raw["counts"]
        if (
            not isinstance(size, (list, tuple))
            or len(size) != 2
            or not all(isinstance(s, int) and s > 0 for s in size)
        ):
            raise DatasetError(f"mask size must be two positive ints, got {size!r}")
        if not isinstance(counts, (list, tuple)) or not all(
            isinstance(c, int) and c >= 0 for c in counts
        ):
            raise DatasetError("mask counts must be non-negative ints")
        return cls(size=(size[0], size[1]), counts=tuple(counts))


def rle_encode(mask: np.ndarray) -> RleMask:
    """Encode a binary (H, W) mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise DatasetError(f"mask must be non-empty 2-D, got shape {mask.shape}")
    values = np.unique(mask)
    if not np.all(np.isin(values, (0, 1))):
        raise DatasetError("mask must be binary")
    flat = np.ascontiguousarray(mask.flatten(order="F"), dtype=np.uint8)
    counts = kernels.rle_encode(flat)
    return RleMask(size=(mask.shape[0], mask.shape[1]), counts=tuple(int(c) for c in counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    """Decode to a boolean (H, W) mask."""
    h, w = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise DatasetError("negative run length")
    total = int(counts.sum())
    if total != h * w:
        raise DatasetError(f"counts sum {total} != {h}*{w} pixels")
    flat = kernels.rle_decode(np.ascontiguousarray(counts), h * w)
    return flat.reshape((h, w), order="F").astype(bool)


@dataclass(frozen=True)
class TripletAnnotation:
    triplet_id: int
    instrument_mask: RleMask
    target_mask: RleMask


@dataclass(frozen=True)
class FrameAnnotation:
    video_id: str
    frame_index: int
    phase_id: int
    triplets: tuple[TripletAnnotation, ...]
    narrative: str | None = None

    @property
    def n_triplets(self) -> int:
        return len(self.triplets)


def frame_to_dict(annotation: FrameAnnotation) -> dict:
    record: dict = {
        "frame": annotation.frame_index,
        "phase": annotation.phase_id,
        "triplets": [
            {
                "ivt": t.triplet_id,
                "inst_mask": t.instrument_mask.to_dict(),
                "target_mask": t.target_mask.to_dict(),
            }
            for t in annotation.triplets
        ],
    }
    if annotation.narrative is not None:
        record["narrative"] = annotation.narrative
    return record


def frame_from_dict(video_id: str, raw: dict, space: LabelSpace) -> FrameAnnotation:
    for key in ("frame", "phase", "triplets"):
        if key not in raw:
            raise DatasetError(f"record missing key {key!r}")
    if not isinstance(raw["frame"], int) or raw["frame"] < 0:
        raise DatasetError(f"bad frame index {raw['frame']!r}")
    if not isinstance(raw["phase"], int) or not 0 <= raw["phase"] < len(space.phases):
        raise DatasetError(f"phase id {raw['phase']!r} out of range")
    triplets = []
    for item in raw["triplets"]:
        ivt = item.get("ivt")
        if not isinstance(ivt, int) or not 0 <= ivt < space.num_triplets:
            raise DatasetError(f"triplet id {ivt!r} out of range")
        triplets.append(
            TripletAnnotation(
                triplet_id=ivt,
                instrument_mask=RleMask.from_dict(item.get("inst_mask")),
                target_mask=RleMask.from_dict(item.get("target_mask")),
            )
        )
    narrative = raw.get("narrative")
    if narrative is not None and not isinstance(narrative, str):
        raise DatasetError("narrative must be a string")
    return FrameAnnotation(
        video_id=video_id,
        frame_index=raw["frame"],
        phase_id=raw["phase"],
        triplets=tuple(triplets),
        narrative=narrative,
    )


@dataclass
class ValidationIssue:
    video_id: str
    frame_index: int | None
    message: str

    def __str__(self) -> str:
        where = self.video_id if self.frame_index is None else (
            f"{self.video_id}:frame {self.frame_index}"
        )
        return f"{where}: {self.message}"


@dataclass
class DatasetStats:
    n_frames: int = 0
    n_videos: int = 0
    n_triplet_instances: int = 0
    phase_counts: dict[int, int] = field(default_factory=dict)
    triplet_counts: dict[int, int] = field(default_factory=dict)
    mask_sizes: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "frames": self.n_frames,
            "videos": self.n_videos,
            "triplet_instances": self.n_triplet_instances,
            "phase_counts": {str(k): v for k, v in sorted(self.phase_counts.items())},
            "triplet_counts": {str(k): v for k, v in sorted(self.triplet_counts.items())},
            "mask_sizes": [list(s) for s in self.mask_sizes],
        }


def _validate_frame(annotation: FrameAnnotation) -> list[str]:
    problems = []
    sizes = set()
    for n, triplet in enumerate(annotation.triplets):
        for kind, mask in (
            ("inst_mask", triplet.instrument_mask),
            ("target_mask", triplet.target_mask),
        ):
            total = sum(mask.counts)
            if total != mask.size[0] * mask.size[1]:
                problems.append(
                    f"triplet {n} {kind}: counts sum {total} != "
                    f"{mask.size[0]}x{mask.size[1]}"
                )
            sizes.add(mask.size)
    if len(sizes) > 1:
        problems.append(f"inconsistent mask resolutions in one frame: {sorted(sizes)}")
    return problems


def load_dataset(
    root: str | Path, space: LabelSpace, strict: bool = False
) -> tuple[list[FrameAnnotation], DatasetStats, list[ValidationIssue]]:
    """Load and validate all per-video annotation files under ``root``.

    Returns (annotations, stats, issues).  Annotations are ordered by
    (video_id, frame_index) regardless of directory traversal order.  In
    strict mode the first issue raises instead of being collected.
    """
    root = Path(root)
    annotation_dir = root / "annotations"
    if not annotation_dir.is_dir():
        raise DatasetError(f"missing annotations directory: {annotation_dir}")
    issues: list[ValidationIssue] = []

    def report(video_id: str, frame_index: int | None, message: str) -> None:
        issue = ValidationIssue(video_id, frame_index, message)
        if strict:
            raise DatasetError(str(issue))
        issues.append(issue)

    annotations: list[FrameAnnotation] = []
    stats = DatasetStats()
    mask_sizes: set[tuple[int, int]] = set()
    for path in sorted(annotation_dir.glob("*.json")):
        video_id = path.stem
        stats.n_videos += 1
        try:
            records = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            report(video_id, None, f"invalid JSON: {exc}")
            continue
        if not isinstance(records, list):
            report(video_id, None, "annotation file must be a JSON array")
            continue
        seen_frames: set[int] = set()
        for raw in records:
            frame_index = raw.get("frame") if isinstance(raw, dict) else None
            try:
                annotation = frame_from_dict(video_id, raw, space)
            except DatasetError as exc:
                report(video_id, frame_index, str(exc))
                continue
            if annotation.frame_index in seen_frames:
                report(video_id, annotation.frame_index, "duplicate frame index")
                continue
            seen_frames.add(annotation.frame_index)
            problems = _validate_frame(annotation)
            if problems:
                for problem in problems:
                    report(video_id, annotation.frame_index, problem)
                continue
            annotations.append(annotation)
            stats.n_frames += 1
            stats.phase_counts[annotation.phase_id] = (
                stats.phase_counts.get(annotation.phase_id, 0) + 1
            )
            for triplet in annotation.triplets:
                stats.n_triplet_instances += 1
                stats.triplet_counts[triplet.triplet_id] = (
                    stats.triplet_counts.get(triplet.triplet_id, 0) + 1
                )
                mask_sizes.add(triplet.instrument_mask.size)
    stats.mask_sizes = sorted(mask_sizes)
    annotations.sort(key=lambda a: (a.video_id, a.frame_index))
    return annotations, stats, issues


def save_dataset(
    root: str | Path,
    annotations: list[FrameAnnotation],
    space_config: dict | None = None,
    folds: dict[int, list[str]] | None = None,
) -> None:
    """Write annotations (grouped per video), label space, and fold config."""
    root = Path(root)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    by_video: dict[str, list[FrameAnnotation]] = {}
    for annotation in annotations:
        by_video.setdefault(annotation.video_id, []).append(annotation)
    for video_id, frames in sorted(by_video.items()):
        frames = sorted(frames, key=lambda a: a.frame_index)
        path = root / "annotations" / f"{video_id}.json"
        path.write_text(
            json.dumps([frame_to_dict(f) for f in frames], sort_keys=True) + "\n"
        )
    if space_config is not None:
        (root / "label_space.json").write_text(
            json.dumps(space_config, indent=2, sort_keys=True) + "\n"
        )
    if folds is not None:
        save_folds(root / "folds.json", folds)


# ---------------------------------------------------------------------------
# Fold splits


def save_folds(path: str | Path, folds: dict[int, list[str]]) -> None:
    payload = {"folds": {str(k): sorted(v) for k, v in sorted(folds.items())}}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_folds(path: str | Path) -> dict[int, list[str]]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict) or "folds" not in raw:
        raise DatasetError("fold config must be an object with a 'folds' key")
    folds: dict[int, list[str]] = {}
    for key, videos in raw["folds"].items():
        try:
            fold_id = int(key)
        except ValueError:
            raise DatasetError(f"fold id {key!r} is not an integer") from None
        if not isinstance(videos, list) or not all(isinstance(v, str) for v in videos):
            raise DatasetError(f"fold {key}: video list must be strings")
        folds[fold_id] = list(videos)
    return folds


def split_folds(
    videos: list[str], folds: dict[int, list[str]]
) -> dict[int, tuple[list[str], list[str]]]:
    """Per-fold (train, test) video lists; folds must partition ``videos``."""
    assigned: dict[str, int] = {}
    for fold_id, members in folds.items():
        for video in members:
            if video in assigned:
                raise DatasetError(
                    f"video {video} listed in folds {assigned[video]} and {fold_id}"
                )
            assigned[video] = fold_id
    missing = sorted(set(videos) - set(assigned))
    if missing:
        raise DatasetError(f"videos missing from fold config: {missing}")
    unknown = sorted(set(assigned) - set(videos))
    if unknown:
        raise DatasetError(f"fold config lists unknown videos: {unknown}")
    splits: dict[int, tuple[list[str], list[str]]] = {}
    ordered = sorted(videos)
    for fold_id in sorted(folds):
        test = sorted(folds[fold_id])
        train = [v for v in ordered if assigned[v] != fold_id]
        splits[fold_id] = (train, test)
    return splits
