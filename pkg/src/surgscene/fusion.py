"""Prompt-space projection and entity-grouped residual fusion.

Hidden states of [SEG] markers are projected into the segmentation prompt
space by a two-layer MLP.  Rows belonging to the same entity (same kind and
label across all frames of a clip) are then fused residually: each row gets
its group's projected mean added back, which stabilizes per-frame prompts
without erasing frame-specific content.

All forward passes have hand-written backward passes; ``gradcheck`` verifies
them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grammar import SegMarker

MODE_FULL = "full"
MODE_NO_FUSION = "no_fusion"

EntityGroups = dict[tuple[str, int], list[int]]


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d act / dx given pre-activation x and activation y."""
    if name == "tanh":
        return 1.0 - y * y
    if name == "relu":
        return (x > 0.0).astype(x.dtype)
    if name == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class TwoLayerMLP:
    """y = W2 @ act(W1 @ x + b1) + b2, applied row-wise."""

    w1: np.ndarray  # (d_in, d_hidden)
    b1: np.ndarray  # (d_hidden,)
    w2: np.ndarray  # (d_hidden, d_out)
    b2: np.ndarray  # (d_out,)
    activation: str = "tanh"

    @classmethod
    def init(
        cls,
        d_in: int,
        d_hidden: int,
        d_out: int,
        rng: np.random.Generator,
        activation: str = "tanh",
        zero_last: bool = False,
        scale: float = 0.5,
    ) -> "TwoLayerMLP":
        w1 = rng.normal(0.0, scale / np.sqrt(d_in), size=(d_in, d_hidden))
        w2 = (
            np.zeros((d_hidden, d_out))
            if zero_last
            else rng.normal(0.0, scale / np.sqrt(d_hidden), size=(d_hidden, d_out))
        )
        return cls(
            w1=w1, b1=np.zeros(d_hidden), w2=w2, b2=np.zeros(d_out),
            activation=activation,
        )

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d_in:
            raise ValueError(f"expected {self.d_in} input columns, got {x.shape[1]}")
        pre = x @ self.w1 + self.b1
        hidden = _act(self.activation, pre)
        out = hidden @ self.w2 + self.b2
        return out, {"x": x, "pre": pre, "hidden": hidden}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: dict, d_out: np.ndarray) -> tuple[np.ndarray, "MLPGrads"]:
        """Gradients w.r.t. input rows and parameters."""
        d_out = np.atleast_2d(d_out)
        d_hidden = d_out @ self.w2.T
        d_pre = d_hidden * _act_grad(self.activation, cache["pre"], cache["hidden"])
        grads = MLPGrads(
            w1=cache["x"].T @ d_pre,
            b1=d_pre.sum(axis=0),
            w2=cache["hidden"].T @ d_out,
            b2=d_out.sum(axis=0),
        )
        return d_pre @ self.w1.T, grads

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class MLPGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def zeros_like(cls, mlp: TwoLayerMLP) -> "MLPGrads":
        return cls(
            w1=np.zeros_like(mlp.w1), b1=np.zeros_like(mlp.b1),
            w2=np.zeros_like(mlp.w2), b2=np.zeros_like(mlp.b2),
        )

    def add_(self, other: "MLPGrads") -> None:
        self.w1 += other.w1
        self.b1 += other.b1
        self.w2 += other.w2
        self.b2 += other.b2


@dataclass
class ProjectionParams:
    """Hidden-state projection (d_llm -> d_sam) and fusion projection
    (d_sam -> d_sam).  The two MLPs are independent parameter sets."""

    hidden_proj: TwoLayerMLP
    fuse_proj: TwoLayerMLP

    @classmethod
    def init(
        cls,
        d_llm: int,
        d_sam: int,
        rng: np.random.Generator,
        activation: str = "tanh",
    ) -> "ProjectionParams":
        # Zero second layer of the fusion projection: training starts at the
        # residual-identity point, so fused prompts equal raw prompts at
        # step 0.
        return cls(
            hidden_proj=TwoLayerMLP.init(d_llm, d_llm, d_sam, rng, activation),
            fuse_proj=TwoLayerMLP.init(
                d_sam, d_sam, d_sam, rng, activation, zero_last=True
            ),
        )

    @property
    def d_llm(self) -> int:
        return self.hidden_proj.d_in

    @property
    def d_sam(self) -> int:
        return self.hidden_proj.d_out


@dataclass
class PromptBatch:
    """Projected [SEG] prompt rows plus the markers they came from."""

    embeddings: np.ndarray  # (n_seg, d_sam)
    markers: tuple[SegMarker, ...]

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-D matrix")
        if self.embeddings.shape[0] != len(self.markers):
            raise ValueError(
                f"{self.embeddings.shape[0]} rows for {len(self.markers)} markers"
            )
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("non-finite prompt embedding")

    @property
    def n_seg(self) -> int:
        return len(self.markers)


@dataclass
class FusedPrompts:
    embeddings: np.ndarray  # (n_seg, d_sam)


@dataclass
class FusionCache:
    """Forward-pass state needed by ``residual_fuse_backward``."""

    mode: str
    groups: list[list[int]] = field(default_factory=list)
    means: np.ndarray | None = None
    mlp_cache: dict | None = None
    n_rows: int = 0


def project_hidden(
    h: np.ndarray, params: ProjectionParams, markers: tuple[SegMarker, ...]
) -> tuple[PromptBatch, dict]:
    """Project marker hidden states (n_seg, d_llm) into prompt space."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[1] != params.d_llm:
        raise ValueError(f"expected {params.d_llm} columns, got {h.shape[1]}")
    z, cache = params.hidden_proj.forward(h)
    return PromptBatch(embeddings=z, markers=tuple(markers)), cache


def project_hidden_backward(
    params: ProjectionParams, cache: dict, d_z: np.ndarray
) -> tuple[np.ndarray, MLPGrads]:
    return params.hidden_proj.backward(cache, d_z)


def group_occurrences(markers: tuple[SegMarker, ...] | list[SegMarker]) -> EntityGroups:
    """Partition marker rows by entity key (kind, label) across all frames."""
    groups: EntityGroups = {}
    for row, marker in enumerate(markers):
        groups.setdefault(marker.entity_key, []).append(row)
    return groups


def _check_groups(groups: EntityGroups, n_rows: int) -> list[list[int]]:
    ordered = list(groups.values())
    seen: set[int] = set()
    for rows in ordered:
        if not rows:
            raise ValueError("internal error: empty entity group")
        for row in rows:
            if not 0 <= row < n_rows:
                raise ValueError(f"group row {row} out of range")
            if row in seen:
                raise ValueError(f"row {row} assigned to two groups")
            seen.add(row)
    if len(seen) != n_rows:
        raise ValueError("groups do not cover all prompt rows")
    return ordered


def residual_fuse(
    batch: PromptBatch,
    groups: EntityGroups,
    params: ProjectionParams,
    mode: str = MODE_FULL,
) -> tuple[FusedPrompts, FusionCache]:
    """Per-entity residual fusion: z_n + Proj(mean of z over the entity's rows).

    ``mode="no_fusion"`` bypasses fusion entirely (prompts pass through
    unchanged), matching the fusion-ablated configuration.
    """
    z = batch.embeddings
    if mode == MODE_NO_FUSION:
        return FusedPrompts(embeddings=z.copy()), FusionCache(
            mode=mode, n_rows=z.shape[0]
        )
    if mode != MODE_FULL:
        raise ValueError(f"unknown fusion mode {mode!r}")
    ordered = _check_groups(groups, z.shape[0])
    means = np.stack([z[rows].mean(axis=0) for rows in ordered])
    projected, mlp_cache = params.fuse_proj.forward(means)
    fused = z.copy()
    for g, rows in enumerate(ordered):
        fused[rows] += projected[g]
    return FusedPrompts(embeddings=fused), FusionCache(
        mode=mode, groups=ordered, means=means, mlp_cache=mlp_cache,
        n_rows=z.shape[0],
    )


def residual_fuse_backward(
    params: ProjectionParams, cache: FusionCache, d_fused: np.ndarray
) -> tuple[np.ndarray, MLPGrads]:
    """Gradients w.r.t. the raw prompt rows and the fusion-projection params."""
    d_fused = np.asarray(d_fused, dtype=np.float64)
    if d_fused.shape[0] != cache.n_rows:
        raise ValueError(
            f"upstream gradient has {d_fused.shape[0]} rows, expected {cache.n_rows}"
        )
    if cache.mode == MODE_NO_FUSION:
        return d_fused.copy(), MLPGrads.zeros_like(params.fuse_proj)
    d_z = d_fused.copy()
    d_projected = np.stack([d_fused[rows].sum(axis=0) for rows in cache.groups])
    d_means, grads = params.fuse_proj.backward(cache.mlp_cache, d_projected)
    for g, rows in enumerate(cache.groups):
        d_z[rows] += d_means[g] / len(rows)
    return d_z, grads
