"""Position-wise adaptive aggregation of propagated feature maps.

Aggregation weights are exponentiated cosine similarities between embedded
features, normalized to a probability vector per position and shared across
channels. Two modes exist: dense aggregation over a temporal window, and the
recursive two-term blend of a running aggregate with the current feature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .warpcore import ContractViolation, FeatureMap, elementwise_blend, _frozen_f64

NORM_EPS = 1e-12
DEFAULT_EMBED_DIM = 8


@dataclass(frozen=True)
class EmbeddingMap:
    """An (height, width, dim) map of embedding vectors used for similarity."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_f64(self.data))
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ContractViolation(f"embedding map must be (h, w, d), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation("embedding map contains non-finite values")

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class WeightMap:
    """Per-position non-negative weights for one contributing source."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_f64(self.values))
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ContractViolation(f"weight map must be 2-d, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ContractViolation("weights must be finite and non-negative")

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class LinearProjector:
    """Fixed linear per-position embedding projector.

    The reference projector is a seeded random linear map; a trainer may
    learn the matrix instead.
    """

    matrix: np.ndarray  # (channels, embed_dim)

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen_f64(self.matrix))
        if self.matrix.ndim != 2:
            raise ContractViolation("projector matrix must be 2-d")

    def __call__(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data, dtype=np.float64) @ self.matrix

    @classmethod
    def seeded(cls, channels: int, dim: int = DEFAULT_EMBED_DIM, seed: int = 0) -> "LinearProjector":
        rng = np.random.default_rng([seed, 0xE4BED])
        return cls(rng.normal(0.0, 1.0 / np.sqrt(channels), size=(channels, dim)))


def identity_projector(data: np.ndarray) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


Projector = Callable[[np.ndarray], np.ndarray]


def embed(f: FeatureMap, projector: Projector) -> EmbeddingMap:
    """Project a feature map into embedding space, position by position."""
    out = projector(f.data)
    out = np.asarray(out, dtype=np.float64)
    if out.ndim != 3 or out.shape[:2] != f.grid:
        raise ContractViolation(
            f"projector must keep the grid, got {out.shape} from {f.data.shape}"
        )
    return EmbeddingMap(out)


def _guarded_norm(e: np.ndarray) -> np.ndarray:
    return np.maximum(np.sqrt(np.sum(e * e, axis=-1)), NORM_EPS)


def cosine_map(e_src: EmbeddingMap, e_ref: EmbeddingMap) -> np.ndarray:
    """Per-position cosine similarity with epsilon-guarded norms."""
    if e_src.grid != e_ref.grid or e_src.dim != e_ref.dim:
        raise ContractViolation("cosine inputs must share grid and embedding dim")
    dot = np.sum(e_src.data * e_ref.data, axis=-1)
    return dot / (_guarded_norm(e_src.data) * _guarded_norm(e_ref.data))


def similarity_weights(e_src: EmbeddingMap, e_ref: EmbeddingMap) -> WeightMap:
    """Raw aggregation weight exp(cos(e_src, e_ref)), in [e^-1, e^1]."""
    return WeightMap(np.exp(cosine_map(e_src, e_ref)))


def normalize_weights(raw: Sequence[WeightMap]) -> list[WeightMap]:
    """Normalize raw weights so sources sum to one at every position."""
    if len(raw) == 0:
        raise ContractViolation("normalize_weights needs at least one source")
    grid = raw[0].grid
    for wm in raw:
        if wm.grid != grid:
            raise ContractViolation("raw weight grids differ")
        if np.any(np.asarray(wm.values) <= 0):
            raise ContractViolation("raw weights must be strictly positive")
    total = np.zeros(grid)
    for wm in raw:
        total = total + wm.values
    return [WeightMap(wm.values / total) for wm in raw]


def aggregate_dense(
    ref_index: int, features: Mapping[int, FeatureMap], projector: Projector
) -> FeatureMap:
    """Weighted average of propagated feature maps over a temporal window.

    ``features`` maps frame index -> feature propagated onto the reference
    frame; the window must contain ``ref_index`` itself (its entry is the
    reference feature). Weights are similarities against the reference
    feature's embedding, normalized per position; sources are folded in
    ascending frame order so results are reproducible bit for bit.
    """
    if len(features) == 0:
        raise ContractViolation("aggregation window is empty")
    if ref_index not in features:
        raise ContractViolation(f"window must contain the reference frame {ref_index}")
    order = sorted(features)
    ref = features[ref_index]
    for k in order:
        f = features[k]
        if f.grid != ref.grid or f.channels != ref.channels:
            raise ContractViolation("aggregation inputs must share shape")
    e_ref = embed(ref, projector)
    raws = [similarity_weights(embed(features[k], projector), e_ref) for k in order]
    weights = normalize_weights(raws)
    out = np.zeros_like(np.asarray(ref.data))
    for wm, k in zip(weights, order):
        out = out + wm.values[..., None] * features[k].data
    return FeatureMap(out)


def aggregate_recursive(
    f_prev_agg_warped: FeatureMap, f_cur: FeatureMap, projector: Projector
) -> FeatureMap:
    """Two-term recursive aggregation of a warped running aggregate with the
    current feature.

    Both terms are weighted by similarity against the current feature's own
    embedding (so the current term's raw weight is always e^1) and the pair
    is normalized per position. Embeddings are recomputed from the warped
    aggregate rather than warped themselves.
    """
    if f_prev_agg_warped.grid != f_cur.grid or f_prev_agg_warped.channels != f_cur.channels:
        raise ContractViolation("recursive aggregation inputs must share shape")
    e_ref = embed(f_cur, projector)
    raw_prev = similarity_weights(embed(f_prev_agg_warped, projector), e_ref)
    raw_cur = similarity_weights(e_ref, e_ref)
    w_prev, w_cur = normalize_weights([raw_prev, raw_cur])
    return elementwise_blend(f_prev_agg_warped, f_cur, w_prev.values, w_cur.values)


def recursive_vjp(
    prev_data: np.ndarray, cur_data: np.ndarray, projector: LinearProjector
):
    """Forward pass of the recursive aggregation plus a vector-Jacobian hook.

    Returns ``(out, vjp)`` where ``vjp(grad_out)`` yields gradients w.r.t.
    the warped aggregate, the current feature, and the projector matrix.
    The current term's raw weight exp(cos(e, e)) is analytically constant,
    so it carries no gradient.
    """
    a = np.asarray(prev_data, dtype=np.float64)
    b = np.asarray(cur_data, dtype=np.float64)
    p = np.asarray(projector.matrix)
    ea = a @ p
    eb = b @ p
    na = _guarded_norm(ea)
    nb = _guarded_norm(eb)
    cos = np.sum(ea * eb, axis=-1) / (na * nb)
    r = np.exp(cos)
    e_self = np.exp(np.sum(eb * eb, axis=-1) / (nb * nb))
    den = r + e_self
    w_prev = r / den
    w_cur = e_self / den
    out = w_prev[..., None] * a + w_cur[..., None] * b

    def vjp(grad_out: np.ndarray):
        g = np.asarray(grad_out, dtype=np.float64)
        d_wprev = np.sum(g * a, axis=-1)
        d_wcur = np.sum(g * b, axis=-1)
        # w_prev = r / (r + e), w_cur = e / (r + e)
        d_r = (d_wprev - d_wcur) * e_self / (den * den)
        d_cos = d_r * r
        inv = 1.0 / (na * nb)
        d_ea = d_cos[..., None] * (eb * inv[..., None] - cos[..., None] * ea / (na * na)[..., None])
        d_eb = d_cos[..., None] * (ea * inv[..., None] - cos[..., None] * eb / (nb * nb)[..., None])
        grad_a = w_prev[..., None] * g + d_ea @ p.T
        grad_b = w_cur[..., None] * g + d_eb @ p.T
        grad_p = np.einsum("hwc,hwd->cd", a, d_ea) + np.einsum("hwc,hwd->cd", b, d_eb)
        return grad_a, grad_b, grad_p

    return out, vjp
