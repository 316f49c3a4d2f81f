"""Spatially-adaptive partial feature updating.

A propagation-quality map is thresholded into a binary update mask; masked
positions are recomputed layer by layer from the input image while the rest
keep the features warped from the last key frame. Quality sentinels drive
the two degenerate regimes: -inf forces a full recompute, +inf forces pure
propagation. The straight-through estimator supplies a surrogate gradient
for the thresholding during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .warpcore import (
    BinaryMask,
    ContractViolation,
    FeatureMap,
    MotionField,
    _frozen_f64,
    resize_mask_nearest,
    resize_motion_bilinear,
    warp,
)

DEFAULT_TAU = 0.0


@dataclass(frozen=True)
class QualityMap:
    """Per-position propagation quality; +/-inf sentinels are allowed."""

    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen_f64(self.q))
        if self.q.ndim != 2 or min(self.q.shape) < 1:
            raise ContractViolation(f"quality map must be 2-d, got {self.q.shape}")
        if np.any(np.isnan(self.q)):
            raise ContractViolation("quality map contains NaN")

    @property
    def grid(self) -> tuple[int, int]:
        return self.q.shape

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "QualityMap":
        return cls(np.full((height, width), value))


@dataclass(frozen=True)
class UpdateDecision:
    """Update mask plus the exact fraction of positions it recomputes."""

    mask: BinaryMask
    recompute_fraction: float


def build_update_mask(q: QualityMap, tau: float = DEFAULT_TAU) -> UpdateDecision:
    """Mark positions whose quality is at or below the threshold.

    ``q == -inf`` everywhere yields an all-ones mask (full recompute);
    ``q == +inf`` everywhere yields all zeros (pure propagation).
    """
    mask = BinaryMask((np.asarray(q.q) <= tau).astype(np.uint8))
    return UpdateDecision(mask=mask, recompute_fraction=mask.mean())


def ste_gradient(q, tau: float = DEFAULT_TAU):
    """Straight-through gradient of the update mask w.r.t. quality.

    Returns -1 inside the unit band ``|q - tau| <= 1`` and 0 outside;
    sentinel infinities fall outside the band and return 0. Accepts scalars
    or arrays.
    """
    arr = np.asarray(q, dtype=np.float64)
    out = np.where(np.abs(arr - tau) <= 1.0, -1.0, 0.0)
    if np.isscalar(q) or arr.ndim == 0:
        return float(out)
    return out


LayerFn = Callable[[FeatureMap], FeatureMap]


def partial_update_layer(
    prev_layer_updated: FeatureMap,
    propagated_cur_layer: FeatureMap,
    mask: BinaryMask,
    layer_fn: LayerFn,
) -> FeatureMap:
    """Recompute one layer only where the mask is set.

    ``layer_fn`` maps the previous (partially updated) layer to this layer's
    grid; unmasked positions keep the propagated values. The mask is resized
    to this layer's grid with nearest-neighbour lookup when needed.
    """
    recomputed = layer_fn(prev_layer_updated)
    if recomputed.grid != propagated_cur_layer.grid or (
        recomputed.channels != propagated_cur_layer.channels
    ):
        raise ContractViolation(
            f"layer output {recomputed.data.shape} does not match propagated "
            f"layer {propagated_cur_layer.data.shape}"
        )
    if mask.grid != recomputed.grid:
        mask = resize_mask_nearest(mask, *recomputed.grid)
    chooser = np.asarray(mask.values)[..., None] == 1
    out = np.where(chooser, recomputed.data, propagated_cur_layer.data)
    return FeatureMap(out, layer_id=propagated_cur_layer.layer_id)


class LayeredFeatureNet(Protocol):
    """Feature network exposing its per-layer decomposition.

    ``preprocess`` maps an input image to the first layer's input array;
    each entry of ``layers`` must provide ``forward(x: ndarray) -> ndarray``.
    """

    @property
    def layers(self) -> Sequence:
        ...

    def preprocess(self, image: np.ndarray) -> np.ndarray:
        ...

    def forward_layers(self, image: np.ndarray) -> list[FeatureMap]:
        ...


@dataclass(frozen=True)
class PartialUpdateResult:
    final: FeatureMap
    decision: UpdateDecision
    layers: Optional[tuple[FeatureMap, ...]]  # None on the pure-propagation path


def partial_update_stack(
    frame: np.ndarray,
    key_layers: Sequence[FeatureMap],
    motion: MotionField,
    q: QualityMap,
    feat_net: LayeredFeatureNet,
    tau: float = DEFAULT_TAU,
) -> PartialUpdateResult:
    """Partial feature update returning the full per-layer stack.

    ``key_layers`` are the key frame's per-layer features (the last entry is
    the propagation source of the final output); ``motion`` is given at the
    final feature grid and is resampled per layer. The two sentinel regimes
    short-circuit: an all-ones mask runs the feature network unchanged, an
    all-zeros mask returns the warped key feature directly.
    """
    if len(key_layers) != len(feat_net.layers):
        raise ContractViolation(
            f"expected {len(feat_net.layers)} key layers, got {len(key_layers)}"
        )
    final_key = key_layers[-1]
    if motion.grid != final_key.grid:
        raise ContractViolation(
            f"motion grid {motion.grid} must match the final feature grid {final_key.grid}"
        )
    if q.grid != final_key.grid:
        raise ContractViolation(
            f"quality grid {q.grid} must match the final feature grid {final_key.grid}"
        )
    decision = build_update_mask(q, tau)

    if decision.recompute_fraction == 1.0:
        layers = feat_net.forward_layers(frame)
        return PartialUpdateResult(final=layers[-1], decision=decision, layers=tuple(layers))
    if decision.recompute_fraction == 0.0:
        return PartialUpdateResult(
            final=warp(final_key, motion), decision=decision, layers=None
        )

    x = feat_net.preprocess(frame)
    outs: list[FeatureMap] = []
    for n, (layer, key_fm) in enumerate(zip(feat_net.layers, key_layers)):
        recomputed = layer.forward(x)
        if recomputed.shape != key_fm.data.shape:
            raise ContractViolation(
                f"layer {n} output {recomputed.shape} does not match key layer "
                f"{key_fm.data.shape}"
            )
        layer_motion = resize_motion_bilinear(motion, *key_fm.grid)
        propagated = warp(key_fm, layer_motion)
        layer_mask = resize_mask_nearest(decision.mask, *key_fm.grid)
        chooser = np.asarray(layer_mask.values)[..., None] == 1
        x = np.where(chooser, recomputed, propagated.data)
        outs.append(FeatureMap(x, layer_id=n))
    return PartialUpdateResult(final=outs[-1], decision=decision, layers=tuple(outs))


def partial_update(
    frame: np.ndarray,
    key_layers: Sequence[FeatureMap],
    motion: MotionField,
    q: QualityMap,
    feat_net: LayeredFeatureNet,
    tau: float = DEFAULT_TAU,
) -> FeatureMap:
    """Partially updated feature map for one frame (final layer only)."""
    return partial_update_stack(frame, key_layers, motion, q, feat_net, tau).final
