"""Joint training of the quality head, detector, and (optionally) the
embedding projector on two-frame samples.

Each sample pairs a key frame with a nearby non-key frame. The forward pass
mirrors inference: propagate the key feature along the exact flow, build the
update mask from the predicted quality, blend recomputed and propagated
features, aggregate recursively, detect. The loss is the detection loss
plus a recompute-area penalty; the penalty reaches the quality head through
the straight-through surrogate gradient of the thresholding. With 1/3
probability each, the mask is forced all-zero or all-one so both pure
regimes stay well trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .aggregate import LinearProjector, recursive_vjp
from .networks import (
    QualityHead,
    ToyDetector,
    ToyFeatureNet,
    detection_loss_and_grads,
    detection_targets,
    make_reference_networks,
    propagation_stats,
)
from .partial_update import ste_gradient
from .synth import SyntheticSequence, benchmark_sequence
from .warpcore import ContractViolation, FeatureMap, warp

FORCING_MODES = ("free", "force_zero", "force_one")
DEFAULT_MAX_OFFSET = 10


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending step for diagnosis."""


@dataclass(frozen=True)
class TrainSample:
    seq: SyntheticSequence
    key_index: int
    cur_index: int
    forcing: str = "free"

    def __post_init__(self):
        if not 0 <= self.key_index < self.cur_index < len(self.seq):
            raise ContractViolation(
                f"bad sample indices ({self.key_index}, {self.cur_index})"
            )
        if self.forcing not in FORCING_MODES:
            raise ContractViolation(f"unknown forcing mode {self.forcing!r}")

    @property
    def key_image(self) -> np.ndarray:
        return self.seq.frames[self.key_index]

    @property
    def cur_image(self) -> np.ndarray:
        return self.seq.frames[self.cur_index]

    @property
    def gt_boxes(self) -> np.ndarray:
        return self.seq.boxes[self.cur_index]


def sample_stream(
    sequences: Sequence[SyntheticSequence],
    seed: int = 0,
    max_offset: int = DEFAULT_MAX_OFFSET,
) -> Iterator[TrainSample]:
    """Endless stream of two-frame samples with 1/3-1/3-1/3 mask forcing."""
    if not sequences:
        raise ContractViolation("need at least one training sequence")
    rng = np.random.default_rng([seed, 0x7281])
    while True:
        seq = sequences[int(rng.integers(0, len(sequences)))]
        k = int(rng.integers(0, len(seq) - 1))
        offset = int(rng.integers(1, min(max_offset, len(seq) - 1 - k) + 1))
        u = rng.random()
        if u < 1.0 / 3.0:
            forcing = "force_zero"
        elif u < 2.0 / 3.0:
            forcing = "force_one"
        else:
            forcing = "free"
        yield TrainSample(seq=seq, key_index=k, cur_index=k + offset, forcing=forcing)


@dataclass
class TrainableModel:
    feat: ToyFeatureNet  # frozen backbone
    projector: LinearProjector
    det: ToyDetector
    qhead: QualityHead
    train_projector: bool = False

    @property
    def feature_grid(self):
        return None  # resolved per image


def make_trainable_model(seed: int = 0, calibrated: bool = False) -> TrainableModel:
    bundle = make_reference_networks(
        seq=None, seed=seed, flow_kind="block", calibrated=calibrated
    )
    return TrainableModel(
        feat=bundle.feat, projector=bundle.projector, det=bundle.det, qhead=bundle.quality_head
    )


@dataclass(frozen=True)
class ForwardCache:
    """Intermediates of one training forward pass (used by the backward pass
    and by tests probing the forced regimes)."""

    loss: float
    det_loss: float
    mask_fraction: float
    mask: np.ndarray
    quality: np.ndarray
    err_feat: np.ndarray
    mag_feat: np.ndarray
    recomputed: np.ndarray
    propagated: np.ndarray
    f_hat: np.ndarray
    aggregated: np.ndarray
    det_grads: dict
    vjp: object


def training_forward(model: TrainableModel, sample: TrainSample, lam: float, tau: float = 0.0) -> ForwardCache:
    h, w = sample.seq.image_shape
    fh, fw = model.feat.out_grid(h, w)
    key_feature = model.feat.forward(sample.key_image)
    motion = sample.seq.backward_flow_feature(sample.cur_index, sample.key_index, fh, fw)
    err, mag = propagation_stats(sample.key_image, sample.cur_image, motion)
    fe, fm = model.qhead.features(err, mag)
    quality = model.qhead.bias - model.qhead.w_err * fe - model.qhead.w_mag * fm

    if sample.forcing == "force_zero":
        mask = np.zeros((fh, fw))
    elif sample.forcing == "force_one":
        mask = np.ones((fh, fw))
    else:
        mask = (quality <= tau).astype(np.float64)

    recomputed = model.feat.forward(sample.cur_image).data
    propagated = warp(key_feature, motion).data
    f_hat = mask[..., None] * recomputed + (1.0 - mask[..., None]) * propagated

    aggregated, vjp = recursive_vjp(propagated, f_hat, model.projector)
    targets = detection_targets(sample.gt_boxes, (fh, fw), model.det.cell_stride)
    det_loss, det_grads = detection_loss_and_grads(model.det, aggregated, targets)
    loss = det_loss + lam * float(mask.sum())
    return ForwardCache(
        loss=loss,
        det_loss=det_loss,
        mask_fraction=float(mask.mean()),
        mask=mask,
        quality=quality,
        err_feat=fe,
        mag_feat=fm,
        recomputed=recomputed,
        propagated=propagated,
        f_hat=f_hat,
        aggregated=aggregated,
        det_grads=det_grads,
        vjp=vjp,
    )


def training_grads(model: TrainableModel, sample: TrainSample, cache: ForwardCache, lam: float, tau: float = 0.0) -> dict:
    """Hand-derived gradients for the trainable parameters."""
    grads = {
        "w_obj": cache.det_grads["w_obj"],
        "b_obj": cache.det_grads["b_obj"],
        "w_box": cache.det_grads["w_box"],
        "b_box": cache.det_grads["b_box"],
    }
    d_prev, d_fhat, d_proj = cache.vjp(cache.det_grads["feature"])
    if model.train_projector:
        grads["projector"] = d_proj

    if sample.forcing == "free":
        # detection pathway into the mask, plus the area penalty, both
        # squeezed through the straight-through band
        d_mask = np.sum(d_fhat * (cache.recomputed - cache.propagated), axis=-1)
        d_quality = (d_mask + lam) * ste_gradient(cache.quality, tau)
        grads["q_bias"] = float(np.sum(d_quality))
        grads["q_w_err"] = float(np.sum(d_quality * (-cache.err_feat)))
        grads["q_w_mag"] = float(np.sum(d_quality * (-cache.mag_feat)))
    else:
        grads["q_bias"] = 0.0
        grads["q_w_err"] = 0.0
        grads["q_w_mag"] = 0.0
    return grads


def apply_grads(model: TrainableModel, grads: dict, lr: float) -> TrainableModel:
    det = replace(
        model.det,
        w_obj=model.det.w_obj - lr * grads["w_obj"],
        b_obj=model.det.b_obj - lr * grads["b_obj"],
        w_box=model.det.w_box - lr * grads["w_box"],
        b_box=model.det.b_box - lr * grads["b_box"],
    )
    qhead = replace(
        model.qhead,
        bias=model.qhead.bias - lr * grads["q_bias"],
        w_err=model.qhead.w_err - lr * grads["q_w_err"],
        w_mag=model.qhead.w_mag - lr * grads["q_w_mag"],
    )
    projector = model.projector
    if "projector" in grads:
        projector = LinearProjector(np.asarray(model.projector.matrix) - lr * grads["projector"])
    return replace(model, det=det, qhead=qhead, projector=projector)


@dataclass
class TrainResult:
    model: TrainableModel
    trace: list[dict] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.asarray([t["loss"] for t in self.trace])


def train_joint(
    model: TrainableModel,
    samples: Iterable[TrainSample],
    lam: float = 2.0,
    steps: int = 1000,
    lr: float = 1e-3,
    tau: float = 0.0,
) -> TrainResult:
    """SGD over the sample stream; the learning rate drops by 10x for the
    final third of the steps."""
    if lam < 0:
        raise ContractViolation("lambda must be >= 0")
    trace = []
    it = iter(samples)
    for step_idx in range(steps):
        sample = next(it)
        cache = training_forward(model, sample, lam, tau)
        if not np.isfinite(cache.loss):
            raise TrainingDiverged(
                f"non-finite loss {cache.loss} at step {step_idx} "
                f"(mode={sample.forcing}, pair=({sample.key_index},{sample.cur_index}))"
            )
        grads = training_grads(model, sample, cache, lam, tau)
        step_lr = lr if step_idx < (2 * steps) // 3 else lr * 0.1
        model = apply_grads(model, grads, step_lr)
        trace.append(
            {
                "step": step_idx,
                "loss": cache.loss,
                "det_loss": cache.det_loss,
                "mask_fraction": cache.mask_fraction,
                "mode": sample.forcing,
            }
        )
    return TrainResult(model=model, trace=trace)


def default_training_sequences(num: int = 3, seed_base: int = 1000) -> list[SyntheticSequence]:
    return [benchmark_sequence(seed=seed_base + j) for j in range(num)]


def evaluation_pairs(num_seqs: int = 2, seed_base: int = 2000) -> list[TrainSample]:
    """Fixed free-mode pairs used to measure the recompute fraction."""
    pairs = []
    for j in range(num_seqs):
        seq = benchmark_sequence(seed=seed_base + j)
        for k in range(0, len(seq) - 8, 5):
            for offset in (2, 5, 8):
                pairs.append(TrainSample(seq=seq, key_index=k, cur_index=k + offset))
    return pairs


def mean_eval_fraction(model: TrainableModel, pairs: Sequence[TrainSample], tau: float = 0.0) -> float:
    """Mean recompute fraction the current quality head produces on fixed
    free-mode pairs."""
    fracs = [training_forward(model, p, lam=0.0, tau=tau).mask_fraction for p in pairs]
    return float(np.mean(fracs))
