"""Unified flow-based inference over a frame sequence.

One state machine covers every method variant: per-frame, sparse
propagation, dense-window aggregation, recursive aggregation, partial
updating, and all three scheduling policies, selected by configuration.
Each processed frame appends one record to the cost ledger; costs are
modeled multiply-accumulate counts, not wall-clock measurements.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .aggregate import DEFAULT_EMBED_DIM, aggregate_dense, aggregate_recursive
from .metrics import FrameDetections, frame_hit_rate
from .networks import NetworkBundle
from .partial_update import QualityMap, partial_update_stack
from .schedule import SchedulerConfig, is_key_adaptive, is_key_fixed, is_key_oracle
from .warpcore import ContractViolation, FeatureMap, warp


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs selecting one method variant.

    ``dense_window_r`` switches to the dense sliding-window aggregation mode
    (every frame is key); it requires a fixed every-frame scheduler and no
    spatial updating. ``lam`` is the recompute-area penalty used only by
    training; ``flow_cost_ratio`` is the modeled feature/flow cost ratio.
    """

    do_aggr: bool = False
    do_spatial: bool = False
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    dense_window_r: Optional[int] = None
    lam: float = 2.0
    flow_cost_ratio: float = 10.0
    fgfa_two_sided: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ContractViolation(f"lambda must be >= 0, got {self.lam}")
        if self.flow_cost_ratio <= 0:
            raise ContractViolation("flow cost ratio must be positive")
        if self.dense_window_r is not None:
            if self.dense_window_r < 0:
                raise ContractViolation("dense window radius must be >= 0")
            if not self.do_aggr or self.do_spatial:
                raise ContractViolation(
                    "dense-window mode needs do_aggr=True and do_spatial=False"
                )
            if self.scheduler.kind != "fixed" or self.scheduler.l != 1:
                raise ContractViolation("dense-window mode treats every frame as key")


PRESET_NAMES = ("per_frame", "dff", "fgfa", "c1", "c2", "c3")


def preset_config(
    name: str,
    l: int = 10,
    gamma: float = 0.2,
    r: int = 2,
    lam: float = 2.0,
    tau: float = 0.0,
    flow_cost_ratio: float = 10.0,
    fgfa_two_sided: bool = False,
) -> PipelineConfig:
    """Canonical configuration for each method-matrix row."""
    if name == "per_frame":
        return PipelineConfig(
            scheduler=SchedulerConfig(kind="fixed", l=1, tau=tau),
            flow_cost_ratio=flow_cost_ratio,
        )
    if name == "dff":
        return PipelineConfig(
            scheduler=SchedulerConfig(kind="fixed", l=l, tau=tau),
            flow_cost_ratio=flow_cost_ratio,
        )
    if name == "fgfa":
        return PipelineConfig(
            do_aggr=True,
            scheduler=SchedulerConfig(kind="fixed", l=1, tau=tau),
            dense_window_r=r,
            flow_cost_ratio=flow_cost_ratio,
            fgfa_two_sided=fgfa_two_sided,
        )
    if name == "c1":
        return PipelineConfig(
            do_aggr=True,
            scheduler=SchedulerConfig(kind="fixed", l=l, tau=tau),
            flow_cost_ratio=flow_cost_ratio,
        )
    if name == "c2":
        return PipelineConfig(
            do_aggr=True,
            do_spatial=True,
            scheduler=SchedulerConfig(kind="fixed", l=l, tau=tau),
            lam=lam,
            flow_cost_ratio=flow_cost_ratio,
        )
    if name == "c3":
        return PipelineConfig(
            do_aggr=True,
            do_spatial=True,
            scheduler=SchedulerConfig(kind="adaptive", gamma=gamma, tau=tau),
            lam=lam,
            flow_cost_ratio=flow_cost_ratio,
        )
    raise ContractViolation(f"unknown preset {name!r}, expected one of {PRESET_NAMES}")


# ---------------------------------------------------------------------------
# Cost model and ledger
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Modeled per-frame MAC counts.

    Feature cost comes from the toy network's conv arithmetic; the flow
    network is feature cost divided by the configured ratio (warping itself
    is folded into that knob). Aggregation counts embeddings, similarities,
    and the blend; detection counts its linear heads.
    """

    feat_full: float
    flow: float
    embed_unit: float
    sim_unit: float
    blend_unit: float
    det: float

    @classmethod
    def build(cls, networks: NetworkBundle, image_shape, flow_cost_ratio: float) -> "CostModel":
        h, w = image_shape
        fh, fw = networks.feat.out_grid(h, w)
        c = networks.feat.out_channels
        d = networks.projector.matrix.shape[1] if hasattr(networks.projector, "matrix") else DEFAULT_EMBED_DIM
        feat_full = networks.feat.total_macs(h, w)
        return cls(
            feat_full=feat_full,
            flow=feat_full / flow_cost_ratio,
            embed_unit=float(fh * fw * c * d),
            sim_unit=float(fh * fw * (3 * d + 2)),
            blend_unit=float(fh * fw * c * 2),
            det=float(fh * fw * c * 5 * 2),
        )

    def aggr_recursive(self) -> float:
        return 2 * self.embed_unit + 2 * self.sim_unit + self.blend_unit

    def aggr_dense(self, window: int) -> float:
        return window * (self.embed_unit + self.sim_unit) + window * self.blend_unit


@dataclass(frozen=True)
class CostRecord:
    frame: int
    is_key: bool
    recompute_fraction: float
    feat_full_cost: float
    feat_cost: float  # what was actually charged: fraction x full
    flow_cost: float
    aggr_cost: float
    det_cost: float

    @property
    def total_cost(self) -> float:
        return self.feat_cost + self.flow_cost + self.aggr_cost + self.det_cost


CSV_COLUMNS = (
    "frame",
    "is_key",
    "recompute_fraction",
    "feat_cost",
    "flow_cost",
    "aggr_cost",
    "det_cost",
    "total_cost",
)


@dataclass
class CostLedger:
    records: list[CostRecord] = field(default_factory=list)

    def append(self, record: CostRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def total(self) -> float:
        return sum(r.total_cost for r in self.records)

    def mean_cost_per_frame(self) -> float:
        return self.total() / len(self.records) if self.records else 0.0

    def key_rate(self) -> float:
        if not self.records:
            return 0.0
        return sum(1 for r in self.records if r.is_key) / len(self.records)

    def mean_recompute_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.recompute_fraction for r in self.records) / len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [
                        r.frame,
                        int(r.is_key),
                        r.recompute_fraction,
                        r.feat_cost,
                        r.flow_cost,
                        r.aggr_cost,
                        r.det_cost,
                        r.total_cost,
                    ]
                )


# ---------------------------------------------------------------------------
# Sparse pipeline (per-frame / propagation / recursive aggregation)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineState:
    """Carry-over between frames: the most recent key frame's artifacts."""

    key_index: int
    last_index: int
    key_image: np.ndarray
    key_layers: tuple[FeatureMap, ...]
    key_aggregated: Optional[FeatureMap]

    def __post_init__(self):
        if self.key_index > self.last_index:
            raise ContractViolation("key index cannot be ahead of the last frame")

    @property
    def key_feature(self) -> FeatureMap:
        return self.key_layers[-1]


def init(frame0: np.ndarray, config: PipelineConfig, networks: NetworkBundle):
    """Process frame 0 (always key). Returns (state, detections, cost record)."""
    layers = networks.feat.forward_layers(frame0)
    f0 = layers[-1]
    dets = networks.det.detect(f0)
    cm = CostModel.build(networks, frame0.shape[:2], config.flow_cost_ratio)
    record = CostRecord(
        frame=0,
        is_key=True,
        recompute_fraction=1.0,
        feat_full_cost=cm.feat_full,
        feat_cost=cm.feat_full,
        flow_cost=0.0,
        aggr_cost=0.0,
        det_cost=cm.det,
    )
    state = PipelineState(
        key_index=0,
        last_index=0,
        key_image=np.array(frame0, dtype=np.float64),
        key_layers=tuple(layers),
        key_aggregated=f0 if config.do_aggr else None,
    )
    return state, dets, record


def _apply_branch(
    state: PipelineState,
    frame: np.ndarray,
    config: PipelineConfig,
    networks: NetworkBundle,
    flow_res,
    index: int,
    key: bool,
    cost_model: CostModel,
):
    fh, fw = state.key_feature.grid
    if key:
        q_eff = QualityMap.full(fh, fw, -np.inf)
    elif config.do_spatial:
        q_eff = flow_res.quality
    else:
        q_eff = QualityMap.full(fh, fw, np.inf)

    result = partial_update_stack(
        frame, state.key_layers, flow_res.motion, q_eff, networks.feat, config.scheduler.tau
    )
    f_hat = result.final

    aggr_cost = 0.0
    if config.do_aggr:
        prev_warped = warp(state.key_aggregated, flow_res.motion)
        f_bar = aggregate_recursive(prev_warped, f_hat, networks.projector)
        dets = networks.det.detect(f_bar)
        aggr_cost = cost_model.aggr_recursive()
    else:
        f_bar = None
        dets = networks.det.detect(f_hat)

    if key:
        new_state = PipelineState(
            key_index=index,
            last_index=index,
            key_image=np.array(frame, dtype=np.float64),
            key_layers=result.layers,
            key_aggregated=f_bar if config.do_aggr else None,
        )
    else:
        new_state = replace(state, last_index=index)

    frac = result.decision.recompute_fraction
    record = CostRecord(
        frame=index,
        is_key=key,
        recompute_fraction=frac,
        feat_full_cost=cost_model.feat_full,
        feat_cost=frac * cost_model.feat_full,
        flow_cost=cost_model.flow,
        aggr_cost=aggr_cost,
        det_cost=cost_model.det,
    )
    return dets, new_state, record


class _OracleBranchRunner:
    """Caches the two candidate rollouts for the oracle policy."""

    def __init__(self, state, frame, config, networks, flow_res, index, cost_model):
        self._args = (state, frame, config, networks, flow_res, index)
        self._cost_model = cost_model
        self.results: dict[bool, tuple] = {}

    def run_branch(self, as_key: bool) -> FrameDetections:
        if as_key not in self.results:
            state, frame, config, networks, flow_res, index = self._args
            self.results[as_key] = _apply_branch(
                state, frame, config, networks, flow_res, index, as_key, self._cost_model
            )
        return self.results[as_key][0]


def step(
    state: PipelineState,
    frame: np.ndarray,
    config: PipelineConfig,
    networks: NetworkBundle,
    ground_truth=None,
    eval_fn: Optional[Callable] = None,
    cost_model: Optional[CostModel] = None,
):
    """Process one frame. Returns (detections, new state, cost record).

    Order per frame: estimate flow and propagation quality from the key
    frame, schedule, replace the quality map with the sentinel the schedule
    implies, partially update, optionally aggregate recursively, detect, and
    finally advance the key frame if one was declared.
    """
    index = state.last_index + 1
    cm = cost_model or CostModel.build(networks, frame.shape[:2], config.flow_cost_ratio)
    flow_res = networks.flow.estimate(state.key_image, frame, state.key_index, index)
    if flow_res.motion.grid != state.key_feature.grid:
        raise ContractViolation(
            f"flow grid {flow_res.motion.grid} does not match features {state.key_feature.grid}"
        )

    sched = config.scheduler
    if sched.kind == "fixed":
        key = is_key_fixed(index, sched.l)
    elif sched.kind == "adaptive":
        key = is_key_adaptive(flow_res.quality, sched.tau, sched.gamma)
    else:
        runner = _OracleBranchRunner(state, frame, config, networks, flow_res, index, cm)
        key = is_key_oracle(
            index, runner, ground_truth, eval_fn or frame_hit_rate
        )
        return runner.results[key]

    return _apply_branch(state, frame, config, networks, flow_res, index, key, cm)


# ---------------------------------------------------------------------------
# Dense-window mode (every frame key, sliding-window aggregation)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FgfaState:
    last_index: int
    buffer_start: int
    features: tuple[FeatureMap, ...]  # real features for frames buffer_start..last_index
    images: tuple[np.ndarray, ...]


def _dense_aggregate_detect(index, window_indices, features, images, networks, config, cm):
    """Warp every window member onto the reference frame and aggregate."""
    propagated = {}
    flow_evals = 0
    for k in window_indices:
        if k == index:
            propagated[k] = features[k]
            continue
        flow_res = networks.flow.estimate(images[k], images[index], k, index)
        propagated[k] = warp(features[k], flow_res.motion)
        flow_evals += 1
    f_bar = aggregate_dense(index, propagated, networks.projector)
    dets = networks.det.detect(f_bar)
    record = CostRecord(
        frame=index,
        is_key=True,
        recompute_fraction=1.0,
        feat_full_cost=cm.feat_full,
        feat_cost=cm.feat_full,
        flow_cost=flow_evals * cm.flow,
        aggr_cost=cm.aggr_dense(len(window_indices)),
        det_cost=cm.det,
    )
    return dets, record


def fgfa_init(frame0: np.ndarray, config: PipelineConfig, networks: NetworkBundle):
    f0 = networks.feat.forward(frame0)
    cm = CostModel.build(networks, frame0.shape[:2], config.flow_cost_ratio)
    state = FgfaState(
        last_index=0,
        buffer_start=0,
        features=(f0,),
        images=(np.array(frame0, dtype=np.float64),),
    )
    dets, record = _dense_aggregate_detect(
        0, [0], {0: f0}, {0: state.images[0]}, networks, config, cm
    )
    return state, dets, record


def fgfa_mode_step(
    state: FgfaState,
    frame: np.ndarray,
    config: PipelineConfig,
    networks: NetworkBundle,
    cost_model: Optional[CostModel] = None,
):
    """Causal dense-aggregation step over the trailing window [i-r, i]."""
    if config.dense_window_r is None:
        raise ContractViolation("fgfa_mode_step needs dense_window_r")
    index = state.last_index + 1
    cm = cost_model or CostModel.build(networks, frame.shape[:2], config.flow_cost_ratio)
    f_cur = networks.feat.forward(frame)
    features = state.features + (f_cur,)
    images = state.images + (np.array(frame, dtype=np.float64),)
    start = state.buffer_start
    keep_from = max(0, index - config.dense_window_r)
    if keep_from > start:
        drop = keep_from - start
        features = features[drop:]
        images = images[drop:]
        start = keep_from
    new_state = FgfaState(last_index=index, buffer_start=start, features=features, images=images)

    window = list(range(start, index + 1))
    feat_by_index = {start + j: features[j] for j in range(len(features))}
    img_by_index = {start + j: images[j] for j in range(len(images))}
    dets, record = _dense_aggregate_detect(
        index, window, feat_by_index, img_by_index, networks, config, cm
    )
    return dets, new_state, record


def _run_fgfa_two_sided(frames, config, networks, cm):
    """Offline dense aggregation over the full window [i-r, i+r]."""
    n = len(frames)
    features = {i: networks.feat.forward(frames[i]) for i in range(n)}
    images = {i: np.array(frames[i], dtype=np.float64) for i in range(n)}
    detections = []
    ledger = CostLedger()
    r = config.dense_window_r
    for i in range(n):
        window = list(range(max(0, i - r), min(n - 1, i + r) + 1))
        dets, record = _dense_aggregate_detect(i, window, features, images, networks, config, cm)
        detections.append(dets)
        ledger.append(record)
    return detections, ledger


# ---------------------------------------------------------------------------
# Sequence runner
# ---------------------------------------------------------------------------

def run_sequence(
    frames: Sequence[np.ndarray],
    config: PipelineConfig,
    networks: NetworkBundle,
    ground_truth=None,
    eval_fn: Optional[Callable] = None,
):
    """Fold the per-frame step over a sequence.

    Returns (per-frame detections, cost ledger). ``ground_truth`` is a list
    of per-frame box arrays, required by the oracle scheduler.
    """
    if len(frames) == 0:
        raise ContractViolation("cannot run an empty sequence")
    cm = CostModel.build(networks, frames[0].shape[:2], config.flow_cost_ratio)

    if config.dense_window_r is not None:
        if config.fgfa_two_sided:
            return _run_fgfa_two_sided(frames, config, networks, cm)
        state, dets, record = fgfa_init(frames[0], config, networks)
        detections = [dets]
        ledger = CostLedger([record])
        for frame in frames[1:]:
            dets, state, record = fgfa_mode_step(state, frame, config, networks, cm)
            detections.append(dets)
            ledger.append(record)
        return detections, ledger

    state, dets, record = init(frames[0], config, networks)
    detections = [dets]
    ledger = CostLedger([record])
    for pos, frame in enumerate(frames[1:], start=1):
        gt_i = ground_truth[pos] if ground_truth is not None else None
        dets, state, record = step(
            state, frame, config, networks, ground_truth=gt_i, eval_fn=eval_fn, cost_model=cm
        )
        detections.append(dets)
        ledger.append(record)
    return detections, ledger
