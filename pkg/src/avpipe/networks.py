"""Toy pluggable networks: layered feature net, detector, flow + quality.

These are deliberately small (three conv-tanh layers, linear heads) so that
every gradient used in training can be hand-derived and checked against
finite differences. The detector is calibrated once per seed by ridge
regression on held-out synthetic scenes, which keeps runs deterministic
without an SGD warm-up.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .aggregate import DEFAULT_EMBED_DIM, LinearProjector
from .metrics import FrameDetections
from .partial_update import QualityMap
from .synth import SyntheticSequence, deteriorated_spec, generate_sequence
from .warpcore import ContractViolation, FeatureMap, MotionField, warp, _bilinear_sample

DEFAULT_CHANNELS = (8, 12, 16)
DEFAULT_STRIDES = (1, 2, 1)


# ---------------------------------------------------------------------------
# Feature network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvTanhLayer:
    """3x3 same-padded convolution followed by tanh, optional stride."""

    weight: np.ndarray  # (3, 3, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    stride: int = 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        h, w = x.shape[:2]
        padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        out = np.zeros((h, w, self.weight.shape[3]))
        for dy in range(3):
            for dx in range(3):
                out += padded[dy : dy + h, dx : dx + w] @ self.weight[dy, dx]
        out += self.bias
        out = np.tanh(out)
        if self.stride > 1:
            out = out[:: self.stride, :: self.stride]
        return out

    def out_grid(self, h: int, w: int) -> tuple[int, int]:
        return (h + self.stride - 1) // self.stride, (w + self.stride - 1) // self.stride

    def macs(self, h: int, w: int) -> float:
        oh, ow = self.out_grid(h, w)
        c_in, c_out = self.weight.shape[2], self.weight.shape[3]
        return float(oh * ow * c_out * 9 * c_in)


@dataclass(frozen=True)
class ToyFeatureNet:
    layers: tuple[ConvTanhLayer, ...]

    def preprocess(self, image: np.ndarray) -> np.ndarray:
        return (np.asarray(image, dtype=np.float64) - 0.5) * 2.0

    def forward_layers(self, image: np.ndarray) -> list[FeatureMap]:
        x = self.preprocess(image)
        outs = []
        for n, layer in enumerate(self.layers):
            x = layer.forward(x)
            outs.append(FeatureMap(x, layer_id=n))
        return outs

    def forward(self, image: np.ndarray) -> FeatureMap:
        return self.forward_layers(image)[-1]

    @property
    def overall_stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride
        return s

    @property
    def out_channels(self) -> int:
        return self.layers[-1].weight.shape[3]

    def out_grid(self, h: int, w: int) -> tuple[int, int]:
        for layer in self.layers:
            h, w = layer.out_grid(h, w)
        return h, w

    def total_macs(self, h: int, w: int) -> float:
        total = 0.0
        for layer in self.layers:
            total += layer.macs(h, w)
            h, w = layer.out_grid(h, w)
        return total

    @classmethod
    def seeded(
        cls,
        seed: int = 0,
        in_channels: int = 3,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        strides: Sequence[int] = DEFAULT_STRIDES,
    ) -> "ToyFeatureNet":
        rng = np.random.default_rng([seed, 0xFEA7])
        layers = []
        c_in = in_channels
        for c_out, stride in zip(channels, strides):
            weight = rng.normal(0.0, 1.0 / np.sqrt(9 * c_in), size=(3, 3, c_in, c_out))
            layers.append(ConvTanhLayer(weight=weight, bias=np.zeros(c_out), stride=stride))
            c_in = c_out
        return cls(layers=tuple(layers))


# ---------------------------------------------------------------------------
# Detector: per-cell objectness plus box regression, linear heads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyDetector:
    w_obj: np.ndarray  # (C,)
    b_obj: float
    w_box: np.ndarray  # (C, 4) -> (dy, dx, height, width) in cell units
    b_box: np.ndarray  # (4,)
    cell_stride: int = 2
    score_threshold: float = 0.5

    def raw_outputs(self, fmap: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
        logits = fmap.data @ self.w_obj + self.b_obj
        boxes = fmap.data @ self.w_box + self.b_box
        return logits, boxes

    def detect(self, fmap: FeatureMap) -> FrameDetections:
        logits, box_preds = self.raw_outputs(fmap)
        scores = 1.0 / (1.0 + np.exp(-logits))
        ys, xs = np.nonzero(scores > self.score_threshold)
        if ys.size == 0:
            return FrameDetections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
        s = float(self.cell_stride)
        cy = (ys + 0.5) * s + box_preds[ys, xs, 0] * s
        cx = (xs + 0.5) * s + box_preds[ys, xs, 1] * s
        bh = box_preds[ys, xs, 2] * s
        bw = box_preds[ys, xs, 3] * s
        boxes = np.stack([cy - bh / 2, cx - bw / 2, cy + bh / 2, cx + bw / 2], axis=1)
        return FrameDetections(boxes, scores[ys, xs], np.zeros(ys.size, dtype=np.int64))


def detection_targets(
    gt_boxes: np.ndarray, grid: tuple[int, int], cell_stride: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell targets: objectness, box regression, positive-cell mask.

    A cell is positive when its center lies inside a ground-truth box; the
    smallest containing box wins. Box targets are (center offset dy, dx,
    height, width) in cell-stride units.
    """
    fh, fw = grid
    t_obj = np.zeros((fh, fw))
    t_box = np.zeros((fh, fw, 4))
    pos = np.zeros((fh, fw), dtype=bool)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt.shape[0] == 0:
        return t_obj, t_box, pos
    s = float(cell_stride)
    ys, xs = np.mgrid[0:fh, 0:fw]
    cy = (ys + 0.5) * s
    cx = (xs + 0.5) * s
    areas = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    order = np.argsort(areas)[::-1]  # paint large boxes first so small ones win
    for g in order:
        inside = (
            (cy >= gt[g, 0]) & (cy < gt[g, 2]) & (cx >= gt[g, 1]) & (cx < gt[g, 3])
        )
        if not inside.any():
            continue
        pos |= inside
        t_obj[inside] = 1.0
        gy = (gt[g, 0] + gt[g, 2]) / 2.0
        gx = (gt[g, 1] + gt[g, 3]) / 2.0
        t_box[inside, 0] = (gy - cy[inside]) / s
        t_box[inside, 1] = (gx - cx[inside]) / s
        t_box[inside, 2] = (gt[g, 2] - gt[g, 0]) / s
        t_box[inside, 3] = (gt[g, 3] - gt[g, 1]) / s
    return t_obj, t_box, pos


BOX_LOSS_WEIGHT = 0.1
_LOGIT_TARGET = 2.0  # margin used when fitting the objectness head by ridge


def detection_loss_and_grads(
    det: ToyDetector, feature: np.ndarray, targets
) -> tuple[float, dict]:
    """Objectness BCE + box L2 at positive cells, with hand-derived grads.

    Returns the loss and gradients w.r.t. the input feature map and every
    detector parameter.
    """
    t_obj, t_box, pos = targets
    logits = feature @ det.w_obj + det.b_obj
    p = 1.0 / (1.0 + np.exp(-logits))
    n_cells = logits.size
    # stable BCE: log(1 + exp(l)) - t*l
    loss_obj = float(np.mean(np.logaddexp(0.0, logits) - t_obj * logits))
    d_logit = (p - t_obj) / n_cells

    box_preds = feature @ det.w_box + det.b_box
    n_pos = int(np.count_nonzero(pos))
    if n_pos > 0:
        diff = (box_preds - t_box) * pos[..., None]
        loss_box = float(np.sum(diff * diff) / (n_pos * 4))
        d_box = BOX_LOSS_WEIGHT * 2.0 * diff / (n_pos * 4)
    else:
        diff = np.zeros_like(box_preds)
        loss_box = 0.0
        d_box = diff

    loss = loss_obj + BOX_LOSS_WEIGHT * loss_box
    grads = {
        "feature": d_logit[..., None] * det.w_obj + d_box @ det.w_box.T,
        "w_obj": np.einsum("hw,hwc->c", d_logit, feature),
        "b_obj": float(np.sum(d_logit)),
        "w_box": np.einsum("hwc,hwk->ck", feature, d_box),
        "b_box": np.sum(d_box, axis=(0, 1)),
    }
    return loss, grads


def calibrate_detector(
    feat_net: ToyFeatureNet,
    sequences: Sequence[SyntheticSequence],
    ridge: float = 1e-3,
) -> ToyDetector:
    """Fit the linear detector heads by ridge regression on real features."""
    xs, obj_t, box_rows, box_t = [], [], [], []
    stride = feat_net.overall_stride
    for seq in sequences:
        for t in range(len(seq)):
            fmap = feat_net.forward(seq.frames[t])
            t_obj, t_box, pos = detection_targets(seq.boxes[t], fmap.grid, stride)
            flat = fmap.data.reshape(-1, fmap.channels)
            xs.append(flat)
            obj_t.append(t_obj.reshape(-1))
            box_rows.append(flat[pos.reshape(-1)])
            box_t.append(t_box.reshape(-1, 4)[pos.reshape(-1)])
    x = np.concatenate(xs)
    x1 = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    y_obj = (np.concatenate(obj_t) * 2.0 - 1.0) * _LOGIT_TARGET
    gram = x1.T @ x1 + ridge * np.eye(x1.shape[1])
    sol_obj = np.linalg.solve(gram, x1.T @ y_obj)

    xb = np.concatenate(box_rows)
    xb1 = np.concatenate([xb, np.ones((xb.shape[0], 1))], axis=1)
    yb = np.concatenate(box_t)
    gram_b = xb1.T @ xb1 + ridge * np.eye(xb1.shape[1])
    sol_box = np.linalg.solve(gram_b, xb1.T @ yb)

    return ToyDetector(
        w_obj=sol_obj[:-1],
        b_obj=float(sol_obj[-1]),
        w_box=sol_box[:-1],
        b_box=sol_box[-1],
        cell_stride=stride,
    )


# ---------------------------------------------------------------------------
# Propagation quality head and flow estimators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QualityHead:
    """Linear propagation-quality score from photometric error and flow
    magnitude: q = bias - w_err * err/err_scale - w_mag * mag/mag_scale.

    Positive q means the propagated feature is trusted; q <= tau marks the
    position for recomputation. The default calibration puts typical values
    inside the unit training band around tau = 0.
    """

    w_err: float = 1.0
    w_mag: float = 0.1
    bias: float = 1.0
    err_scale: float = 0.15
    mag_scale: float = 4.0

    def features(self, err: np.ndarray, mag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return err / self.err_scale, mag / self.mag_scale

    def quality(self, err: np.ndarray, mag: np.ndarray) -> QualityMap:
        fe, fm = self.features(err, mag)
        return QualityMap(self.bias - self.w_err * fe - self.w_mag * fm)


@dataclass(frozen=True)
class FlowResult:
    motion: MotionField
    quality: QualityMap
    err: np.ndarray  # raw photometric error at the feature grid
    mag: np.ndarray  # raw flow magnitude at the feature grid


def downsample_gray(image: np.ndarray, fh: int, fw: int) -> np.ndarray:
    """Channel-mean then box-average an image down to the feature grid."""
    h, w = image.shape[:2]
    if h % fh or w % fw:
        raise ContractViolation(f"feature grid {fh}x{fw} must divide image {h}x{w}")
    gray = np.asarray(image, dtype=np.float64).mean(axis=2)
    sy, sx = h // fh, w // fw
    return gray.reshape(fh, sy, fw, sx).mean(axis=(1, 3))


def propagation_stats(
    key_image: np.ndarray, cur_image: np.ndarray, motion: MotionField
) -> tuple[np.ndarray, np.ndarray]:
    """Photometric error of warping the key image onto the current frame,
    smoothed 3x3, plus the flow magnitude; both at the feature grid."""
    fh, fw = motion.grid
    key_small = downsample_gray(key_image, fh, fw)
    cur_small = downsample_gray(cur_image, fh, fw)
    warped = warp(FeatureMap(key_small[..., None]), motion).data[..., 0]
    err = np.abs(warped - cur_small)
    padded = np.pad(err, 1, mode="edge")
    acc = np.zeros_like(err)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + fh, dx : dx + fw]
    err = acc / 9.0
    mag = np.hypot(motion.data[..., 0], motion.data[..., 1])
    return err, mag


class GroundTruthFlow:
    """Flow oracle bound to a synthetic sequence; quality from photometrics."""

    def __init__(self, seq: SyntheticSequence, head: QualityHead, feature_grid: tuple[int, int]):
        self.seq = seq
        self.head = head
        self.feature_grid = feature_grid

    def estimate(self, key_image, cur_image, key_index: int, cur_index: int) -> FlowResult:
        fh, fw = self.feature_grid
        motion = self.seq.backward_flow_feature(cur_index, key_index, fh, fw)
        err, mag = propagation_stats(key_image, cur_image, motion)
        return FlowResult(motion=motion, quality=self.head.quality(err, mag), err=err, mag=mag)


class BlockMatchingFlow:
    """Exhaustive-search block matching at the feature grid (SAD cost)."""

    def __init__(
        self,
        head: QualityHead,
        feature_grid: tuple[int, int],
        search: int = 3,
        block_radius: int = 1,
    ):
        self.head = head
        self.feature_grid = feature_grid
        self.search = search
        self.block_radius = block_radius

    def _motion(self, key_image, cur_image) -> MotionField:
        fh, fw = self.feature_grid
        key_small = downsample_gray(key_image, fh, fw)
        cur_small = downsample_gray(cur_image, fh, fw)
        r = self.block_radius
        candidates = []
        costs = []
        pad = self.search + r
        key_pad = np.pad(key_small, pad, mode="edge")
        cur_pad = np.pad(cur_small, r, mode="edge")
        # SAD of the (2r+1)^2 block around each cell, for every displacement
        for dy in range(-self.search, self.search + 1):
            for dx in range(-self.search, self.search + 1):
                diff = np.zeros((fh, fw))
                for by in range(-r, r + 1):
                    for bx in range(-r, r + 1):
                        key_shift = key_pad[
                            pad + dy + by : pad + dy + by + fh,
                            pad + dx + bx : pad + dx + bx + fw,
                        ]
                        cur_shift = cur_pad[r + by : r + by + fh, r + bx : r + bx + fw]
                        diff += np.abs(key_shift - cur_shift)
                candidates.append((dy, dx))
                costs.append(diff)
        stack = np.stack(costs)
        best = np.argmin(stack, axis=0)  # first minimum wins: deterministic
        disp = np.asarray(candidates, dtype=np.float64)[best]
        return MotionField(disp)

    def estimate(self, key_image, cur_image, key_index: int, cur_index: int) -> FlowResult:
        motion = self._motion(key_image, cur_image)
        err, mag = propagation_stats(key_image, cur_image, motion)
        return FlowResult(motion=motion, quality=self.head.quality(err, mag), err=err, mag=mag)


class LinearRefinedFlow:
    """Per-axis affine correction on top of another flow estimator."""

    def __init__(self, base, head: QualityHead, gain=(1.0, 1.0), offset=(0.0, 0.0)):
        self.base = base
        self.head = head
        self.gain = np.asarray(gain, dtype=np.float64)
        self.offset = np.asarray(offset, dtype=np.float64)

    def estimate(self, key_image, cur_image, key_index: int, cur_index: int) -> FlowResult:
        raw = self.base.estimate(key_image, cur_image, key_index, cur_index)
        refined = MotionField(raw.motion.data * self.gain + self.offset)
        err, mag = propagation_stats(key_image, cur_image, refined)
        return FlowResult(motion=refined, quality=self.head.quality(err, mag), err=err, mag=mag)

    @classmethod
    def fit(cls, base, head, seq: SyntheticSequence, feature_grid, pairs) -> "LinearRefinedFlow":
        """Least-squares per-axis gain/offset against the exact flow."""
        xs, ys = [], []
        for k, i in pairs:
            est = base.estimate(seq.frames[k], seq.frames[i], k, i).motion.data
            gt = seq.backward_flow_feature(i, k, *feature_grid).data
            xs.append(est.reshape(-1, 2))
            ys.append(gt.reshape(-1, 2))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        gain = np.ones(2)
        offset = np.zeros(2)
        for axis in range(2):
            a = np.stack([x[:, axis], np.ones_like(x[:, axis])], axis=1)
            sol, *_ = np.linalg.lstsq(a, y[:, axis], rcond=None)
            gain[axis], offset[axis] = sol
        return cls(base, head, gain=tuple(gain), offset=tuple(offset))


# ---------------------------------------------------------------------------
# Bundle construction
# ---------------------------------------------------------------------------

@dataclass
class NetworkBundle:
    feat: ToyFeatureNet
    det: ToyDetector
    projector: LinearProjector
    flow: object  # anything with .estimate(key_img, cur_img, key_idx, cur_idx)
    quality_head: QualityHead

    def feature_grid(self, image_h: int, image_w: int) -> tuple[int, int]:
        return self.feat.out_grid(image_h, image_w)


_CALIBRATION_SEED_BASE = 9100
_CALIBRATION_CLIPS = 2


def _calibration_spec(size: int) -> "GeneratorSpec":
    """Clean-appearance scenes: the detector is fitted on crisp stills, so
    video deterioration (noise, blur) genuinely degrades it."""
    from .synth import GeneratorSpec

    base = deteriorated_spec(size=size, num_frames=16)
    return GeneratorSpec(
        height=base.height,
        width=base.width,
        num_frames=base.num_frames,
        num_shapes=base.num_shapes,
        min_size=base.min_size,
        max_size=base.max_size,
        max_speed=base.max_speed,
    )


@lru_cache(maxsize=16)
def _core_networks(seed: int, size: int, calibrated: bool):
    feat = ToyFeatureNet.seeded(seed)
    projector = LinearProjector.seeded(feat.out_channels, DEFAULT_EMBED_DIM, seed)
    if calibrated:
        clips = [
            generate_sequence(_calibration_spec(size), seed=_CALIBRATION_SEED_BASE + 13 * seed + j)
            for j in range(_CALIBRATION_CLIPS)
        ]
        det = calibrate_detector(feat, clips)
    else:
        rng = np.random.default_rng([seed, 0xDE7])
        det = ToyDetector(
            w_obj=rng.normal(0.0, 0.1, size=feat.out_channels),
            b_obj=0.0,
            w_box=rng.normal(0.0, 0.1, size=(feat.out_channels, 4)),
            b_box=np.zeros(4),
            cell_stride=feat.overall_stride,
        )
    return feat, det, projector


def make_reference_networks(
    seq: Optional[SyntheticSequence] = None,
    seed: int = 0,
    flow_kind: str = "gt",
    calibrated: bool = True,
    image_size: int = 32,
    quality_head: Optional[QualityHead] = None,
) -> NetworkBundle:
    """Seeded toy networks with a calibrated detector and a flow estimator.

    ``flow_kind``: "gt" (exact flow from the generator; requires ``seq``),
    "block" (block matching), or "refined" (block matching with a fitted
    affine correction; requires ``seq``).
    """
    if seq is not None:
        image_size = seq.spec.height
    feat, det, projector = _core_networks(seed, image_size, calibrated)
    head = quality_head or QualityHead()
    grid = feat.out_grid(image_size, image_size)
    if flow_kind == "gt":
        if seq is None:
            raise ContractViolation("ground-truth flow needs the sequence")
        flow = GroundTruthFlow(seq, head, grid)
    elif flow_kind == "block":
        flow = BlockMatchingFlow(head, grid)
    elif flow_kind == "refined":
        if seq is None:
            raise ContractViolation("refined flow is fitted against a sequence")
        base = BlockMatchingFlow(head, grid)
        pairs = [(0, min(3, len(seq) - 1))] if len(seq) > 1 else []
        flow = LinearRefinedFlow.fit(base, head, seq, grid, pairs) if pairs else base
    else:
        raise ContractViolation(f"unknown flow kind {flow_kind!r}")
    return NetworkBundle(feat=feat, det=det, projector=projector, flow=flow, quality_head=head)
