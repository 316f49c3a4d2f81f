"""Synthetic video generator with exact ground-truth flow and objects.

Scenes are textured shapes (rectangles and discs) translating over a
textured background, with optional per-frame noise, blur episodes, fast
motion episodes, scene cuts, and a global scene translation. Shape
positions are rounded to integer pixels before rendering so the recorded
backward flow is exact for every pair of frames within a scene segment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .warpcore import ContractViolation, MotionField

RECT, DISC = 0, 1


@dataclass(frozen=True)
class GeneratorSpec:
    height: int = 32
    width: int = 32
    num_frames: int = 24
    num_shapes: int = 3
    min_size: int = 8
    max_size: int = 14
    max_speed: float = 1.2  # px/frame per axis
    global_velocity: tuple[float, float] = (0.0, 0.0)  # whole-scene (vy, vx)
    noise_sigma: float = 0.0
    blur_episodes: tuple[tuple[int, int], ...] = ()  # [start, end) frame ranges
    fast_episodes: tuple[tuple[int, int, float], ...] = ()  # (start, end, multiplier)
    cut_frames: tuple[int, ...] = ()
    texture_amp: float = 0.15
    background_amp: float = 0.12
    blur_passes: int = 2

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ContractViolation(f"frame size too small: {self.height}x{self.width}")
        if self.num_frames < 1:
            raise ContractViolation("need at least one frame")
        if self.num_shapes < 0 or self.min_size < 2 or self.max_size < self.min_size:
            raise ContractViolation("invalid shape size configuration")
        if self.max_size > min(self.height, self.width) - 2:
            raise ContractViolation("shapes do not fit in the frame")


@dataclass
class _Shape:
    kind: int
    size: int
    texture: np.ndarray  # (size, size, 3)
    mask: np.ndarray  # (size, size) bool
    pos: np.ndarray  # float (y, x) of the top-left corner
    vel: np.ndarray  # float (vy, vx)


@dataclass
class _Scene:
    background: np.ndarray
    shapes: list[_Shape]


@dataclass
class SyntheticSequence:
    """Frames plus everything needed to query exact ground truth."""

    spec: GeneratorSpec
    seed: int
    frames: list[np.ndarray]  # (H, W, 3) float64 in [0, 1]
    boxes: list[np.ndarray]  # per frame (n, 4) as (y0, x0, y1, x1)
    labels: list[np.ndarray]  # per frame (n,) shape kinds
    events: tuple
    segment_ids: list[int]
    rolls: list[tuple[int, int]]  # rounded global scene offset per frame
    shape_offsets: list[list[tuple[int, int]]]  # rounded top-left per shape per frame
    shape_geoms: list[list[tuple[int, np.ndarray]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.spec.height, self.spec.width

    def occupancy(self, t: int) -> np.ndarray:
        """Topmost shape index per pixel (-1 for background) at frame t."""
        h, w = self.image_shape
        occ = np.full((h, w), -1, dtype=np.int64)
        for idx, (oy, ox) in enumerate(self.shape_offsets[t]):
            size, mask = self.shape_geoms[t][idx][0], self.shape_geoms[t][idx][1]
            ys, xs, my, mx = _clip_patch(oy, ox, size, h, w)
            occ[ys, xs][mask[my, mx]] = idx
        return occ

    def object_mask(self, t: int) -> np.ndarray:
        return (self.occupancy(t) >= 0).astype(np.float64)

    def backward_flow_image(self, i: int, k: int) -> np.ndarray:
        """Backward displacement (H, W, 2): frame i samples frame k at p + M(p).

        Across a scene cut the field is all zeros (no correspondence).
        """
        h, w = self.image_shape
        flow = np.zeros((h, w, 2))
        if self.segment_ids[i] != self.segment_ids[k]:
            return flow
        roll_i, roll_k = self.rolls[i], self.rolls[k]
        flow[..., 0] = roll_k[0] - roll_i[0]
        flow[..., 1] = roll_k[1] - roll_i[1]
        occ = self.occupancy(i)
        for idx in range(len(self.shape_offsets[i])):
            owned = occ == idx
            if not owned.any():
                continue
            oy_i, ox_i = self.shape_offsets[i][idx]
            oy_k, ox_k = self.shape_offsets[k][idx]
            flow[owned, 0] = oy_k - oy_i
            flow[owned, 1] = ox_k - ox_i
        return flow

    def backward_flow_feature(self, i: int, k: int, fh: int, fw: int) -> MotionField:
        """Backward flow sampled at feature-cell centers, in feature pixels."""
        h, w = self.image_shape
        if h % fh or w % fw:
            raise ContractViolation(f"feature grid {fh}x{fw} must divide {h}x{w}")
        sy, sx = h // fh, w // fw
        flow = self.backward_flow_image(i, k)
        sub = flow[sy // 2 :: sy, sx // 2 :: sx].copy()
        sub[..., 0] /= sy
        sub[..., 1] /= sx
        return MotionField(sub)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for frame in self.frames:
            digest.update(np.ascontiguousarray(frame).tobytes())
        return digest.hexdigest()


def _clip_patch(oy: int, ox: int, size: int, h: int, w: int):
    y0, y1 = max(oy, 0), min(oy + size, h)
    x0, x1 = max(ox, 0), min(ox + size, w)
    ys = slice(y0, y1)
    xs = slice(x0, x1)
    my = slice(y0 - oy, y1 - oy)
    mx = slice(x0 - ox, x1 - ox)
    return ys, xs, my, mx


def _smooth_noise(rng: np.random.Generator, h: int, w: int, amp: float) -> np.ndarray:
    coarse = rng.uniform(-amp, amp, size=(max(h // 4, 2), max(w // 4, 2), 3))
    up = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)[:h, :w]
    if up.shape[0] < h or up.shape[1] < w:
        up = np.pad(up, ((0, h - up.shape[0]), (0, w - up.shape[1]), (0, 0)), mode="edge")
    return _box3(_box3(up))


def _box3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + h, dx : dx + w]
    return acc / 9.0


def _new_scene(rng: np.random.Generator, spec: GeneratorSpec) -> _Scene:
    h, w = spec.height, spec.width
    base = rng.uniform(0.05, 0.3, size=3)
    background = np.clip(base[None, None, :] + _smooth_noise(rng, h, w, spec.background_amp), 0.0, 1.0)
    shapes = []
    for _ in range(spec.num_shapes):
        kind = int(rng.integers(0, 2))
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        color = rng.uniform(0.55, 0.95, size=3)
        texture = np.clip(
            color[None, None, :] + rng.uniform(-spec.texture_amp, spec.texture_amp, size=(size, size, 3)),
            0.0,
            1.0,
        )
        if kind == DISC:
            yy, xx = np.mgrid[0:size, 0:size]
            c = (size - 1) / 2.0
            mask = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
        else:
            mask = np.ones((size, size), dtype=bool)
        pos = np.array(
            [
                rng.uniform(1.0, h - size - 1.0),
                rng.uniform(1.0, w - size - 1.0),
            ]
        )
        vel = rng.uniform(-spec.max_speed, spec.max_speed, size=2)
        shapes.append(_Shape(kind, size, texture, mask, pos, vel))
    return _Scene(background, shapes)


def _advance(scene: _Scene, spec: GeneratorSpec, mult: float) -> None:
    h, w = spec.height, spec.width
    for shape in scene.shapes:
        shape.pos = shape.pos + shape.vel * mult
        for axis, limit in ((0, h - shape.size), (1, w - shape.size)):
            if shape.pos[axis] < 0:
                shape.pos[axis] = -shape.pos[axis]
                shape.vel[axis] = -shape.vel[axis]
            elif shape.pos[axis] > limit:
                shape.pos[axis] = 2 * limit - shape.pos[axis]
                shape.vel[axis] = -shape.vel[axis]


def _fast_multiplier(spec: GeneratorSpec, t: int) -> float:
    for start, end, mult in spec.fast_episodes:
        if start <= t < end:
            return mult
    return 1.0


def _in_blur(spec: GeneratorSpec, t: int) -> bool:
    return any(start <= t < end for start, end in spec.blur_episodes)


def generate_sequence(spec: GeneratorSpec, seed: int = 0) -> SyntheticSequence:
    """Render a deterministic sequence for a seed, with ground truth attached."""
    rng = np.random.default_rng([seed, 0x5E9])
    h, w = spec.height, spec.width
    scene = _new_scene(rng, spec)
    segment_id = 0

    frames, boxes, labels = [], [], []
    segment_ids, rolls, shape_offsets, shape_geoms = [], [], [], []
    events = [("cut", int(t)) for t in spec.cut_frames]
    events += [("blur", int(a), int(b)) for a, b in spec.blur_episodes]
    events += [("fast", int(a), int(b), float(m)) for a, b, m in spec.fast_episodes]

    roll_float = np.zeros(2)
    for t in range(spec.num_frames):
        if t in spec.cut_frames and t > 0:
            scene = _new_scene(rng, spec)
            segment_id += 1
            roll_float = np.zeros(2)
        elif t > 0:
            mult = _fast_multiplier(spec, t)
            _advance(scene, spec, mult)
            roll_float = roll_float + np.asarray(spec.global_velocity) * mult
        roll = (int(round(roll_float[0])), int(round(roll_float[1])))

        frame = np.roll(scene.background, roll, axis=(0, 1)).copy()
        offsets, geoms, frame_boxes, frame_labels = [], [], [], []
        for shape in scene.shapes:
            oy = int(round(shape.pos[0] + roll[0]))
            ox = int(round(shape.pos[1] + roll[1]))
            offsets.append((oy, ox))
            geoms.append((shape.size, shape.mask))
            ys, xs, my, mx = _clip_patch(oy, ox, shape.size, h, w)
            region = frame[ys, xs]
            sub = shape.mask[my, mx]
            region[sub] = shape.texture[my, mx][sub]
            frame_boxes.append(
                [max(oy, 0), max(ox, 0), min(oy + shape.size, h), min(ox + shape.size, w)]
            )
            frame_labels.append(shape.kind)

        if _in_blur(spec, t):
            for _ in range(spec.blur_passes):
                frame = _box3(frame)
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, size=frame.shape)
        frame = np.clip(frame, 0.0, 1.0)

        frames.append(frame)
        boxes.append(np.asarray(frame_boxes, dtype=np.float64).reshape(-1, 4))
        labels.append(np.asarray(frame_labels, dtype=np.int64))
        segment_ids.append(segment_id)
        rolls.append(roll)
        shape_offsets.append(offsets)
        shape_geoms.append(geoms)

    return SyntheticSequence(
        spec=spec,
        seed=seed,
        frames=frames,
        boxes=boxes,
        labels=labels,
        events=tuple(events),
        segment_ids=segment_ids,
        rolls=rolls,
        shape_offsets=shape_offsets,
        shape_geoms=shape_geoms,
    )


# Canonical generator settings used by tests, the benchmark, and the CLI.

def static_spec(size: int = 32, num_frames: int = 12) -> GeneratorSpec:
    return GeneratorSpec(height=size, width=size, num_frames=num_frames, max_speed=0.0)


def scene_cut_spec(size: int = 32, num_frames: int = 16, cut: int = 8) -> GeneratorSpec:
    return GeneratorSpec(
        height=size, width=size, num_frames=num_frames, max_speed=0.0, cut_frames=(cut,)
    )


def deteriorated_spec(size: int = 32, num_frames: int = 30) -> GeneratorSpec:
    """Benchmark scene: small moving shapes, per-frame noise, a blur episode,
    a fast-motion burst, and one mid-cycle scene cut."""
    return GeneratorSpec(
        height=size,
        width=size,
        num_frames=num_frames,
        num_shapes=3,
        min_size=6,
        max_size=10,
        max_speed=0.5,
        noise_sigma=0.06,
        blur_episodes=((6, 12),),
        fast_episodes=((13, 16, 4.0),),
        cut_frames=(17,),
    )


def benchmark_sequence(seed: int, size: int = 32, num_frames: int = 30) -> SyntheticSequence:
    return generate_sequence(deteriorated_spec(size=size, num_frames=num_frames), seed=seed)
