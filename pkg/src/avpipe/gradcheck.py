"""Finite-difference validation of every hand-derived gradient.

Each component check draws randomized small instances, computes the analytic
gradient of a scalar projection ``L = <g, f(x)>``, and compares it
elementwise against central differences. The straight-through estimator is
a step function, so it is checked against its exact piecewise definition
instead of finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .aggregate import LinearProjector, recursive_vjp
from .networks import QualityHead, ToyDetector, detection_loss_and_grads, detection_targets
from .partial_update import ste_gradient
from .warpcore import FeatureMap, MotionField, elementwise_blend, warp, warp_backward

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
_REL_FLOOR = 1e-6  # guards the relative error where both sides are ~0


@dataclass(frozen=True)
class ComponentReport:
    name: str
    cases: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max_rel_err={self.max_rel_err:.3e} over {self.cases} cases (tol {self.tol:g})"


@dataclass
class GradCheckReport:
    components: list[ComponentReport]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.components)

    def failing(self) -> list[str]:
        return [c.name for c in self.components if not c.passed]

    def summary(self) -> str:
        return "\n".join(c.line() for c in self.components)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _fd_grad(fn, x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, elementwise."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.reshape(-1)
    xw = np.array(x, dtype=np.float64)
    xf = xw.reshape(-1)
    for j in range(xf.size):
        orig = xf[j]
        xf[j] = orig + h
        up = fn(xw)
        xf[j] = orig - h
        down = fn(xw)
        xf[j] = orig
        flat[j] = (up - down) / (2.0 * h)
    return grad


def _interior_motion(rng, h, w):
    """Motion whose sample points stay strictly inside cells and borders, so
    the warp is smooth at the probed coordinates."""
    base_y, base_x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ty = rng.integers(1, h - 1, size=(h, w)) + rng.uniform(0.3, 0.7, size=(h, w))
    tx = rng.integers(1, w - 1, size=(h, w)) + rng.uniform(0.3, 0.7, size=(h, w))
    return np.stack([ty - base_y, tx - base_x], axis=-1)


def check_warp_features(rng, cases, h, tol) -> ComponentReport:
    worst = 0.0
    for _ in range(cases):
        src = rng.normal(size=(4, 5, 2))
        motion = MotionField(_interior_motion(rng, 4, 5))
        g = rng.normal(size=(4, 5, 2))
        grad_src, _ = warp_backward(FeatureMap(src), motion, g)
        fd = _fd_grad(lambda x: float(np.sum(g * warp(FeatureMap(x), motion).data)), src, h)
        worst = max(worst, _rel_err(grad_src, fd))
    return ComponentReport("warp_features", cases, worst, tol)


def check_warp_motion(rng, cases, h, tol) -> ComponentReport:
    worst = 0.0
    for _ in range(cases):
        src = rng.normal(size=(4, 5, 2))
        motion = _interior_motion(rng, 4, 5)
        g = rng.normal(size=(4, 5, 2))
        _, grad_motion = warp_backward(FeatureMap(src), MotionField(motion), g)
        fd = _fd_grad(
            lambda m: float(np.sum(g * warp(FeatureMap(src), MotionField(m)).data)), motion, h
        )
        worst = max(worst, _rel_err(grad_motion, fd))
    return ComponentReport("warp_motion", cases, worst, tol)


def check_blend(rng, cases, h, tol) -> ComponentReport:
    worst = 0.0
    for _ in range(cases):
        a = rng.normal(size=(3, 4, 2))
        b = rng.normal(size=(3, 4, 2))
        w_a = rng.uniform(0.1, 0.9, size=(3, 4))
        g = rng.normal(size=(3, 4, 2))
        # gradients w.r.t. the inputs are exactly the broadcast weights
        grad_a = w_a[..., None] * g
        grad_b = (1.0 - w_a)[..., None] * g
        fd_a = _fd_grad(
            lambda x: float(
                np.sum(g * elementwise_blend(FeatureMap(x), FeatureMap(b), w_a, 1.0 - w_a).data)
            ),
            a,
            h,
        )
        fd_b = _fd_grad(
            lambda x: float(
                np.sum(g * elementwise_blend(FeatureMap(a), FeatureMap(x), w_a, 1.0 - w_a).data)
            ),
            b,
            h,
        )
        worst = max(worst, _rel_err(grad_a, fd_a), _rel_err(grad_b, fd_b))
    return ComponentReport("blend", cases, worst, tol)


def _cos_weight(a: np.ndarray, b: np.ndarray) -> float:
    na = max(np.sqrt(np.sum(a * a)), 1e-12)
    nb = max(np.sqrt(np.sum(b * b)), 1e-12)
    return float(np.exp(np.dot(a, b) / (na * nb)))


def check_cosine_weight(rng, cases, h, tol) -> ComponentReport:
    """exp(cos) similarity on random 8-dim vector pairs."""
    worst = 0.0
    for _ in range(cases):
        a = rng.normal(size=8) + 0.1
        b = rng.normal(size=8) + 0.1
        na = np.sqrt(np.sum(a * a))
        nb = np.sqrt(np.sum(b * b))
        cos = np.dot(a, b) / (na * nb)
        wgt = np.exp(cos)
        grad_a = wgt * (b / (na * nb) - cos * a / (na * na))
        grad_b = wgt * (a / (na * nb) - cos * b / (nb * nb))
        fd_a = _fd_grad(lambda x: _cos_weight(x, b), a, h)
        fd_b = _fd_grad(lambda x: _cos_weight(a, x), b, h)
        worst = max(worst, _rel_err(grad_a, fd_a), _rel_err(grad_b, fd_b))
    return ComponentReport("cosine_weight", cases, worst, tol)


def check_recursive_aggregation(rng, cases, h, tol) -> ComponentReport:
    """Full backward of the two-term aggregation: prev, cur, projector."""
    worst = 0.0
    for _ in range(cases):
        a = rng.normal(size=(3, 3, 4))
        b = rng.normal(size=(3, 3, 4))
        p = rng.normal(size=(4, 6)) / 2.0
        g = rng.normal(size=(3, 3, 4))
        out, vjp = recursive_vjp(a, b, LinearProjector(p))
        grad_a, grad_b, grad_p = vjp(g)

        def loss(a_=None, b_=None, p_=None):
            o, _ = recursive_vjp(
                a if a_ is None else a_, b if b_ is None else b_,
                LinearProjector(p if p_ is None else p_),
            )
            return float(np.sum(g * o))

        worst = max(
            worst,
            _rel_err(grad_a, _fd_grad(lambda x: loss(a_=x), a, h)),
            _rel_err(grad_b, _fd_grad(lambda x: loss(b_=x), b, h)),
            _rel_err(grad_p, _fd_grad(lambda x: loss(p_=x), p, h)),
        )
    return ComponentReport("recursive_aggregation", cases, worst, tol)


def _random_detector(rng, channels=6) -> ToyDetector:
    return ToyDetector(
        w_obj=rng.normal(size=channels),
        b_obj=float(rng.normal()),
        w_box=rng.normal(size=(channels, 4)),
        b_box=rng.normal(size=4),
        cell_stride=2,
    )


def check_detection_loss(rng, cases, h, tol) -> ComponentReport:
    worst = 0.0
    for _ in range(cases):
        det = _random_detector(rng)
        feature = rng.normal(size=(5, 5, 6))
        boxes = np.array([[2.0, 2.0, 7.0, 6.0], [4.0, 5.0, 9.0, 9.0]])
        targets = detection_targets(boxes, (5, 5), det.cell_stride)
        _, grads = detection_loss_and_grads(det, feature, targets)

        def with_param(**kw):
            return replace(det, **kw)

        checks = [
            (grads["feature"], feature, lambda x: detection_loss_and_grads(det, x, targets)[0]),
            (grads["w_obj"], det.w_obj,
             lambda x: detection_loss_and_grads(with_param(w_obj=x), feature, targets)[0]),
            (grads["w_box"], det.w_box,
             lambda x: detection_loss_and_grads(with_param(w_box=x), feature, targets)[0]),
            (grads["b_box"], det.b_box,
             lambda x: detection_loss_and_grads(with_param(b_box=x), feature, targets)[0]),
            (np.array(grads["b_obj"]), np.array(det.b_obj),
             lambda x: detection_loss_and_grads(with_param(b_obj=float(x)), feature, targets)[0]),
        ]
        for analytic, x, fn in checks:
            worst = max(worst, _rel_err(analytic, _fd_grad(fn, x, h)))
    return ComponentReport("detection_loss", cases, worst, tol)


def check_quality_head(rng, cases, h, tol) -> ComponentReport:
    worst = 0.0
    for _ in range(cases):
        head = QualityHead()
        err = rng.uniform(0.0, 0.3, size=(4, 4))
        mag = rng.uniform(0.0, 3.0, size=(4, 4))
        g = rng.normal(size=(4, 4))
        fe, fm = head.features(err, mag)
        grad = np.array([np.sum(g), np.sum(g * (-fe)), np.sum(g * (-fm))])

        def loss(params):
            bias, w_err, w_mag = params
            return float(np.sum(g * (bias - w_err * fe - w_mag * fm)))

        fd = _fd_grad(loss, np.array([head.bias, head.w_err, head.w_mag]), h)
        worst = max(worst, _rel_err(grad, fd))
    return ComponentReport("quality_head", cases, worst, tol)


def check_ste_formula(rng, cases) -> ComponentReport:
    """Exact comparison against the piecewise definition; never FD."""
    worst = 0.0
    for _ in range(cases):
        tau = float(rng.uniform(-1.0, 1.0))
        qs = rng.uniform(-4.0, 4.0, size=100)
        got = ste_gradient(qs, tau)
        want = np.where(np.abs(qs - tau) <= 1.0, -1.0, 0.0)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return ComponentReport("ste_formula", cases, worst, 0.0)


def run_gradcheck(
    seed: int = 0, cases: int = 100, h: float = DEFAULT_STEP, tol: float = DEFAULT_TOL
) -> GradCheckReport:
    rng = np.random.default_rng([seed, 0x96AD])
    components = [
        check_warp_features(rng, cases, h, tol),
        check_warp_motion(rng, cases, h, tol),
        check_blend(rng, cases, h, tol),
        check_cosine_weight(rng, cases, h, tol),
        check_recursive_aggregation(rng, cases, h, tol),
        check_detection_loss(rng, cases, h, tol),
        check_quality_head(rng, cases, h, tol),
        check_ste_formula(rng, cases),
    ]
    return GradCheckReport(components=components)
