"""Key-frame scheduling policies: fixed interval, adaptive, and oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .partial_update import QualityMap
from .warpcore import ContractViolation

SCHEDULER_KINDS = ("fixed", "adaptive", "oracle")


@dataclass(frozen=True)
class SchedulerConfig:
    kind: str = "fixed"
    l: int = 10  # key-frame interval for the fixed policy
    gamma: float = 0.2  # low-quality area fraction threshold for the adaptive policy
    tau: float = 0.0  # quality threshold

    def __post_init__(self):
        if self.kind not in SCHEDULER_KINDS:
            raise ContractViolation(f"unknown scheduler kind {self.kind!r}")
        if self.l < 1:
            raise ContractViolation(f"key-frame interval must be >= 1, got {self.l}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation(f"gamma must be in [0, 1], got {self.gamma}")


def is_key_fixed(frame_index: int, l: int) -> bool:
    """Fixed-rate policy: every l-th frame (frame 0 is always key)."""
    if frame_index < 0:
        raise ContractViolation(f"frame index must be >= 0, got {frame_index}")
    if l < 1:
        raise ContractViolation(f"interval must be >= 1, got {l}")
    return frame_index % l == 0

def is_key_adaptive(q: QualityMap, tau: float, gamma: float) -> bool:
    """Adaptive policy: key iff the low-quality area fraction strictly
    exceeds gamma, i.e. mean(1[q <= tau]) > gamma."""
    values = np.asarray(q.q)
    if values.size == 0:
        raise ContractViolation("quality map is empty")
    fraction = np.count_nonzero(values <= tau) / values.size
    return bool(fraction > gamma)


class OracleBranches(Protocol):
    """Two-branch rollout hook the pipeline hands to the oracle policy."""

    def run_branch(self, as_key: bool):
        """Process the pending frame as key / non-key; returns its detections."""
        ...


def is_key_oracle(
    frame_index: int,
    branches: OracleBranches,
    ground_truth,
    eval_fn: Callable,
) -> bool:
    """Upper-bound policy: try both branches, keep key only on strict gain.

    Scores the frame's detections from each branch against ground truth with
    ``eval_fn(detections, ground_truth)``; ties go to the cheaper non-key
    branch.
    """
    if ground_truth is None:
        raise ContractViolation(f"oracle scheduling needs ground truth for frame {frame_index}")
    score_key = eval_fn(branches.run_branch(True), ground_truth)
    score_nonkey = eval_fn(branches.run_branch(False), ground_truth)
    return score_key > score_nonkey
