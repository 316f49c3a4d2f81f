"""Sweep runner: evaluate configurations over sequences, emit curve rows.

Jobs are the cross product of sweep configurations and sequences. They can
be distributed over a process pool; results are merged by job key so the
output is identical regardless of worker count or completion order.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .metrics import best_iou_per_gt
from .networks import NetworkBundle, make_reference_networks
from .pipeline import PipelineConfig, preset_config, run_sequence
from .synth import SyntheticSequence
from .warpcore import ContractViolation

DEFAULT_L_GRID = (1, 2, 5, 10)
DEFAULT_GAMMA_GRID = (0.1, 0.2, 0.4)
DEFAULT_R_GRID = (1, 2)


@dataclass(frozen=True)
class SweepJob:
    label: str
    config: PipelineConfig


@dataclass(frozen=True)
class SweepSpec:
    jobs: tuple[SweepJob, ...]

    def __post_init__(self):
        if len(self.jobs) == 0:
            raise ContractViolation("sweep spec has no jobs")
        labels = [j.label for j in self.jobs]
        if len(set(labels)) != len(labels):
            raise ContractViolation("sweep labels must be unique")


def table1_sweep(
    l_grid: Sequence[int] = DEFAULT_L_GRID,
    gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID,
    r_grid: Sequence[int] = DEFAULT_R_GRID,
    lam: float = 2.0,
    include_fgfa: bool = True,
) -> SweepSpec:
    """The method matrix swept over its accuracy/speed knobs."""
    jobs = [SweepJob("per_frame", preset_config("per_frame"))]
    for l in l_grid:
        if l > 1:
            jobs.append(SweepJob(f"dff:l={l}", preset_config("dff", l=l)))
    if include_fgfa:
        for r in r_grid:
            jobs.append(SweepJob(f"fgfa:r={r}", preset_config("fgfa", r=r)))
    for l in l_grid:
        jobs.append(SweepJob(f"c1:l={l}", preset_config("c1", l=l)))
    for l in l_grid:
        jobs.append(SweepJob(f"c2:l={l}", preset_config("c2", l=l, lam=lam)))
    for gamma in gamma_grid:
        jobs.append(SweepJob(f"c3:gamma={gamma}", preset_config("c3", gamma=gamma, lam=lam)))
    return SweepSpec(jobs=tuple(jobs))


@dataclass(frozen=True)
class CurveRow:
    label: str
    accuracy_proxy: float
    mean_cost: float
    key_rate: float
    recompute_fraction: float


CURVE_COLUMNS = ("label", "accuracy_proxy", "mean_cost", "key_rate", "recompute_fraction")


def write_curve_csv(rows: Sequence[CurveRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for r in rows:
            writer.writerow(
                [r.label, r.accuracy_proxy, r.mean_cost, r.key_rate, r.recompute_fraction]
            )


def read_curve_csv(path) -> list[CurveRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                CurveRow(
                    label=rec["label"],
                    accuracy_proxy=float(rec["accuracy_proxy"]),
                    mean_cost=float(rec["mean_cost"]),
                    key_rate=float(rec["key_rate"]),
                    recompute_fraction=float(rec["recompute_fraction"]),
                )
            )
    return rows


@dataclass(frozen=True)
class ReferenceNetworksFactory:
    """Picklable networks factory for worker processes."""

    seed: int = 0
    flow_kind: str = "gt"
    calibrated: bool = True

    def __call__(self, seq: SyntheticSequence) -> NetworkBundle:
        return make_reference_networks(
            seq=seq, seed=self.seed, flow_kind=self.flow_kind, calibrated=self.calibrated
        )


def _run_job(args):
    job, seq, factory = args
    networks = factory(seq)
    needs_gt = job.config.scheduler.kind == "oracle"
    detections, ledger = run_sequence(
        seq.frames, job.config, networks, ground_truth=seq.boxes if needs_gt else None
    )
    hits = 0
    total = 0
    for dets, gt in zip(detections, seq.boxes):
        best = best_iou_per_gt(dets, gt)
        hits += int((best >= 0.5).sum())
        total += best.size
    frames = len(ledger)
    keys = sum(1 for r in ledger.records if r.is_key)
    frac = sum(r.recompute_fraction for r in ledger.records)
    return hits, total, ledger.total(), frames, keys, frac


def run_sweep(
    spec: SweepSpec,
    sequences: Sequence[SyntheticSequence],
    networks_factory: Optional[Callable[[SyntheticSequence], NetworkBundle]] = None,
    workers: int = 1,
) -> list[CurveRow]:
    """One curve row per sweep job, aggregated over all sequences."""
    if len(sequences) == 0:
        raise ContractViolation("sweep needs at least one sequence")
    factory = networks_factory or ReferenceNetworksFactory()
    tasks = [
        ((ji, si), (job, seq, factory))
        for ji, job in enumerate(spec.jobs)
        for si, seq in enumerate(sequences)
    ]
    results: dict[tuple[int, int], tuple] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (key, _), out in zip(tasks, pool.map(_run_job, [t[1] for t in tasks])):
                results[key] = out
    else:
        for key, payload in tasks:
            results[key] = _run_job(payload)

    rows = []
    for ji, job in enumerate(spec.jobs):
        hits = total = cost = frames = keys = frac = 0.0
        for si in range(len(sequences)):
            h, t, c, f, k, fr = results[(ji, si)]
            hits += h
            total += t
            cost += c
            frames += f
            keys += k
            frac += fr
        rows.append(
            CurveRow(
                label=job.label,
                accuracy_proxy=hits / total if total else 1.0,
                mean_cost=cost / frames,
                key_rate=keys / frames,
                recompute_fraction=frac / frames,
            )
        )
    return rows
