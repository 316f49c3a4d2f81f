"""Command-line interface.

Subcommands: ``generate`` (emit sequence fixtures), ``run`` (one
configuration over a sequence), ``sweep`` (cost/accuracy curves), ``train``
(toy joint training), ``gradcheck`` (gradient validation). A JSON config
file can preset any option; explicitly passed flags override config keys,
and the ``AVP_SEED`` environment variable overrides every configured seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import report, tensorio
from .gradcheck import run_gradcheck
from .metrics import sequence_accuracy_proxy
from .networks import make_reference_networks
from .pipeline import PRESET_NAMES, preset_config, run_sequence
from .sweep import ReferenceNetworksFactory, run_sweep, table1_sweep, write_curve_csv
from .synth import GeneratorSpec, deteriorated_spec, generate_sequence
from .train import (
    default_training_sequences,
    evaluation_pairs,
    make_trainable_model,
    mean_eval_fraction,
    sample_stream,
    train_joint,
)

ENV_SEED = "AVP_SEED"


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _cfg(config: dict, section: str, key: str, flag_value, default):
    """Flag beats config beats default; flags left at None fall through."""
    if flag_value is not None:
        return flag_value
    return config.get(section, {}).get(key, default)


def _resolve_seed(flag_value, config: dict, default: int = 0) -> int:
    env = os.environ.get(ENV_SEED)
    if env is not None:
        return int(env)
    if flag_value is not None:
        return int(flag_value)
    return int(config.get("seed", default))


def _generator_spec(config: dict, args) -> GeneratorSpec:
    base = deteriorated_spec()
    gen = config.get("generator", {})
    fields = {
        "height": gen.get("height", base.height),
        "width": gen.get("width", base.width),
        "num_frames": _cfg(config, "generator", "num_frames", getattr(args, "frames", None), base.num_frames),
        "num_shapes": gen.get("num_shapes", base.num_shapes),
        "min_size": gen.get("min_size", base.min_size),
        "max_size": gen.get("max_size", base.max_size),
        "max_speed": gen.get("max_speed", base.max_speed),
        "global_velocity": tuple(gen.get("global_velocity", base.global_velocity)),
        "noise_sigma": _cfg(config, "generator", "noise_sigma", getattr(args, "noise", None), base.noise_sigma),
        "blur_episodes": tuple(tuple(e) for e in gen.get("blur_episodes", base.blur_episodes)),
        "fast_episodes": tuple(tuple(e) for e in gen.get("fast_episodes", base.fast_episodes)),
        "cut_frames": tuple(gen.get("cut_frames", base.cut_frames)),
        "texture_amp": gen.get("texture_amp", base.texture_amp),
        "background_amp": gen.get("background_amp", base.background_amp),
    }
    return GeneratorSpec(**fields)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args.seed, config)
    spec = _generator_spec(config, args)
    seq = generate_sequence(spec, seed=seed)
    out = _out_dir(args)

    frames_dir = out / "frames"
    frames_dir.mkdir(exist_ok=True)
    for t, frame in enumerate(seq.frames):
        tensorio.write_tensor(frames_dir / f"frame_{t:04d}.avpt", frame)
    flow_dir = out / "flow"
    flow_dir.mkdir(exist_ok=True)
    for t in range(1, len(seq)):
        tensorio.write_tensor(flow_dir / f"flow_{t:04d}.avpt", seq.backward_flow_image(t, t - 1))
    objects = [
        {"frame": t, "boxes": seq.boxes[t].tolist(), "labels": seq.labels[t].tolist()}
        for t in range(len(seq))
    ]
    (out / "objects.json").write_text(json.dumps(objects, indent=1))
    manifest = {
        "seed": seed,
        "num_frames": len(seq),
        "height": spec.height,
        "width": spec.width,
        "events": [list(e) for e in seq.events],
        "checksum": seq.checksum(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    report.save_sequence_preview(seq.frames, out / "preview.png")
    print(f"generated {len(seq)} frames (seed {seed}) -> {out}")
    print(f"checksum {seq.checksum()}")
    return 0


def _write_detections_csv(detections, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "y0", "x0", "y1", "x1", "score", "label"])
        for t, dets in enumerate(detections):
            for box, score, label in zip(dets.boxes, dets.scores, dets.labels):
                writer.writerow([t, box[0], box[1], box[2], box[3], score, int(label)])


def cmd_run(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args.seed, config)
    run_cfg = config.get("run", {})
    preset = _cfg(config, "run", "preset", args.preset, "c3")
    pipeline_config = preset_config(
        preset,
        l=int(_cfg(config, "scheduler", "l", args.l, 10)),
        gamma=float(_cfg(config, "scheduler", "gamma", args.gamma, 0.2)),
        r=int(_cfg(config, "run", "r", args.r, 2)),
        lam=float(_cfg(config, "pipeline", "lambda", args.lam, 2.0)),
        tau=float(_cfg(config, "scheduler", "tau", args.tau, 0.0)),
        flow_cost_ratio=float(
            _cfg(config, "pipeline", "flow_cost_ratio", args.flow_cost_ratio, 10.0)
        ),
    )
    spec = _generator_spec(config, args)
    num_sequences = int(_cfg(config, "run", "num_sequences", args.num_sequences, 1))
    flow_kind = _cfg(config, "run", "flow", args.flow, "gt")
    out = _out_dir(args)

    per_sequence = []
    for j in range(num_sequences):
        seq = generate_sequence(spec, seed=seed + j)
        networks = make_reference_networks(
            seq=seq, seed=int(run_cfg.get("networks_seed", 0)), flow_kind=flow_kind
        )
        detections, ledger = run_sequence(seq.frames, pipeline_config, networks,
                                          ground_truth=seq.boxes)
        suffix = "" if num_sequences == 1 else f"_{j:03d}"
        ledger.to_csv(out / f"ledger{suffix}.csv")
        _write_detections_csv(detections, out / f"detections{suffix}.csv")
        if j == 0:
            report.save_ledger_figure(ledger, out / "ledger.png", title=f"{preset} per-frame cost")
        per_sequence.append(
            {
                "seed": seed + j,
                "accuracy_proxy": sequence_accuracy_proxy(detections, seq.boxes),
                "mean_cost": ledger.mean_cost_per_frame(),
                "key_rate": ledger.key_rate(),
                "recompute_fraction": ledger.mean_recompute_fraction(),
            }
        )
    accuracy = float(np.mean([s["accuracy_proxy"] for s in per_sequence]))
    mean_cost = float(np.mean([s["mean_cost"] for s in per_sequence]))
    key_rate = float(np.mean([s["key_rate"] for s in per_sequence]))
    recompute = float(np.mean([s["recompute_fraction"] for s in per_sequence]))
    summary = {
        "preset": preset,
        "seed": seed,
        "accuracy_proxy": accuracy,
        "mean_cost": mean_cost,
        "key_rate": key_rate,
        "recompute_fraction": recompute,
        "sequences": per_sequence,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(
        f"{preset}: accuracy={accuracy:.3f} mean_cost={mean_cost:.0f} "
        f"key_rate={key_rate:.3f} recompute={recompute:.3f}"
    )
    print(f"ledger -> {out / 'ledger.csv'}, figure -> {out / 'ledger.png'}")
    return 0


def _parse_grid(text, cast):
    return tuple(cast(v) for v in text.split(",")) if text else None


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args.seed, config)
    sweep_cfg = config.get("sweep", {})
    l_grid = _parse_grid(args.l_grid, int) or tuple(sweep_cfg.get("l_grid", (1, 2, 5, 10)))
    gamma_grid = _parse_grid(args.gamma_grid, float) or tuple(
        sweep_cfg.get("gamma_grid", (0.1, 0.2, 0.4))
    )
    r_grid = _parse_grid(args.r_grid, int) or tuple(sweep_cfg.get("r_grid", (1, 2)))
    num_seqs = int(_cfg(config, "sweep", "num_sequences", args.num_sequences, 3))
    frames = int(_cfg(config, "sweep", "num_frames", args.frames, 30))
    lam = float(_cfg(config, "pipeline", "lambda", args.lam, 2.0))
    workers = int(_cfg(config, "sweep", "workers", args.workers, 1))

    spec = table1_sweep(l_grid=l_grid, gamma_grid=gamma_grid, r_grid=r_grid, lam=lam,
                        include_fgfa=not args.no_fgfa)
    gen_spec = _generator_spec(config, args)
    if gen_spec.num_frames != frames:
        import dataclasses

        gen_spec = dataclasses.replace(gen_spec, num_frames=frames)
    sequences = [generate_sequence(gen_spec, seed=seed + j) for j in range(num_seqs)]
    factory = ReferenceNetworksFactory(
        seed=int(sweep_cfg.get("networks_seed", 0)),
        flow_kind=_cfg(config, "sweep", "flow", args.flow, "gt"),
    )
    rows = run_sweep(spec, sequences, networks_factory=factory, workers=workers)
    out = _out_dir(args)
    write_curve_csv(rows, out / "curves.csv")
    report.save_tradeoff_figure(rows, out / "curves.png")
    for row in rows:
        print(
            f"{row.label:16s} accuracy={row.accuracy_proxy:.3f} cost={row.mean_cost:.0f} "
            f"keys={row.key_rate:.3f} recompute={row.recompute_fraction:.3f}"
        )
    print(f"curves -> {out / 'curves.csv'}, figure -> {out / 'curves.png'}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args.seed, config)
    train_cfg = config.get("train", {})
    lam = float(_cfg(config, "train", "lambda", args.lam, 0.005))
    steps = int(_cfg(config, "train", "steps", args.steps, 2000))
    lr = float(_cfg(config, "train", "lr", args.lr, 1e-3))
    num_seqs = int(train_cfg.get("num_sequences", 3))

    sequences = default_training_sequences(num=num_seqs, seed_base=1000 + seed)
    model = make_trainable_model(seed=seed)
    result = train_joint(model, sample_stream(sequences, seed=seed), lam=lam, steps=steps, lr=lr)
    fraction = mean_eval_fraction(result.model, evaluation_pairs())

    out = _out_dir(args)
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "det_loss", "mask_fraction", "mode"])
        for t in result.trace:
            writer.writerow([t["step"], t["loss"], t["det_loss"], t["mask_fraction"], t["mode"]])
    report.save_loss_figure(result.trace, out / "loss.png")
    model_state = {
        "quality_head": {
            "bias": result.model.qhead.bias,
            "w_err": result.model.qhead.w_err,
            "w_mag": result.model.qhead.w_mag,
        },
        "detector": {
            "w_obj": result.model.det.w_obj.tolist(),
            "b_obj": result.model.det.b_obj,
            "w_box": result.model.det.w_box.tolist(),
            "b_box": result.model.det.b_box.tolist(),
        },
        "lambda": lam,
        "steps": steps,
        "eval_recompute_fraction": fraction,
    }
    (out / "model.json").write_text(json.dumps(model_state, indent=1))
    print(
        f"trained {steps} steps (lambda={lam}): final loss={result.trace[-1]['loss']:.4f} "
        f"eval recompute fraction={fraction:.4f}"
    )
    print(f"trace -> {out / 'loss_trace.csv'}, figure -> {out / 'loss.png'}")
    return 0


def cmd_gradcheck(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args.seed, config)
    cases = int(_cfg(config, "gradcheck", "cases", args.cases, 100))
    rep = run_gradcheck(seed=seed, cases=cases)
    print(rep.summary())
    if not rep.passed:
        print(f"FAILING components: {', '.join(rep.failing())}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avpipe",
        description="Adaptive video feature pipeline benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default="avpipe_out")

    p_gen = sub.add_parser("generate", help="emit a synthetic sequence as tensor fixtures")
    common(p_gen)
    p_gen.add_argument("--frames", type=int, default=None)
    p_gen.add_argument("--noise", type=float, default=None)

    p_run = sub.add_parser("run", help="run one configuration over a sequence")
    common(p_run)
    p_run.add_argument("--preset", choices=PRESET_NAMES, default=None)
    p_run.add_argument("--l", type=int, default=None, help="fixed key-frame interval")
    p_run.add_argument("--gamma", type=float, default=None)
    p_run.add_argument("--tau", type=float, default=None)
    p_run.add_argument("--r", type=int, default=None, help="dense window radius")
    p_run.add_argument("--lam", type=float, default=None)
    p_run.add_argument("--flow", choices=("gt", "block", "refined"), default=None)
    p_run.add_argument("--flow-cost-ratio", type=float, default=None)
    p_run.add_argument("--frames", type=int, default=None)
    p_run.add_argument("--noise", type=float, default=None)
    p_run.add_argument("--num-sequences", type=int, default=None)

    p_sweep = sub.add_parser("sweep", help="sweep the method matrix, emit curves")
    common(p_sweep)
    p_sweep.add_argument("--l-grid", default=None, help="comma-separated intervals")
    p_sweep.add_argument("--gamma-grid", default=None)
    p_sweep.add_argument("--r-grid", default=None)
    p_sweep.add_argument("--lam", type=float, default=None)
    p_sweep.add_argument("--num-sequences", type=int, default=None)
    p_sweep.add_argument("--frames", type=int, default=None)
    p_sweep.add_argument("--noise", type=float, default=None)
    p_sweep.add_argument("--flow", choices=("gt", "block", "refined"), default=None)
    p_sweep.add_argument("--workers", type=int, default=None)
    p_sweep.add_argument("--no-fgfa", action="store_true")

    p_train = sub.add_parser("train", help="joint toy training with the area penalty")
    common(p_train)
    p_train.add_argument("--lam", type=float, default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    common(p_grad)
    p_grad.add_argument("--cases", type=int, default=None)

    return parser


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
