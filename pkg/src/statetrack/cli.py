"""Command-line entry points: train, track, eval, gradcheck.

All commands are non-interactive and exit-code honest: 0 only on success.
Domain errors print one ``error: ...`` line on stderr and exit 1.
"""

import argparse
import os
import sys

import numpy as np

from . import diagnostics
from .checkpoint import load_checkpoint, save_model
from .config import DEFAULTS, apply_overrides, config_text, load_config, parse_config
from .errors import ConfigurationError, ContractViolation, DimensionError, OracleFailure
from .imaging import draw_box, save_png
from .synthgen import eval_metrics, gen_sequence, load_sequence, standard_scenes
from .trackpipe import (
    ABLATION_PRESETS,
    PARITIES,
    TrackConfig,
    TrackResult,
    Trainer,
    ablate,
    ablation_mask,
    build_model,
    draw_samples,
    track_sequence,
)

_DOMAIN_ERRORS = (ConfigurationError, ContractViolation, DimensionError, OracleFailure, OSError)


def build_dataset(cfg):
    """The fixed synthetic training set implied by a config (seeded)."""
    specs = standard_scenes(
        cfg["train_sequences"], cfg["seed"], frames=cfg["seq_frames"], canvas=cfg["canvas"]
    )
    return [gen_sequence(spec) for spec in specs]


def run_training(cfg, log=None, echo=None):
    """Train a fresh model per config; returns (model, reports)."""
    model = build_model(cfg, seed=cfg["seed"])
    trainer = Trainer(model, cfg, log=log)
    rng = np.random.default_rng(cfg["seed"] + 1)
    dataset = build_dataset(cfg)
    reports = []
    for step in range(cfg["steps"]):
        batch = draw_samples(dataset, rng, cfg["batch_size"], cfg["frames_per_sample"])
        report = trainer.train_step(batch)
        reports.append(report)
        line = report.line(step=step)
        if log is not None:
            log(line)
        if echo is not None:
            echo(line)
    return model, reports


def cmd_train(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = apply_overrides(cfg, overrides)

    # outputs are only created once the config is known to be valid
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train.log")
    ckpt_path = os.path.join(args.out, "model.ckpt")
    with open(log_path, "w", encoding="utf-8") as log_fh:

        def log(line):
            log_fh.write(line + "\n")

        model, _ = run_training(cfg, log=log, echo=print)
    save_model(ckpt_path, model, step=cfg["steps"], config_text=config_text(cfg))
    print(f"checkpoint={ckpt_path} log={log_path} steps={cfg['steps']}")
    return 0


def load_tracker(ckpt_path):
    """Rebuild the model a checkpoint was trained with, from its config echo."""
    tensors, step, text = load_checkpoint(ckpt_path)
    cfg = parse_config(text) if text.strip() else dict(DEFAULTS)
    model = build_model(cfg, seed=cfg["seed"])
    model.load_state_dict(tensors)
    return model, cfg, step


def cmd_track(args):
    model, cfg, _ = load_tracker(args.checkpoint)
    if args.ablate != "none":
        model = ablate(model, ablation_mask(args.ablate))
    frames, boxes = load_sequence(args.sequence)
    tcfg = TrackConfig(
        threshold=args.threshold,
        interval=args.interval,
        window=args.window,
        parity=args.parity,
    )
    trace = [] if args.trace else None
    results = track_sequence(model, frames, boxes[0], tcfg, trace=trace)

    lines = "\n".join(r.to_line() for r in results) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(lines)
    else:
        sys.stdout.write(lines)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write("\n".join(trace) + "\n")
    if args.render:
        os.makedirs(args.render, exist_ok=True)
        h, w = frames[0].shape[:2]
        for t, r in enumerate(results):
            overlay = draw_box(frames[t], r.to_pixel_box(w, h))
            save_png(os.path.join(args.render, f"overlay_{t:05d}.png"), overlay)
    return 0


def cmd_eval(args):
    frames, gt = load_sequence(args.sequence)
    canvas_h, canvas_w = frames[0].shape[:2]
    with open(args.results, encoding="utf-8") as fh:
        results = [TrackResult.parse(line) for line in fh if line.strip()]
    if len(results) != len(gt):
        raise ConfigurationError(
            f"results cover {len(results)} frames but annotations cover {len(gt)}"
        )
    order = [r.frame_index for r in results]
    if order != list(range(len(gt))):
        raise ConfigurationError("result lines must cover frames 0..T-1 in order")
    pred = np.array([r.to_pixel_box(canvas_w, canvas_h) for r in results])
    m = eval_metrics(pred, gt, canvas_w)
    print(
        f"frames={len(gt)} mean_iou={m.mean_iou:.4f} "
        f"success_auc={m.success_auc:.4f} precision={m.precision:.4f}"
    )
    return 0


def cmd_gradcheck(args):
    rows = diagnostics.run_suite(corrupt=args.corrupt, seed=args.seed)
    table, ok = diagnostics.format_table(rows)
    print(table)
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="statetrack",
        description="Train, run, and verify the compressed-state tracker.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", default="run", help="output directory (checkpoint + log)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("track", help="track one exported sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="directory with frames + annotations.txt")
    p.add_argument("--out", default=None, help="results file (default: stdout)")
    p.add_argument("--threshold", type=float, default=0.4, help="confidence gate")
    p.add_argument("--interval", type=int, default=60, help="bidirectional refresh period")
    p.add_argument("--window", type=int, default=500, help="history entries kept")
    p.add_argument("--parity", choices=PARITIES, default="even")
    p.add_argument("--ablate", choices=sorted(ABLATION_PRESETS), default="none")
    p.add_argument("--render", default=None, help="directory for overlay images")
    p.add_argument("--trace", default=None, help="policy trace file, one line per frame")
    p.set_defaults(handler=cmd_track)

    p = sub.add_parser("eval", help="score a results file against annotations")
    p.add_argument("--results", required=True, help="file of track output lines")
    p.add_argument("--sequence", required=True, help="directory with frames + annotations.txt")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--corrupt", choices=diagnostics.PROBE_NAMES, default=None,
                   help="test hook: corrupt one probe's gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except _DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
