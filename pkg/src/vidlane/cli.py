"""Command line: synth, train, infer, eval, ablate, check.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import CheckpointError, load as load_checkpoint, save as save_checkpoint
from .config import RunConfig
from .infer import ConfigMismatch, VideoRunner, evaluate, report_json
from .synthgen import DatasetError, SceneConfig, export, generate_dataset, load as load_sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("vidlane")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_dataset(path) -> list:
    """A sequence directory, or a directory of sequence directories (sorted by name)."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    if (root / "meta.json").exists():
        return [load_sequence(root)]
    subdirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
    if not subdirs:
        raise DatasetError(f"{root}: no sequence directories (each needs a meta.json)")
    return [load_sequence(p) for p in subdirs]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; flags below override it")
    g = p.add_argument_group("run config")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = {"int": int, "float": float}.get(str(f.type), str)
            g.add_argument(flag, dest=f.name, type=kind, default=None)


def _run_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        return cfg.override(**{f.name: getattr(args, f.name) for f in fields(RunConfig)})
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid run config: {e}") from None
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {e.filename}") from None


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    try:
        scene = {k: getattr(args, k) for k in ("occlusion_prob", "glare_prob", "noise", "dash_duty", "curvature",
                                                "ego_speed", "lane_change_prob") if getattr(args, k) is not None}
        base = SceneConfig(frames=args.frames, height=args.height, width=args.width,
                           min_lanes=args.min_lanes, max_lanes=args.max_lanes, **scene)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    for i, seq in enumerate(generate_dataset(args.count, base, args.seed)):
        export(seq, out / f"seq_{i:04d}")
    print(f"wrote {args.count} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _run_config(args)
    seqs = load_dataset(args.data)
    out = Path(args.out)
    net, tlog = train(seqs, cfg, out_dir=out)
    save_checkpoint(net, out / "final.ckpt", step=tlog.steps)
    print(f"trained {tlog.steps} steps; final epoch loss {tlog.epoch_losses[-1]:.6f}; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def _net_for(args):
    net, _ = load_checkpoint(args.checkpoint)
    overrides = {k: getattr(args, k) for k in ("mask_mode", "acc_length", "prob_threshold", "nms_iou")
                 if getattr(args, k, None) is not None}
    return net.reconfigured(**overrides) if overrides else net


def cmd_infer(args) -> int:
    from .overlay import render_overlay

    net = _net_for(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = []
    for si, seq in enumerate(load_dataset(args.data)):
        if (seq.config.height, seq.config.width) != (net.cfg.height, net.cfg.width):
            raise ConfigMismatch(f"sequence {si} image size {(seq.config.height, seq.config.width)} "
                                 f"!= model size {(net.cfg.height, net.cfg.width)}")
        runner = VideoRunner(net)
        frames = []
        for t in range(len(seq)):
            lanes = runner.feed(seq.frame(t))
            frames.append([{"score": l.score, "points": l.points.tolist()} for l in lanes])
            if args.overlay:
                render_overlay(seq.pixels[t], lanes, out / "overlay" / f"seq_{si:04d}" / f"{t:05d}.ppm")
        result.append({"sequence": si, "frames": frames})
    (out / "predictions.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / 'predictions.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = _net_for(args)
    text = report_json(evaluate(load_dataset(args.data), net))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import ablate

    cfg = _run_config(args)
    sweeps = [s.strip() for s in args.sweeps.split(",") if s.strip()]
    unknown = set(sweeps) - {"branches", "acc_length", "mask_cue"}
    if unknown:
        raise UsageError(f"unknown sweeps {sorted(unknown)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate.run(load_dataset(args.data), load_dataset(args.test), cfg, seeds, sweeps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(ablate.to_json(rows, cfg), encoding="utf-8")
    md = ablate.to_markdown(rows)
    (out / "ablation.md").write_text(md, encoding="utf-8")
    print(md)
    return EXIT_OK


def cmd_check(args) -> int:
    from .check import run_all

    rep = run_all(seed=args.seed)
    print("\n".join(rep.lines()))
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vidlane", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic sequences")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--height", type=int, default=192)
    s.add_argument("--width", type=int, default=320)
    s.add_argument("--min-lanes", type=int, default=2)
    s.add_argument("--max-lanes", type=int, default=4)
    for name in ("occlusion_prob", "glare_prob", "noise", "dash_duty", "curvature", "ego_speed", "lane_change_prob"):
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=float, default=None,
                       help=f"scene {name} (default {getattr(SceneConfig, name)})")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("infer", cmd_infer, "stream sequences through a checkpoint"),
                                 ("eval", cmd_eval, "F1 / mIoU report as JSON")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--out", required=(name == "infer"))
        e.add_argument("--mask-mode", dest="mask_mode", choices=("off", "second-frame", "all-frames"))
        e.add_argument("--acc-length", dest="acc_length")
        e.add_argument("--prob-threshold", dest="prob_threshold", type=float)
        e.add_argument("--nms-iou", dest="nms_iou", type=float)
        if name == "infer":
            e.add_argument("--overlay", action="store_true", help="also write PPM overlays")
        e.set_defaults(func=func)

    a = sub.add_parser("ablate", help="branch / accumulative-length / mask-cue sweeps")
    a.add_argument("--data", required=True, help="training sequences")
    a.add_argument("--test", required=True, help="held-out sequences")
    a.add_argument("--out", required=True)
    a.add_argument("--sweeps", default="branches,acc_length,mask_cue")
    a.add_argument("--seeds", default="0,1,2")
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("check", help="gradient and invariant self-checks")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    from .train import NumericFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"vidlane: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, ConfigMismatch, FileNotFoundError) as e:
        print(f"vidlane: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as e:
        print(f"vidlane: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
