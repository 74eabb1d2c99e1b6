"""``ehdr`` command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
import sys
import tempfile

import numpy as np

from . import io
from .hdr import merge_hdr, mu_law

log = logging.getLogger("ehdr")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fstops(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _global_flags(p, defaults: bool) -> None:
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    p.add_argument("--config", type=Path, default=d(None), help="INI configuration file")
    p.add_argument("--verbose", "-v", action="store_true", default=d(False), help="log progress")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ehdr", description="Event-guided multi-bracket HDR toolkit.")
    _global_flags(p, defaults=True)
    # the flags are accepted after the subcommand too, without overriding
    # values given before it
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, defaults=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("simulate", parents=[common], help="synthesize events, brackets and ground truth")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--frames", type=Path, help="directory of PFM frames with manifest.txt")
    src.add_argument("--scene-seed", type=int, help="procedural scene seed (default: --seed)")
    s.add_argument("--size", type=int, default=64, help="procedural scene size")
    s.add_argument("--fstops", type=_fstops, default=(-3, 0, 3))
    s.add_argument("--frame-skip", type=int, default=2)
    thr = s.add_mutually_exclusive_group()
    thr.add_argument("--target-rate", type=float, help="events per frame interval to calibrate to")
    thr.add_argument("--threshold", type=float, help="fixed contrast threshold")
    s.add_argument("--noiseless", action="store_true")
    s.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("brackets", parents=[common], help="render LDR brackets from one HDR image")
    b.add_argument("--hdr", type=Path, required=True)
    b.add_argument("--fstops", type=_fstops, default=(-3, 0, 3))
    b.add_argument("--noiseless", action="store_true")
    b.add_argument("--out", type=Path, required=True)

    m = sub.add_parser("merge-hdr", parents=[common], help="triangle-weighted merge of brackets")
    m.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True, help="bracket PNGs with sidecars")
    m.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("tonemap", parents=[common], help="mu-law tonemap a PFM to PNG")
    t.add_argument("--in", dest="input", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--mu", type=float, default=5000.0)

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--data", type=Path, help="directory of sample directories")
    tr.add_argument("--synthetic", type=int, help="train on N procedural scenes instead of --data")
    tr.add_argument("--steps", type=int, help="override the number of steps")
    tr.add_argument("--no-events", action="store_true", help="train with zeroed voxel grids")
    tr.add_argument("--out", type=Path, required=True)

    inf = sub.add_parser("infer", parents=[common], help="run a checkpoint on samples")
    inf.add_argument("--checkpoint", type=Path, required=True)
    inf.add_argument("--data", type=Path, required=True)
    inf.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("evaluate", parents=[common], help="PSNR-mu / SSIM-mu report")
    ev.add_argument("--pred", type=Path, required=True, help="directory of predicted PFMs")
    ev.add_argument("--gt", type=Path, required=True, help="directory of ground-truth PFMs or sample dirs")
    ev.add_argument("--border", type=int, default=10)
    ev.add_argument("--out", type=Path, help="CSV report path")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")

    st = sub.add_parser("selftest", parents=[common], help="end-to-end smoke run")
    st.add_argument("--steps", type=int, default=50)
    st.add_argument("--out", type=Path)
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _section(args, name) -> dict:
    if args.config is None:
        return {}
    return io.load_config(args.config).get(name, {})


def _noise(args):
    from .simulator import NoiseModel

    return NoiseModel.noiseless() if args.noiseless else NoiseModel()


def cmd_simulate(args) -> int:
    from .data import SynthConfig, sample_from_scene, save_sample
    from .simulator import (BracketSpec, SimulatorConfig, calibrate_threshold, make_dynamic_scene,
                            simulate_events, synthesize_bracket)

    cfg = _section(args, "simulate")
    out = args.out
    if args.frames is None:
        seed = args.seed if args.scene_seed is None else args.scene_seed
        scene = make_dynamic_scene(seed, args.size, frame_skip=args.frame_skip)
        h, w = scene.gt.shape[:2]
        kw = {"fstops": args.fstops, "frame_skip": args.frame_skip, "noise": _noise(args), "size": args.size}
        if args.threshold is not None:
            kw["contrast_threshold"] = args.threshold
        elif args.target_rate is not None:
            kw["target_rate"] = args.target_rate / (h * w)
        elif "target_rate" in cfg:
            kw["target_rate"] = float(cfg["target_rate"]) / (h * w)
        sample = sample_from_scene(scene, SynthConfig(**kw), args.seed, name=f"scene{seed:04d}")
        save_sample(sample, out)
        log.info("wrote %d events and 3 brackets to %s", len(sample.events), out)
        return EXIT_OK

    entries = io.read_frame_manifest(args.frames / "manifest.txt")
    step = args.frame_skip + 1
    if len(args.fstops) != 3 or len(entries) < 2 * step + 1:
        raise UsageError(f"need 3 f-stops and at least {2 * step + 1} frames")
    frames = np.stack([io.read_pfm(args.frames / name) for _, _, name in entries])
    ts = np.array([t for _, t, _ in entries], dtype=np.int64)
    spec = BracketSpec(args.fstops)
    idx = (0, step, 2 * step)
    k = spec.scale_for(frames[idx[1]])
    norm = k * 2.0 ** min(spec.fstops)
    frames_n = frames * np.float32(norm)
    interval = float(np.median(np.diff(ts)))
    c = args.threshold or float(cfg.get("contrast_threshold", 0) or 0)
    if not c:
        target = args.target_rate or float(cfg.get("target_rate", 0.25 * frames.shape[1] * frames.shape[2]))
        c = calibrate_threshold(frames_n, ts, target, 0.02, 4.0, frame_interval=interval)
    events = simulate_events(frames_n, ts, SimulatorConfig(c, frame_skip=args.frame_skip))
    rng = np.random.default_rng(args.seed)
    out.mkdir(parents=True, exist_ok=True)
    for j, (i, f) in enumerate(zip(idx, spec.fstops)):
        ldr = synthesize_bracket(frames[i], f, spec, _noise(args), rng.integers(2 ** 31), scale=k, timestamp=int(ts[i]))
        io.write_ldr(out / f"bracket_{j}.png", ldr)
    io.write_events(out / "events.ehev", events)
    io.write_pfm(out / "gt.pfm", spec.normalize(frames[idx[1]], k))
    log.info("threshold %.4f, %d events", c, len(events))
    return EXIT_OK


def cmd_brackets(args) -> int:
    from .simulator import BracketSpec, synthesize_bracket

    hdr = io.read_pfm(args.hdr)
    spec = BracketSpec(args.fstops)
    rng = np.random.default_rng(args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    k = spec.scale_for(hdr)
    for j, f in enumerate(spec.fstops):
        io.write_ldr(args.out / f"bracket_{j}.png", synthesize_bracket(hdr, f, spec, _noise(args), rng.integers(2 ** 31), scale=k))
    return EXIT_OK


def cmd_merge(args) -> int:
    brackets = [io.read_ldr(p) for p in args.inputs]
    io.write_pfm(args.out, merge_hdr(brackets))
    return EXIT_OK


def cmd_tonemap(args) -> int:
    hdr = io.read_pfm(args.input)
    io.write_png(args.out, mu_law(np.clip(hdr, 0, None), args.mu))
    return EXIT_OK


def _synthetic_dataset(n, seed):
    from .data import synthetic_sample

    return [synthetic_sample(seed + i) for i in range(n)]


def cmd_train(args) -> int:
    from .data import load_dataset
    from .model import EhdrConfig, EhdrModel
    from .training import TrainConfig, train

    model_cfg = _section(args, "model")
    train_cfg = _section(args, "train")
    mcfg = EhdrConfig.from_dict({"seed": args.seed, **model_cfg})
    if args.no_events:
        mcfg.use_events = False
    tcfg = TrainConfig.from_dict({**TrainConfig.desk().to_dict(), "seed": args.seed, **train_cfg})
    if args.steps is not None:
        tcfg.steps = args.steps
    if args.synthetic:
        data = _synthetic_dataset(args.synthetic, args.seed)
    elif args.data is not None:
        data = load_dataset(args.data, mcfg.chunks_per_window, mcfg.voxel_bins)
    else:
        raise UsageError("train needs --data or --synthetic")
    if not data:
        raise ValueError(f"no samples found under {args.data}")
    res = train(data, EhdrModel(mcfg), tcfg, args.out)
    print(f"trained {res.steps} steps; loss {res.losses[0]:.5f} -> {res.losses[-1]:.5f}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import load_dataset
    from .metrics import predict

    model, _ = io.load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, model.cfg.chunks_per_window, model.cfg.voxel_bins)
    if not data:
        raise ValueError(f"no samples found under {args.data}")
    args.out.mkdir(parents=True, exist_ok=True)
    for s in data:
        io.write_pfm(args.out / f"{s.name}.pfm", predict(model, s))
    print(f"wrote {len(data)} predictions to {args.out}")
    return EXIT_OK


def _gt_for(gt_root: Path, name: str):
    for cand in (gt_root / f"{name}.pfm", gt_root / name / "gt.pfm"):
        if cand.exists():
            return io.read_pfm(cand)
    if gt_root.is_file():
        return io.read_pfm(gt_root)
    return None


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_pairs

    preds = sorted(args.pred.glob("*.pfm")) if args.pred.is_dir() else [args.pred]
    if not preds:
        raise ValueError(f"no PFM predictions in {args.pred}")
    pairs = [(p.stem, io.read_pfm(p), _gt_for(args.gt, p.stem)) for p in preds]
    report = evaluate_pairs(pairs, args.border)
    print(report.to_text())
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed, report=print)
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_DATA


def cmd_selftest(args) -> int:
    from .data import synthetic_sample
    from .metrics import evaluate, naive_merge, psnr_mu
    from .model import EhdrConfig, EhdrModel
    from .training import TrainConfig, train

    with tempfile.TemporaryDirectory() as tmp:
        out = args.out or Path(tmp)
        sample = synthetic_sample(args.seed)
        print(f"scene {sample.name}: {len(sample.events)} events")
        base = psnr_mu(naive_merge(sample), sample.gt_image)
        print(f"naive merge PSNR-mu {base:.2f} dB")
        res = train([sample], EhdrModel(EhdrConfig(seed=args.seed)), TrainConfig.desk(steps=args.steps, seed=args.seed), out)
        print(f"trained {res.steps} steps; loss {res.losses[0]:.5f} -> {res.losses[-1]:.5f}")
        report = evaluate(res.checkpoint, [sample])
        print(report.to_text())
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "brackets": cmd_brackets,
    "merge-hdr": cmd_merge,
    "tonemap": cmd_tonemap,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ehdr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.FormatError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"ehdr {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
