"""Command-line entry point: gen-synth, train, eval, analyze, bench, predict.

Exit codes: 0 success, 1 usage error, 2 data or contract error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import model_from_checkpoint
from .complexity import bench_fps, model_report
from .data import DataError, image_to_chw, load_dataset, read_image, write_image
from .evaluation import evaluate, predict_pairs, write_pr_csv, write_pr_svg
from .kernels import BACKEND
from .layers import NumericError, StateError
from .model import CarNet, CarNetConfig, NonOliveWarning, check_input_size, init_params
from .synth import SynthParams, gen_synthetic
from .tensor import Rng
from .training import TrainConfig, UsageError, config_dict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("carnet")


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(f"{self.prog}: {message}")


def parse_size(text: str) -> tuple[int, int]:
    """'HxW' -> (H, W)."""
    try:
        h, w = text.lower().split("x")
        h, w = int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carnet", description="CarNet crack segmentation: data, training, evaluation, analysis.")
    p.add_argument("--version", action="version", version=f"carnet {__version__} ({BACKEND} kernels)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="generate a synthetic crack dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--count", required=True, type=int)
    g.add_argument("--size", default="192x192", type=parse_size, help="HxW (default 192x192)")
    g.add_argument("--seed", default=7, type=int)
    g.add_argument("--train-frac", default=0.8, type=float)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    t = sub.add_parser("train", help="train CarNet on a dataset")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--config", type=Path, help="architecture config (key = value lines)")
    t.add_argument("--epochs", required=True, type=int)
    t.add_argument("--seed", default=7, type=int)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--lr", default=3e-4, type=float)
    t.add_argument("--batch-size", default=2, type=int)
    t.add_argument("--checkpoint-every", default=5, type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--input-size", type=parse_size, help="override the config input size (HxW)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path, help="JSON report path")
    e.add_argument("--split", default="test")
    e.add_argument("--pr-csv", type=Path)
    e.add_argument("--pr-svg", type=Path)

    a = sub.add_parser("analyze", help="parameter and FLOP counts")
    a.add_argument("--config", type=Path)
    a.add_argument("--input-size", default="320x480", type=parse_size, help="HxW (default 320x480)")
    a.add_argument("--csv", action="store_true", help="emit CSV instead of a text table")

    b = sub.add_parser("bench", help="single-image inference throughput")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--config", type=Path)
    b.add_argument("--iters", default=10, type=int)
    b.add_argument("--warmup", default=2, type=int)
    b.add_argument("--input-size", type=parse_size)

    pr = sub.add_parser("predict", help="write an 8-bit probability map for one image")
    pr.add_argument("--checkpoint", required=True, type=Path)
    pr.add_argument("--image", required=True, type=Path)
    pr.add_argument("--out", required=True, type=Path)
    return p


def _manifest(path: Path, command: str, args, extra: dict):
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    doc = {"command": command, "version": __version__, "kernels": BACKEND,
           "python": platform.python_version(), "numpy": np.__version__, "flags": flags}
    doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(path) -> CarNetConfig:
    if path is None:
        return CarNetConfig()
    try:
        return CarNetConfig.load(path)
    except FileNotFoundError:
        raise DataError(f"{path}: config file not found") from None


# -- commands --------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    if args.count < 1:
        raise CliUsageError(f"--count must be >= 1, got {args.count}")
    params = SynthParams(count=args.count, size=args.size, seed=args.seed, train_frac=args.train_frac)
    try:
        params.validate()
    except ValueError as e:
        raise CliUsageError(str(e)) from None
    ds = gen_synthetic(params, args.out, force=args.force)
    print(f"wrote {len(ds)} samples to {args.out}: {len(ds.ids('train'))} train / {len(ds.ids('test'))} test")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.epochs < 1:
        raise CliUsageError(f"--epochs must be >= 1, got {args.epochs}")
    cfg = _load_config(args.config)
    ds = load_dataset(args.data)
    train_s, test_s = ds.samples("train"), ds.samples("test")
    if not train_s:
        raise DataError(f"{args.data}: training split is empty")
    if args.input_size is not None:
        cfg.input_size = args.input_size
    elif args.config is None:
        cfg.input_size = train_s[0].size
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       checkpoint_every=args.checkpoint_every, augmentation=not args.no_augment)
    try:
        tcfg.validate()
    except ValueError as e:
        raise CliUsageError(str(e)) from None
    model = CarNet(cfg)
    init_params(model, Rng(args.seed))  # always a fresh initialization; there is no resume
    args.out.mkdir(parents=True, exist_ok=True)
    _manifest(args.out / "run_manifest.json", "train", args,
              {"train_config": config_dict(tcfg), "model_config": cfg.to_text(),
               "train_ids": len(train_s), "test_ids": len(test_s)})
    res = train(model, train_s, test_s, tcfg, args.out)
    last = [h for h in res.history if h.ods is not None]
    tail = f", ods {last[-1].ods:.4f} ois {last[-1].ois:.4f}" if last else ""
    print(f"trained {args.epochs} epochs in {res.seconds:.1f}s: final loss {res.history[-1].loss:.5f}{tail}")
    print(f"final checkpoint: {res.final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint.exists():
        raise DataError(f"{args.checkpoint}: checkpoint not found")
    model, _ = model_from_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, splits=(args.split,))
    samples = ds.samples(args.split)
    if not samples:
        raise DataError(f"{args.data}: split {args.split!r} is empty")
    rep = evaluate(predict_pairs(model, samples))
    args.report.write_text(rep.to_json(), encoding="utf-8")
    rows = pr_curve_rows(rep)
    if args.pr_csv:
        write_pr_csv(args.pr_csv, rows)
    if args.pr_svg:
        write_pr_svg(args.pr_svg, rows, title=f"ODS {rep.ods:.4f}")
    print(f"ods {rep.ods:.4f} (t={rep.ods_threshold:.2f})  ois {rep.ois:.4f}  on {len(samples)} images")
    return EXIT_OK


def pr_curve_rows(rep):
    return list(zip(rep.thresholds.tolist(), rep.precision.tolist(), rep.recall.tolist(), rep.f1.tolist()))


def cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    check_input_size(args.input_size)
    cfg.input_size = args.input_size
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonOliveWarning)
        model = CarNet(cfg)
    rep = model_report(model, args.input_size)
    sys.stdout.write(rep.to_csv() if args.csv else rep.to_text())
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise CliUsageError(f"--iters must be >= 1, got {args.iters}")
    if args.checkpoint is not None:
        if not args.checkpoint.exists():
            raise DataError(f"{args.checkpoint}: checkpoint not found")
        model, _ = model_from_checkpoint(args.checkpoint)
    else:
        model = CarNet(_load_config(args.config))
        init_params(model, Rng(0))
    size = args.input_size or model.cfg.input_size
    check_input_size(size)
    res = bench_fps(model, size, warmup=args.warmup, iters=args.iters)
    print(f"{size[0]}x{size[1]}: {res.mean:.2f} FPS (std {res.std:.2f}) over {args.iters} iters, {BACKEND} kernels")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.checkpoint.exists():
        raise DataError(f"{args.checkpoint}: checkpoint not found")
    model, _ = model_from_checkpoint(args.checkpoint)
    prob = predict_image(model, image_to_chw(read_image(args.image)))
    write_image(args.out, prob)
    print(f"wrote {args.out} ({prob.shape[0]}x{prob.shape[1]})")
    return EXIT_OK


def predict_image(model, img: np.ndarray) -> np.ndarray:
    """Probability map (H, W) for a (3, H, W) image; edge-pads to a multiple of 16 and crops back."""
    _, h, w = img.shape
    ph, pw = (-h) % 16, (-w) % 16
    x = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else img
    if x.shape[1] < 16 or x.shape[2] < 16:
        x = np.pad(x, ((0, 0), (0, max(0, 16 - x.shape[1])), (0, max(0, 16 - x.shape[2]))), mode="edge")
    model.eval()
    return model.forward(x[None])[0, 0, :h, :w]


COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "eval": cmd_eval,
            "analyze": cmd_analyze, "bench": cmd_bench, "predict": cmd_predict}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except CliUsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        # data, config, checkpoint and shape errors from the lower modules
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StateError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
