"""Command-line entry point: data generation, both training stages, evaluation and inference."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import ConfigError, load_config
from .data.io import DataError, read_pgm, write_dsp
from .data.synth import generate_dataset, load_split
from .models.checkpoint import CheckpointError
from .models.cmg import ATTACK, REAL
from .training import evaluate, load_model, predict, run_stage1, run_stage2

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("stereofas")


def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _fpr_list(text: str) -> List[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated rates, got {text!r}") from None
    if not vals or any(not 0 < v < 1 for v in vals):
        raise argparse.ArgumentTypeError("false-positive targets must lie in (0, 1)")
    return vals


def cmd_gen_data(args) -> int:
    h, w = args.size
    try:
        manifest = generate_dataset(args.out, args.n_train, args.n_test, h, w, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(manifest)
    return EXIT_OK


def cmd_train_disparity(args) -> int:
    cfg = load_config(args.config)
    print(run_stage1(cfg))
    return EXIT_OK


def cmd_train_cls(args) -> int:
    cfg = load_config(args.config)
    print(run_stage2(cfg, args.init))
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _, _ = load_model(args.ckpt, expect_stage=2)
    data = load_split(args.manifest, "test")
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    rep = evaluate(net, data, args.fpr, out_dir=out, dump_maps=Path(args.dump_maps) if args.dump_maps else None)
    print(json.dumps(rep, indent=2))
    return EXIT_OK


def _read_view(path: str) -> np.ndarray:
    if not Path(path).is_file():
        raise DataError(f"missing image {path}")
    return read_pgm(path)


def cmd_infer(args) -> int:
    net, _, _ = load_model(args.ckpt, expect_stage=2)
    left, right = _read_view(args.left), _read_view(args.right)
    if left.shape != right.shape:
        raise DataError(f"left {left.shape} and right {right.shape} differ in size")
    try:
        pred = predict(net, np.stack([left, right])[None])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dsp(out / "disparity.dsp", pred.refined[0])
    write_dsp(out / "disparity_px.dsp", pred.pixels[0])
    write_dsp(out / "conf_real.dsp", pred.confidence[0, REAL])
    write_dsp(out / "conf_attack.dsp", pred.confidence[0, ATTACK])
    result = {"score": float(pred.scores[0]), "label": int(pred.scores[0] >= 0.5)}
    (out / "score.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereofas", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic stereo dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, required=True)
    g.add_argument("--n-test", type=int, required=True)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t1 = sub.add_parser("train-disparity", help="stage 1: disparity network")
    t1.add_argument("--config", required=True)
    t1.set_defaults(func=cmd_train_disparity)

    t2 = sub.add_parser("train-cls", help="stage 2: confidence map generator")
    t2.add_argument("--config", required=True)
    t2.add_argument("--init", required=True, help="stage-1 checkpoint")
    t2.set_defaults(func=cmd_train_cls)

    e = sub.add_parser("eval", help="metrics on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--fpr", type=_fpr_list, default=[0.01, 0.005, 0.001])
    e.add_argument("--dump-maps")
    e.add_argument("--out", help="report directory (default: <ckpt dir>/eval)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="score one stereo pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--left", required=True)
    i.add_argument("--right", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
