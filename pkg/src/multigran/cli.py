"""Command line entry point: ``multigran <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input. The reason for a
non-zero exit is printed to stderr. ``MULTIGRAN_NUM_THREADS`` sets the
number of torch threads.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2
THREADS_ENV = "MULTIGRAN_NUM_THREADS"

log = logging.getLogger("multigran")


class InvalidInput(Exception):
    pass


@contextlib.contextmanager
def validating(what: str):
    """Turn errors raised while reading inputs into :class:`InvalidInput`."""
    try:
        yield
    except InvalidInput:
        raise
    except (ValueError, KeyError, TypeError, OSError) as exc:
        raise InvalidInput(f"{what}: {exc}") from exc


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("expected a JSON object")
    return data


def _dataset(path):
    from .corpus import read_dataset

    if not Path(path, "index.jsonl").is_file():
        raise InvalidInput(f"{path}: not a dataset directory (no index.jsonl)")
    with validating(f"dataset {path}"):
        return read_dataset(path)


# --- commands ---------------------------------------------------------------------------

def cmd_corpus_gen(args) -> None:
    from .corpus import CorpusConfig, generate_sample, write_dataset

    with validating(f"config {args.config}"):
        cfg = CorpusConfig.from_dict(_read_json(args.config)) if args.config else CorpusConfig()
    if args.count < 0:
        raise InvalidInput("--count must be >= 0")
    with validating("corpus config"):
        samples = [generate_sample(cfg, args.start + i) for i in range(args.count)]
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def _train_config(path, stage: str):
    from .trainer import TrainConfig

    with validating(f"config {path}"):
        data = _read_json(path)
        data.setdefault("stage", stage)
        cfg = TrainConfig.from_dict(data)
    if cfg.stage != stage:
        raise InvalidInput(f"config {path}: stage is {cfg.stage!r}, this command trains {stage!r}")
    return cfg


def cmd_train_det(args) -> None:
    from .trainer import train_det

    cfg = _train_config(args.config, "det")
    samples = _dataset(args.dataset)
    _, rows = train_det(cfg, samples, args.out)
    print(f"trained {cfg.steps} steps, final loss {rows[-1][2] if rows else 'n/a'}; checkpoint in {args.out}")


def cmd_train_seg(args) -> None:
    from .trainer import load_model, train_seg

    cfg = _train_config(args.config, "seg")
    samples = _dataset(args.dataset)
    with validating(f"checkpoint {args.det_ckpt}"):
        net = load_model(args.det_ckpt)
    _, rows = train_seg(cfg, samples, out_dir=args.out, net=net)
    print(f"trained {cfg.steps} steps, final loss {rows[-1][2] if rows else 'n/a'}; checkpoint in {args.out}")


def cmd_infer(args) -> None:
    from .corpus import write_records
    from .inference import predict
    from .trainer import load_model

    if not 0 <= args.score_thresh <= 1:
        raise InvalidInput("--score-thresh must lie in [0, 1]")
    with validating(f"checkpoint {args.ckpt}"):
        net = load_model(args.ckpt)
        if args.factor is not None:
            net.set_interaction(args.factor)
    samples = _dataset(args.dataset)
    preds = predict(net, samples, score_thresh=args.score_thresh, with_masks=args.with_masks)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_records(preds, args.out)
    print(f"wrote predictions for {len(preds)} images to {args.out}")


def _predictions(path):
    from .corpus import read_records

    with validating(f"predictions {path}"):
        return read_records(path)


def cmd_eval(args) -> None:
    from .corpus import read_dataset
    from .evaluation import emit_report, evaluate

    preds = _predictions(args.preds)
    if not Path(args.dataset, "index.jsonl").is_file():
        raise InvalidInput(f"{args.dataset}: not a dataset directory (no index.jsonl)")
    with validating(f"dataset {args.dataset}"):
        gts = read_dataset(args.dataset, load_images=False)
    report = evaluate(preds, gts, iou_thresh=args.iou_thresh, score_thresh=args.score_thresh)
    emit_report(report, args.out)
    sys.stdout.write(report.table())


def cmd_visualize(args) -> None:
    from .visualize import write_overlays

    preds = _predictions(args.preds)
    samples = _dataset(args.dataset)
    rasters = {rec.id: raster for rec, raster in samples}
    written = write_overlays(preds, args.dataset, args.out, rasters)
    print(f"wrote {len(written)} overlays to {args.out}")


# --- parser -------------------------------------------------------------------------------

def _factor(value: str):
    if value == "disabled" or value.startswith("bottom-up"):
        return value
    try:
        f = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid interaction factor {value!r}") from None
    if f not in (1, 2, 3):
        raise argparse.ArgumentTypeError("interaction factor must be 1, 2, 3 or 'disabled'")
    return f


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multigran", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus-gen", help="generate a synthetic dataset")
    c.add_argument("--config", help="corpus config JSON (defaults if omitted)")
    c.add_argument("--out", required=True)
    c.add_argument("--count", type=int, required=True)
    c.add_argument("--start", type=int, default=0, help="index of the first sample")
    c.set_defaults(func=cmd_corpus_gen)

    t = sub.add_parser("train-det", help="stage 1: train the detector")
    t.add_argument("--config", required=True, help="train config JSON")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_det)

    s = sub.add_parser("train-seg", help="stage 2: train the mask branch on a frozen detector")
    s.add_argument("--config", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--det-ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_seg)

    e = sub.add_parser("eval", help="score predictions against a dataset")
    e.add_argument("--preds", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True, help="report JSON; a .txt table is written next to it")
    e.add_argument("--iou-thresh", type=float, default=0.5)
    e.add_argument("--score-thresh", type=float, default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict all granularities (pseudo-labels)")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--dataset", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--with-masks", action="store_true")
    i.add_argument("--factor", type=_factor, default=None, help="override the interaction factor")
    i.add_argument("--score-thresh", type=float, default=0.4, help="keep detections scoring above this")
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("visualize", help="draw prediction overlays")
    v.add_argument("--preds", required=True)
    v.add_argument("--dataset", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        import torch

        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            print(f"error: {THREADS_ENV} must be a positive integer, got {threads!r}", file=sys.stderr)
            return EXIT_INVALID
    try:
        args.func(args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
