"""Command-line entry point: synth, train, detect, eval, calibrate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import tensor_nn as tn
from .cascade import ModelError, detect, detections_json, format_detections, load_model, save_model
from .config import AppConfig, ConfigError, load_config, save_config
from .evaluation import evaluate, pr_curve, read_annotations, read_detections, roc_curve, summary_json, \
    write_curve_csv
from .imageio import ImageFormatError, read_image, write_scoremap_pgm
from .pipeline import StageCache, calibrate_omega, calibrate_stage, train_stage1, train_verifier
from .pyramid import DegenerateImage, EmptyPyramid
from .synth import quantize, read_dataset, synth_dataset, write_dataset
from .trainer import SamplingError, TrainingDiverged

log = logging.getLogger("fcncascade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (OSError, ValueError, ImageFormatError, ConfigError, ModelError, tn.CorruptWeights,
               DegenerateImage, EmptyPyramid, SamplingError, TrainingDiverged)
IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _path(value, fallback, what):
    p = value or fallback
    if not p:
        raise UsageError(f"no {what} given")
    return Path(p)


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, cfg: AppConfig) -> int:
    annotated, backgrounds = synth_dataset(args.seed, args.count)
    quantize(annotated)
    quantize(backgrounds)
    write_dataset(_path(args.out, cfg.paths.data, "output directory"), annotated, backgrounds)
    return EXIT_OK


def _write_history(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "train_acc"])
        for epoch, loss, acc in rows:
            writer.writerow([epoch, repr(float(loss)), repr(float(acc))])


def cmd_train(args, cfg: AppConfig) -> int:
    data = _path(args.data, cfg.paths.data, "--data directory")
    out = _path(args.out_model, cfg.paths.model, "--out-model path")
    annotated, backgrounds = read_dataset(data)
    histories: dict = {}
    if args.stage == 1:
        model = train_stage1(annotated, backgrounds, cfg.train, histories)
        model.pyramid_cfg = cfg.pyramid
        model.verify_cfg = cfg.verify
        model.proposal_cfg = dataclasses.replace(cfg.proposal, threshold=model.proposal_cfg.threshold)
    else:
        model = load_model(_path(args.model, out, "--model"), require_complete=False)
        model = train_verifier(model, args.stage, annotated, backgrounds, cfg.train, histories)
    save_model(model, out)
    log_path = Path(args.log) if args.log else out.with_name(f"{out.stem}.stage{args.stage}.log.csv")
    if args.stage == 1:
        rows = histories["stage1"]
    else:
        # plain pre-training epochs first, then the mined phase continues the count
        plain, mined = histories[f"stage{args.stage}_plain"], histories[f"stage{args.stage}_mined"]
        rows = plain + [(len(plain) + e, loss, acc) for e, loss, acc in mined]
    _write_history(log_path, rows)
    print(f"stage {args.stage} written to {out}; log {log_path}", file=sys.stderr)
    return EXIT_OK


def _images(args):
    if bool(args.image) == bool(args.dir):
        raise UsageError("give exactly one of --image or --dir")
    if args.image:
        return [Path(args.image)]
    files = sorted(p for p in Path(args.dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no PPM/PGM images in {args.dir}")
    return files


def cmd_detect(args, cfg: AppConfig) -> int:
    model = load_model(_path(args.model, cfg.paths.model, "--model"))
    if args.config:
        model = cfg.apply_to(model)
    out = _path(args.out, cfg.paths.out, "--out path")
    dump = Path(args.dump_scoremap) if args.dump_scoremap else None
    if dump:
        dump.mkdir(parents=True, exist_ok=True)
    lines, docs = [], []
    for path in _images(args):
        result = detect(read_image(path), model, return_info=True)
        lines.append(format_detections(path.stem, result.detections))
        docs.append(detections_json(path.stem, result))
        if dump:
            write_scoremap_pgm(result.score_map.normalized(), dump / f"{path.stem}.scoremap.pgm")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text("".join(lines))
    tmp.replace(out)
    if args.json:
        Path(args.json).write_text("".join(json.dumps(d) + "\n" for d in docs))
    return EXIT_OK


def cmd_eval(args, cfg: AppConfig) -> int:
    dets = read_detections(args.dets)
    anns = read_annotations(args.ann)
    records, n_gt = evaluate(dets, anns, args.iou, args.fddb_adapt)
    if n_gt < 1:
        raise ValueError("annotations contain no ground-truth boxes")
    pr = pr_curve(records, n_gt)
    roc = roc_curve(records, len(anns), n_gt)
    prefix = args.out_prefix
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_curve_csv(pr, f"{prefix}_pr.csv")
    write_curve_csv(roc, f"{prefix}_roc.csv")
    summary = summary_json(pr, roc, len(anns), n_gt)
    Path(f"{prefix}_summary.json").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_calibrate(args, cfg: AppConfig) -> int:
    if not 0 < args.target_recall <= 1:
        raise UsageError("--target-recall must lie in (0, 1]")
    model = load_model(_path(args.model, cfg.paths.model, "--model"))
    annotated, _ = read_dataset(_path(args.data, cfg.paths.data, "--data directory"))
    if not annotated:
        raise ValueError("calibration data holds no annotated faces")
    cache = StageCache()
    model.proposal_cfg = dataclasses.replace(
        model.proposal_cfg, threshold=calibrate_omega(model, annotated, args.target_recall, cache=cache))
    th = list(model.stage_thresholds)
    for stage in (2, 3):
        th[stage - 2] = calibrate_stage(model, stage, annotated, args.target_recall, cache=cache)
        model.stage_thresholds = tuple(th)
    new_cfg = AppConfig.from_model(model, cfg)
    out = Path(args.out_config or args.config or "calibrated.json")
    save_config(new_cfg, out)
    print(json.dumps({"omega_threshold": model.proposal_cfg.threshold,
                      "stage_thresholds": list(model.stage_thresholds), "config": str(out)}))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    p = _Parser(prog="fcncascade", description="FCN cascade face detector")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=100, help="images with faces; backgrounds add a quarter")
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train one cascade stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--data")
    t.add_argument("--out-model")
    t.add_argument("--model", help="model to extend for stages 2 and 3 (defaults to --out-model)")
    t.add_argument("--log", help="training log CSV (epoch,loss,train_acc)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", parents=[common], help="run the detector")
    d.add_argument("--model")
    d.add_argument("--image")
    d.add_argument("--dir")
    d.add_argument("--out")
    d.add_argument("--json", help="also write per-image JSON lines with stage traces")
    d.add_argument("--dump-scoremap", metavar="DIR", help="write stage-1 score maps as 16-bit PGM")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", parents=[common], help="score detections against annotations")
    e.add_argument("--dets", required=True)
    e.add_argument("--ann", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--fddb-adapt", action="store_true", help="stretch boxes for ellipse ground truth")
    e.add_argument("--out-prefix", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate", parents=[common], help="recommend thresholds for a target recall")
    c.add_argument("--model")
    c.add_argument("--data")
    c.add_argument("--target-recall", type=float, default=0.99)
    c.add_argument("--out-config", help="where to write the config (defaults to --config)")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"fcncascade: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"fcncascade: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"fcncascade: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
