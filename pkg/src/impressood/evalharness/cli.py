"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 missing artifact,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ..calibration import CalibrationError
from ..datagen import ConfigError, ImageBatch
from ..detector import c2ir_score
from ..inversion import FingerprintMismatch, InversionError
from ..smallnet import TrainingError
from . import pipeline
from .config import ABLATION_MODES, load_config, validate, with_seed

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("impressood")


def _csv_list(text: Optional[str]) -> Optional[List[str]]:
    return None if text is None else [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="run seed; eval/ablate default to eval.seeds")
    common.add_argument("--out", default="runs", help="output root (default: runs)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set inversion.iterations=100")
    common.add_argument("--build", action="store_true",
                        help="run missing upstream stages instead of failing")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="impressood", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="generate data and train the classifier")
    sub.add_parser("invert", parents=[common], help="synthesise class impressions")
    sub.add_parser("calibrate", parents=[common], help="build the calibration artifact")
    sp = sub.add_parser("score", parents=[common], help="dump per-sample scores")
    sp.add_argument("--ood", help="comma-separated OOD sets")
    sp.add_argument("--method", help="comma-separated methods")
    sp.add_argument("--input", help="score an image-batch directory instead")
    ep = sub.add_parser("eval", parents=[common], help="metrics for methods x OOD sets")
    ep.add_argument("--ood")
    ep.add_argument("--method")
    ap = sub.add_parser("ablate", parents=[common], help="weighting ablation")
    ap.add_argument("--ood")
    ap.add_argument("--mode", help=f"comma-separated subset of {','.join(ABLATION_MODES)}")
    sub.add_parser("compare-layers", parents=[common], help="per-layer activation means CSV")
    return p


def _print_cells(report: dict, label_key: str) -> None:
    for c in report["cells"]:
        print(f"{c[label_key]:20s} {c['ood_set']:16s} AUROC {c['auroc']:.4f}  "
              f"TNR@95 {c['tnr_at_tpr95']:.4f}  DetAcc {c['detection_acc']:.4f}  "
              f"AUPRin {c['aupr_in']:.4f}")


def _run(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    seeds = [args.seed] if args.seed is not None else None
    if seeds is None and args.verb not in ("eval", "ablate"):
        seeds = [cfg["seed"]]
    if seeds is None:
        seeds = cfg["eval"]["seeds"]

    if args.verb in ("eval", "ablate"):
        ood = _csv_list(args.ood)
        if args.verb == "eval":
            fn, key, extra = pipeline.run_benchmark, "method", {"methods": _csv_list(args.method)}
        else:
            fn, key, extra = pipeline.run_ablation, "mode", {"modes": _csv_list(args.mode)}
        probe = dict(cfg["eval"])
        probe.update({"ood_sets": ood or probe["ood_sets"]})
        if extra.get("methods"):
            probe["methods"] = extra["methods"]
        if extra.get("modes"):
            probe["ablation_modes"] = extra["modes"]
        validate({**cfg, "eval": probe})
        if len(seeds) == 1:
            report = fn(with_seed(cfg, seeds[0]), out, build=args.build, ood_sets=ood, **extra)
        else:
            report = pipeline.run_seeds(fn, cfg, out, seeds, key, build=args.build,
                                        ood_sets=ood, **extra)
        _print_cells(report, key)
        return EXIT_OK

    for seed in seeds:
        pipe = pipeline.Pipeline(with_seed(cfg, seed), out)
        if args.verb == "train":
            ckpt = pipe.train()
            print(f"{pipe.checkpoint_path}  test_accuracy={ckpt.metadata['test_accuracy']:.4f}")
        elif args.verb == "invert":
            syn = pipe.invert(build=args.build)
            print(f"{pipe.synthesis_path}  consistency={syn.consistency}")
        elif args.verb == "calibrate":
            pipe.calibrate(build=args.build)
            print(pipe.artifact_path)
        elif args.verb == "score":
            if args.input:
                batch = ImageBatch.load(args.input)
                res = c2ir_score(pipe.checkpoint(args.build), pipe.artifact(args.build), batch)
                for i, s in enumerate(res.score):
                    print(f"{i}\t{int(res.msp_class[i])}\t{s:.6g}")
            else:
                methods = _csv_list(args.method) or cfg["eval"]["methods"]
                ood = _csv_list(args.ood) or cfg["eval"]["ood_sets"]
                validate({**cfg, "eval": {**cfg["eval"], "methods": methods, "ood_sets": ood}})
                pipeline.score_sets(pipe, methods, ood, build=args.build)
                print(pipe.run_dir / "scores")
        elif args.verb == "compare-layers":
            rows = pipeline.emit_layer_comparison(
                pipe.checkpoint(args.build), pipe.artifact(args.build), pipe.eval_id(),
                pipe.ood(cfg["eval"]["ood_sets"][0]))
            path = pipe.run_dir / "layer_comparison.csv"
            pipeline.write_layer_comparison(rows, path)
            print(path)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FingerprintMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, InversionError, CalibrationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
