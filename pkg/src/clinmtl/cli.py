"""Command-line entry point.

Exit status: 0 success, 1 validation/parse error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import data as D
from . import features as F
from . import rlar as R
from . import train as T
from .model import ModelError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2

_VALIDATION_ERRORS = (D.DataError, F.FeatureError, R.RlarError, T.TrainError,
                      ModelError, ad.ShapeError, ad.NotScalarError,
                      FileNotFoundError, ValueError)
_NUMERICAL_ERRORS = (ad.NonFiniteError,)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# flat key=value config files

_CONFIG_KEYS = {
    "lambda_seg": float, "lambda_cls": float, "lambda_clin": float,
    "lambda_adv": float, "epsilon": float, "norm_guard": float,
    "hook_mode": str, "tasks": str,
    "lr": float, "weight_decay": float, "batch_size": int, "epochs": int,
    "steps_per_epoch": int, "seed": int, "image_size": int,
    "folds": int, "fold_index": int,
    "data_dir": str, "synthetic_n": int,
}
_RLAR_KEYS = {"lambda_adv", "epsilon", "norm_guard", "hook_mode", "tasks"}


def parse_config_file(path: str) -> dict:
    if not os.path.isfile(path):
        raise T.TrainError(f"config file not found: {path}")
    values: dict = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise T.TrainError(f"{path} line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_KEYS:
                raise T.TrainError(f"{path} line {lineno}: unknown key {key!r}")
            try:
                values[key] = _CONFIG_KEYS[key](value)
            except ValueError:
                raise T.TrainError(
                    f"{path} line {lineno}: bad value for {key}: {value!r}") from None
    return values


def config_from_values(values: dict) -> T.TrainConfig:
    rlar_kwargs = {}
    train_kwargs = {}
    for key, value in values.items():
        if key in ("data_dir", "synthetic_n"):
            continue
        if key in _RLAR_KEYS:
            rlar_kwargs[key] = tuple(value.split(",")) if key == "tasks" else value
        else:
            train_kwargs[key] = value
    return T.TrainConfig(rlar=R.RlarConfig(**rlar_kwargs), **train_kwargs)


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args) -> int:
    samples = D.gen_synthetic(args.n, args.size, args.seed)
    D.save_dataset(samples, args.out)
    counts = D.class_counts(samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    print("per-class counts:", " ".join(
        f"TR{i + 1}={c}" for i, c in enumerate(counts)))
    return EXIT_OK


def _cmd_features(args) -> int:
    image = D.read_pgm(args.image).astype(np.float64) / 255.0
    mask = D.read_pgm(args.mask) >= 128
    fv = F.extract_features(image, mask)
    if args.json:
        print(json.dumps(fv.as_dict(), indent=2, sort_keys=True))
    else:
        print(",".join(F.CANONICAL_FEATURES))
        print(",".join(repr(v) for v in fv.values.tolist()))
    return EXIT_OK


def _cmd_train(args) -> int:
    values = parse_config_file(args.config)
    cfg = config_from_values(values)
    if args.data:
        samples = D.load_dataset(args.data)
    elif "data_dir" in values:
        samples = D.load_dataset(values["data_dir"])
    elif "synthetic_n" in values:
        samples = D.gen_synthetic(values["synthetic_n"], cfg.image_size, cfg.seed)
    else:
        raise T.TrainError(
            "no dataset: pass --data, or set data_dir/synthetic_n in the config")
    run = T.train(cfg, samples)
    T.save_run(run, args.out)
    last = run.log_rows[-1]
    print(f"trained {cfg.epochs} epochs; best epoch {run.best_epoch}; "
          f"final val_dice={last['val_dice']:.4f} val_macro_f1={last['val_macro_f1']:.4f}")
    print(f"artifacts written to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    samples = D.load_dataset(args.data)
    report = T.evaluate(args.run, samples)
    out_path = os.path.join(args.run, "metrics.json")
    with open(out_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(json.dumps({k: v for k, v in report.items() if k != "per_class"},
                     indent=2, sort_keys=True))
    print(f"metrics written to {out_path}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    samples = D.load_dataset(args.data)
    rows = T.ablate_features(args.run, samples)
    out_path = os.path.join(args.run, "feature_ablation.csv")
    with open(out_path, "w") as f:
        f.write("feature,delta_precision,delta_recall,delta_f1\n")
        for row in rows:
            f.write(f"{row['feature']},{row['delta_precision']!r},"
                    f"{row['delta_recall']!r},{row['delta_f1']!r}\n")
    for row in rows:
        print(f"{row['feature']:28s} dP={row['delta_precision']:+.4f} "
              f"dR={row['delta_recall']:+.4f} dF1={row['delta_f1']:+.4f}")
    print(f"table written to {out_path}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    results, ok = run_gradcheck(seed=args.seed)
    for name, err, passed in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name:32s} max_rel_err={err:.3e}")
    if not ok:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_conflict_report(args) -> int:
    log_path = os.path.join(args.run, "train_log.csv")
    if not os.path.isfile(log_path):
        raise T.TrainError(f"missing training log: {log_path}")
    with open(log_path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    header = lines[0].split(",")
    pair_cols = [c for c in header if c.startswith("cos_")]
    idx = {c: header.index(c) for c in ["epoch"] + pair_cols}
    print("epoch  " + "  ".join(f"{c:>14s}" for c in pair_cols))
    for line in lines[1:]:
        parts = line.split(",")
        cells = "  ".join(f"{float(parts[idx[c]]):14.6f}" for c in pair_cols)
        print(f"{parts[idx['epoch']]:>5s}  {cells}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clinmtl",
                     description="Multitask nodule segmentation + risk grading")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("features", help="print the 13 canonical feature values")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a run on a dataset")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate-features",
                       help="leave-one-feature-out classifier ablation")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("conflict-report",
                       help="per-epoch pairwise |cos| summary from the training log")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_conflict_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_VALIDATION
    except _NUMERICAL_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except T.TrainError as e:
        msg = str(e)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_NUMERICAL if "non-finite" in msg else EXIT_VALIDATION
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
