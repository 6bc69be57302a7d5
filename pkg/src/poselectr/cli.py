"""Command-line entry point: eval, selftest, train-toy, bench.

Exit codes: 0 success, 1 failed invariant or evaluation, 2 bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .errors import PoseLecTrError

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
FAULT_ENV = "POSELECTR_FAULT"


class InputError(Exception):
    """Malformed user input; the message carries the location."""


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _load_json(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None


def _floats(value, count, where):
    if not isinstance(value, list) or len(value) != count:
        raise InputError(f"{where}: expected a list of {count} numbers")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise InputError(f"{where}: expected a list of {count} numbers")
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{where}: values must be finite")
    return arr


def load_poses(path):
    """JSON array of {"q": [w,x,y,z]} or {"R": [9 row-major]} objects, each with "t"."""
    from .pose import Pose

    data = _load_json(path)
    if not isinstance(data, list):
        raise InputError(f"{path}: top level must be a JSON array of poses")
    poses = []
    for i, item in enumerate(data):
        where = f"{path}: pose {i}"
        if not isinstance(item, dict):
            raise InputError(f"{where}: expected an object")
        unknown = sorted(set(item) - {"q", "R", "t"})
        if unknown:
            raise InputError(f"{where}: unknown fields {', '.join(unknown)}")
        if ("q" in item) == ("R" in item):
            raise InputError(f"{where}: give exactly one of 'q' or 'R'")
        if "t" not in item:
            raise InputError(f"{where}: missing field 't'")
        t = _floats(item["t"], 3, f"{where} field 't'")
        try:
            if "q" in item:
                q = _floats(item["q"], 4, f"{where} field 'q'")
                poses.append(Pose(q, t))
            else:
                R = _floats(item["R"], 9, f"{where} field 'R'").reshape(3, 3)
                poses.append(Pose.from_matrix(R, t))
        except PoseLecTrError as exc:
            raise InputError(f"{where}: {exc}") from None
    return poses


def load_points(path):
    """Model points from CSV with header x,y,z or a JSON array of triples."""
    if path.lower().endswith(".json"):
        data = _load_json(path)
        if not isinstance(data, list) or not data:
            raise InputError(f"{path}: expected a nonempty JSON array of [x, y, z]")
        return np.stack([_floats(p, 3, f"{path}: point {i}") for i, p in enumerate(data)])
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    if not rows or [c.strip() for c in rows[0]] != ["x", "y", "z"]:
        raise InputError(f"{path}:1: header must be x,y,z")
    pts = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise InputError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        try:
            pt = [float(c) for c in row]
        except ValueError:
            bad = next(j for j, c in enumerate(row) if not _is_float(c))
            raise InputError(f"{path}:{lineno}: field {'xyz'[bad]} is not a number: {row[bad]!r}") from None
        if not np.all(np.isfinite(pt)):
            raise InputError(f"{path}:{lineno}: values must be finite")
        pts.append(pt)
    if not pts:
        raise InputError(f"{path}: no points")
    return np.asarray(pts, dtype=np.float64)


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def _emit(report, as_json, out_path=None, lines=()):
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    if as_json:
        print(json.dumps(report, sort_keys=True))
    else:
        for line in lines:
            print(line)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_eval(args):
    from .posemetrics import ModelPoints, accuracy, add, add_s

    pred = load_poses(args.pred)
    gt = load_poses(args.gt)
    if len(pred) != len(gt):
        raise InputError(f"pose count mismatch: {args.pred} has {len(pred)}, {args.gt} has {len(gt)}")
    pts = ModelPoints(load_points(args.points))
    metric = add if args.metric == "add" else add_s
    pairs = list(zip(pred, gt))
    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            dists = list(pool.map(lambda pg: metric(pg[0], pg[1], pts), pairs))
    else:
        dists = [metric(p, g, pts) for p, g in pairs]
    acc = accuracy(dists, pts.diameter, args.threshold_frac) if dists else 0.0
    report = {
        "metric": args.metric,
        "threshold_frac": args.threshold_frac,
        "diameter": pts.diameter,
        "distances": dists,
        "mean": float(np.mean(dists)) if dists else 0.0,
        "accuracy": acc,
    }
    lines = [f"{i}\t{d:.9g}" for i, d in enumerate(dists)]
    lines += [
        f"metric {args.metric}  diameter {pts.diameter:.9g}  threshold {args.threshold_frac:g}",
        f"mean {report['mean']:.9g}",
        f"accuracy {acc:.6f}",
    ]
    _emit(report, args.json, args.out, lines)
    return EXIT_OK


def cmd_selftest(args):
    from . import legendre, selftest

    fault = os.environ.get(FAULT_ENV, "")
    if fault == "legendre-sign":
        legendre._FAULT_FLIP_SIGN = True
    elif fault:
        raise InputError(f"{FAULT_ENV}: unknown fault {fault!r}")
    results = selftest.run(args.filter)
    if not results:
        raise InputError(f"no checks match {args.filter!r}")
    failed = [r for r in results if not r.passed]
    report = {
        "checks": [r.__dict__ for r in results],
        "passed": len(results) - len(failed),
        "failed": len(failed),
    }
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  measured      tolerance"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{r.name:<{width}}  {status}    {r.measured:<12.3e}  {r.tolerance:.1e}"
        lines.append(line + (f"  {r.error}" if r.error else ""))
    lines.append(f"{report['passed']} passed, {report['failed']} failed")
    _emit(report, args.json, None, lines)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_train_toy(args):
    from .encoderdecoder import ModelConfig
    from .training import make_synthetic_dataset, train_toy

    raw = _load_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise InputError(f"{args.config}: config must be a JSON object")
    try:
        cfg = ModelConfig.from_dict(raw)
    except (TypeError, PoseLecTrError) as exc:
        raise InputError(f"{args.config}: {exc}") from None
    data = make_synthetic_dataset(cfg.seed, args.samples, cfg)
    model, report = train_toy(cfg, data, epochs=args.epochs, lr=args.lr)
    if args.out:
        model.save(args.out)
    out = report.to_dict()
    out["flags"] = {
        "kernel_family": cfg.kernel_family,
        "attention_mapping": cfg.attention_mapping,
        "distill_enabled": cfg.distill_enabled,
    }
    lines = [
        f"variant {cfg.variant}",
        f"kernel_family {cfg.kernel_family}  attention {cfg.attention_mapping}  distill {cfg.distill_enabled}",
    ]
    for e, (lr, tr, va) in enumerate(zip(report.learning_rates, report.epoch_losses, report.val_losses)):
        lines.append(f"epoch {e}  lr {lr:.6g}  loss {tr:.12g}  val {va:.12g}")
    if report.stopped_early:
        lines.append(f"stopped early after {report.epochs_run} epochs")
    lines.append(f"accuracy {report.accuracy:.6f}  (ADD < {0.1 * report.diameter:.6g})")
    if args.out:
        lines.append(f"checkpoint {args.out}")
    _emit(out, args.json, None, lines)
    return EXIT_OK


def cmd_bench(args):
    from .bench import COLUMNS, MAX_NODES, run_bench

    if not 2 <= args.n <= MAX_NODES:
        raise InputError(f"--n must lie in [2, {MAX_NODES}], got {args.n}")
    if args.K < 1 or args.trials < 1:
        raise InputError("--K and --trials must be positive")
    rows = run_bench(args.n, args.K, args.trials, args.seed)
    if args.json:
        print(json.dumps([dict(zip(COLUMNS, r.as_tuple())) for r in rows]))
        return EXIT_OK
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in rows:
        writer.writerow([r.trial, r.n, r.K] + [f"{v:.6e}" for v in r.as_tuple()[3:]])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="poselectr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="ADD / ADD-S of predicted poses against ground truth")
    p.add_argument("pred", help="predicted poses (JSON)")
    p.add_argument("gt", help="ground-truth poses (JSON)")
    p.add_argument("points", help="model points (CSV x,y,z or JSON)")
    p.add_argument("--metric", choices=("add", "adds"), default="add")
    p.add_argument("--threshold-frac", type=float, default=0.1, help="fraction of the diameter (default 0.1)")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--threads", type=int, default=1, help="evaluate samples in parallel")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.add_argument("filter", nargs="?", help="substring or glob over check names")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("train-toy", help="train on the synthetic set")
    p.add_argument("config", nargs="?", help="JSON config with model field names (defaults if omitted)")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", help="time exact vs recursive graph filters (CSV)")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PoseLecTrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
