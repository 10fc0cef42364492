"""Command line entry point: train, sweep, compare, cv-report, check."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import analysis, runner


def _threads():
    n = os.environ.get("IES_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def cmd_train(args):
    cfg = runner.RunConfig.from_json(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seeds=[args.seed])
    out = args.out or cfg.out_dir
    if not out:
        sys.exit("no output directory: pass --out or set out_dir in the config")
    for res in runner.run_all(cfg, out):
        s = res.summary
        print(f"seed {s['seed']}: test acc {s['final_test_accuracy']:.4f}, "
              f"mini-batch saved {s['minibatch_saved']:.1%}, halt: {s['halt_reason'] or '-'}")
    return 0


def cmd_sweep(args):
    cfg = runner.RunConfig.from_json(args.config)
    out = Path(args.out or cfg.out_dir or "sweep")
    scales = [float(s) for s in args.delta_scales.split(",")]
    dirs = runner.sweep(cfg, scales, out)
    rows = runner.compare(dirs, reference=scales.index(1.0) if 1.0 in scales else 0)
    print(runner.write_table(rows, runner.COMPARE_COLUMNS, out / "sweep.csv"))
    return 0


def cmd_compare(args):
    rows = runner.compare(args.run_dirs)
    print(runner.write_table(rows, runner.COMPARE_COLUMNS, args.csv))
    return 0


def cmd_cv_report(args):
    rows = runner.cv_report(args.run_dir)
    print(runner.write_table(rows, ["seed_dir", "cv0", "cv1", "cv2", "cv3"], args.csv))
    return 0


def cmd_check(args):
    reports = []
    ies_dirs = runner.seed_dirs(args.ies)
    base_dirs = runner.seed_dirs(args.baseline) if args.baseline else []
    for d in ies_dirs:
        reports.append(analysis.check_cv_ordering(d))
        if (d / "selection.csv").exists():
            reports.append(analysis.check_mastered_persistence(d))
    for a, b in zip(ies_dirs, base_dirs):
        reports.append(analysis.check_grad_norm_advantage(a, b))
    for r in reports:
        print(r.line())
    ok = analysis.write_claims(reports, args.out)
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="ieslab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="rerun a config over delta multipliers")
    s.add_argument("--config", required=True)
    s.add_argument("--delta-scales", default="0.01,0.1,1,10,100")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="aggregate completed runs into one table")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--csv")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("cv-report", help="final-third CV per difference order")
    v.add_argument("run_dir")
    v.add_argument("--csv")
    v.set_defaults(func=cmd_cv_report)

    k = sub.add_parser("check", help="evaluate claims on logged runs, write claims.json")
    k.add_argument("--ies", required=True)
    k.add_argument("--baseline")
    k.add_argument("--out", default="claims.json")
    k.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    limits = _threads()
    try:
        return args.func(args)
    finally:
        if limits is not None:
            limits.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
