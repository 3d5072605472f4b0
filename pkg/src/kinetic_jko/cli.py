"""Command line entry point.

    kinetic-jko run --preset example1_1d --set dt=0.05 --out runs/ex1
    kinetic-jko sweep --preset example1_1d --dts 0.2,0.1,0.05 --seeds 0,1,2 --out runs/sweep
    kinetic-jko list

``KINETIC_JKO_THREADS`` caps the BLAS/OpenMP thread count; it must be set
before numpy is imported, which is why the heavy imports live in ``main``.
"""
from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_env():
    n = os.environ.get("KINETIC_JKO_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


def _floats(s):
    return [float(t) for t in s.split(",") if t.strip()]


def _ints(s):
    return [int(t) for t in s.split(",") if t.strip()]


def build_parser():
    ap = argparse.ArgumentParser(prog="kinetic-jko", description="Particle kinetic JKO solver")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one preset")
    r.add_argument("--preset", help="preset id (see `list`)")
    r.add_argument("--manifest", help="re-run from a manifest.json")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--method", default="kinetic_jko", choices=["kinetic_jko", "split_jko", "score_baseline"])
    r.add_argument("--snapshot-every", type=int, default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--quiet", action="store_true")
    s = sub.add_parser("sweep", help="time-step convergence sweep")
    s.add_argument("--preset", required=True)
    s.add_argument("--dts", required=True, type=_floats)
    s.add_argument("--seeds", default="0", type=_ints)
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--method", default="kinetic_jko", choices=["kinetic_jko", "split_jko", "score_baseline"])
    s.add_argument("--out", required=True)
    sub.add_parser("list", help="list presets")
    return ap


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    from .presets import list_presets
    from .runner import RunConfig, config_from_manifest, convergence_sweep, parse_overrides, run

    try:
        if args.cmd == "list":
            print("\n".join(list_presets()))
            return 0
        if args.cmd == "run":
            if args.manifest:
                cfg = config_from_manifest(args.manifest)
                cfg.output_dir = args.out
            elif args.preset:
                cfg = RunConfig(args.preset, parse_overrides(args.overrides), args.out,
                                args.snapshot_every, args.method)
            else:
                print("error: --preset or --manifest is required", file=sys.stderr)
                return 2

            def show(rec):
                if not args.quiet:
                    vals = {k: v for k, v in vars(rec).items() if v is not None and k != "step"}
                    print(f"step {rec.step}: " + " ".join(f"{k}={v:.6g}" for k, v in vals.items()),
                          flush=True)

            run(cfg, progress=show)
            return 0
        table = convergence_sweep(args.preset, args.dts, args.seeds, parse_overrides(args.overrides),
                                  args.method, args.out,
                                  progress=lambda dt, seed, e: print(f"dt={dt} seed={seed} err={e:.6g}",
                                                                     flush=True))
        for dt, m, se, n in table.rows:
            print(f"{dt:g}\t{m:.6g}\t{se:.3g}\t{n}")
        if table.slope is not None:
            print(f"slope {table.slope:.4f}")
        return 0
    except (KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
