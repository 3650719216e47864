"""``sf`` command line: pingpong, spmv and selftest."""

from __future__ import annotations

import argparse
import contextlib
import sys

import numpy as np
import scipy.io
import scipy.sparse as sp

from .harness import BACKENDS, RankFailure, RunConfig, run_ranks


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _config(args, **fixed) -> RunConfig:
    return RunConfig.from_env(backend=args.backend, timeout=args.timeout, **fixed)


def cmd_pingpong(args) -> int:
    from .demos import pingpong

    sizes = pingpong.sizes_between(args.min_bytes, args.max_bytes)
    cfg = _config(args, nranks=2)
    rows = run_ranks(cfg, pingpong.run, sizes, args.iters, args.warmup, cfg.backend)[0]
    with _output(args.out) as fh:
        fh.write(pingpong.to_csv(rows))
    return 0


def cmd_spmv(args) -> int:
    from .demos import spmv

    cfg = _config(args, nranks=args.ranks)
    parts = run_ranks(cfg, spmv.run, args.matrix, args.transpose)
    y = np.concatenate([p[1] for p in parts])
    M = sp.csr_matrix(scipy.io.mmread(args.matrix))
    x = spmv.default_x(M.shape[0] if args.transpose else M.shape[1], y.dtype)
    ref = (M.T if args.transpose else M) @ x
    scale = np.linalg.norm(ref) or 1.0
    err = float(np.linalg.norm(y - ref) / scale)
    with _output(args.out) as fh:
        fh.write("index,value\n")
        for i, v in enumerate(y.tolist()):
            fh.write(f"{i},{v!r}\n")
    print(f"{'transpose ' if args.transpose else ''}spmv on {cfg.nranks} ranks: relative error vs sequential {err:.3e}", file=sys.stderr)
    return 0 if err <= 1e-12 else 1


def cmd_selftest(args) -> int:
    from . import selftest

    cfg = _config(args, nranks=args.ranks, seed=args.seed)
    bad = 0
    with _output(args.out) as fh:
        for name, nranks, seconds, failures in selftest.run_suites(cfg, args.seed, args.trials, args.suite):
            status = "PASS" if not failures else "FAIL"
            fh.write(f"{status} {name} ranks={nranks} trials={args.trials} {seconds:.2f}s\n")
            for msg in failures[:10]:
                fh.write(f"  {msg}\n")
            bad += bool(failures)
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sf", description="Star-forest communication demos and self tests.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--backend", choices=BACKENDS, default=None, help="transport (default: $SF_TRANSPORT or threads)")
    common.add_argument("--timeout", type=float, default=None, help="per-run deadlock timeout in seconds")
    common.add_argument("--out", default=None, help="write CSV here instead of stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pingpong", parents=[common], help="two-rank latency sweep")
    p.add_argument("--min-bytes", type=int, default=1024)
    p.add_argument("--max-bytes", type=int, default=4 << 20)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_pingpong)

    p = sub.add_parser("spmv", parents=[common], help="distributed sparse matrix-vector product")
    p.add_argument("--matrix", required=True, help="Matrix Market file")
    p.add_argument("--ranks", type=int, default=None)
    p.add_argument("--transpose", action="store_true")
    p.set_defaults(func=cmd_spmv)

    p = sub.add_parser("selftest", parents=[common], help="oracle suites on random graphs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--ranks", type=int, default=None)
    p.add_argument("--suite", action="append", choices=["oracle", "duality", "discovery", "sample"], default=None)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RankFailure as exc:
        print(exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
