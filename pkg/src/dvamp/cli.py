"""Command line entry point: ``dvamp {recover,sweep,trace,selftest}``.

Grid flags of ``sweep`` and ``trace`` take comma-separated lists, e.g.
``--algorithm l1-amp,l1-vamp --cond 1,10,100``.  ``--config FILE`` reads an
INI file whose ``[dvamp]`` section uses the long flag names as keys
(``snr-db = 32``, ``no-auto-tune = yes``); flags on the command line win.
"""

import argparse
import configparser
import itertools
import sys

from dvamp import selftest
from dvamp.harness import ALGORITHMS, ExperimentConfig, recover, run_sweep, run_trace

_BOOL_FLAGS = ("noiseless", "no-auto-tune", "no-timing")


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _names(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _common(p):
    p.add_argument("--config", help="INI file with a [dvamp] section")
    p.add_argument("--algorithm", default="l1-vamp",
                   help=f"one or more of {', '.join(ALGORITHMS)}")
    p.add_argument("--ensemble", default="structured", help="gaussian or structured")
    p.add_argument("--ratio", default="0.1", help="sampling ratio M/N")
    p.add_argument("--cond", default="1", help="condition number of the operator")
    noise = p.add_mutually_exclusive_group()
    noise.add_argument("--snr-db", type=float, default=32.0)
    noise.add_argument("--noiseless", action="store_true")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="base seed; trial k uses seed + k")
    p.add_argument("--images", nargs="*", default=[],
                   help="PGM files or directories (default: bundled test images)")
    p.add_argument("--side", type=int, help="block-average images down to this side")
    p.add_argument("--denoiser", help="denoiser spec, e.g. ti-wavelet:rule=soft,multiplier=1.5")
    p.add_argument("--external-denoiser", help="command speaking the DNZ1 protocol")
    p.add_argument("--out", help="output path (CSV, or PGM for recover)")
    p.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    p.add_argument("--damping", type=float, help="VAMP damping in (0, 1]")
    p.add_argument("--no-auto-tune", action="store_true",
                   help="use the true noise precision instead of EM tuning")
    p.add_argument("--no-timing", action="store_true",
                   help="leave the runtime column empty (byte-reproducible CSV)")


def build_parser():
    parser = argparse.ArgumentParser(prog="dvamp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    rec = sub.add_parser("recover", help="recover one image")
    _common(rec)
    rec.add_argument("image", help="PGM image to measure and recover")
    _common(sub.add_parser("sweep", help="PSNR table over a parameter grid"))
    _common(sub.add_parser("trace", help="PSNR per iteration"))
    st = sub.add_parser("selftest", help="run the oracle checks")
    st.add_argument("--seed", type=int, default=0)
    return parser


def _file_defaults(path):
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise SystemExit(f"dvamp: cannot read config file {path}")
    if "dvamp" not in cp:
        raise SystemExit(f"dvamp: {path} has no [dvamp] section")
    sec = cp["dvamp"]
    out = {}
    for key in sec:
        dest = key.replace("-", "_")
        if key in _BOOL_FLAGS:
            out[dest] = sec.getboolean(key)
        elif key == "images":
            out[dest] = sec[key].split()
        else:
            out[dest] = sec[key]
    return out


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # file values become defaults, so explicit flags still override them
        sub = parser._subparsers._group_actions[0].choices[args.command]
        defaults = _file_defaults(args.config)
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            raise SystemExit(f"dvamp: unknown config keys {sorted(unknown)}")
        for action in sub._actions:
            if action.dest in defaults and isinstance(defaults[action.dest], str) and action.type:
                defaults[action.dest] = action.type(defaults[action.dest])
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        argv_list = sys.argv[1:] if argv is None else list(argv)
        if any(a == "--snr-db" or a.startswith("--snr-db=") for a in argv_list):
            args.noiseless = False
    return args


def configs_from_args(args):
    """One ExperimentConfig per grid cell (algorithm x ratio x cond)."""
    base = dict(
        ensemble=args.ensemble,
        snr_db=None if args.noiseless else float(args.snr_db),
        iters=args.iters, trials=args.trials, base_seed=args.seed,
        images=tuple(args.images or ()), side=args.side, denoiser=args.denoiser,
        external_denoiser=args.external_denoiser, damping=args.damping,
        auto_tune=not args.no_auto_tune, timing=not args.no_timing,
    )
    return [ExperimentConfig(algorithm=a, ratio=r, cond=c, **base)
            for a, r, c in itertools.product(_names(args.algorithm), _floats(args.ratio),
                                             _floats(args.cond))]


def main(argv=None):
    args = parse_args(argv)
    if args.command == "selftest":
        return 0 if selftest.run(args.seed) else 1
    try:
        configs = configs_from_args(args)
    except ValueError as exc:
        print(f"dvamp: {exc}", file=sys.stderr)
        return 2
    if args.command == "recover":
        res = recover(configs[0], args.image, out=args.out)
        state = "diverged" if res.diverged else "ok"
        print(f"{args.image}: {res.iterations} iterations, final PSNR "
              f"{res.final_psnr:.2f} dB ({state}), {res.runtime_s:.3f} s")
        return 0
    if args.command == "sweep":
        text = run_sweep(configs, out=args.out, workers=args.workers)
    else:
        first = configs[0]
        text = run_trace(first, ratios=_floats(args.ratio), algorithms=_names(args.algorithm),
                         out=args.out, workers=args.workers)
    if args.out is None:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
