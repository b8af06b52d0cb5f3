"""Command line entry point: ``featproj-dp``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import accountant, data, experiments, plotting
from .numerics import RngStream


def _cmd_data_gen(args) -> int:
    samples = data.generate(RngStream(args.seed, 0), args.n, args.height, args.width,
                            args.joints, args.noise)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    binary, sidecar = data.save(samples, out)
    print(f"wrote {binary} and {sidecar} ({args.n} samples)")
    return 0


def _cmd_account(args) -> int:
    orders = accountant.DEFAULT_ORDERS
    try:
        sigma = args.sigma if args.sigma is not None else accountant.calibrate_sigma(
            args.epsilon, args.delta, args.q, args.steps, orders)
    except accountant.CalibrationInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    curve = accountant.rdp_curve(args.q, sigma, orders)
    eps, best = accountant.compose_and_convert_with_order(curve, args.steps, args.delta)
    print(f"sigma = {sigma:.6f}   q = {args.q:g}   steps = {args.steps}   delta = {args.delta:g}")
    print(f"{'order':>6}  {'rdp/step':>14}  {'rdp total':>14}")
    for a, v in zip(curve.orders, curve.values):
        if a <= 8 or a == best or a in (16, 32, 64, 128, 256):
            mark = "  <- min" if a == best else ""
            print(f"{a:>6}  {v:14.6e}  {v * args.steps:14.6e}{mark}")
    print(f"epsilon = {eps:.6f} (order {best})")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["epsilon_target", "delta", "q", "steps", "sigma", "epsilon_accounted", "best_order"])
    w.writerow([format(args.epsilon, ".17g") if args.epsilon is not None else "",
                format(args.delta, ".17g"), format(args.q, ".17g"), args.steps,
                format(sigma, ".17g"), format(eps, ".17g"), best])
    return 0


def _parse_filters(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise SystemExit(f"--filter expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _cmd_run(args) -> int:
    cfg = experiments.ExperimentConfig.load(args.config)
    if args.out:
        cfg.output_dir = args.out
    out_dir = Path(cfg.output_dir)
    rows = experiments.run_sweep(cfg, out_dir / "results.csv", _parse_filters(args.filter),
                                 jobs=args.jobs)
    print(f"{len(rows)} rows written to {out_dir / 'results.csv'}")
    if rows and not args.no_plots:
        for f in plotting.emit_plots(rows, out_dir):
            print(f"wrote {f}")
    return 0 if experiments.sweep_ok(rows) else 1


def _cmd_plot(args) -> int:
    rows = experiments.read_rows(args.inp)
    for f in plotting.emit_plots(rows, args.out):
        print(f"wrote {f}")
    return 0


def _cmd_print_defaults(args) -> int:
    print(json.dumps(experiments.ExperimentConfig().to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="featproj-dp",
                                description="Feature-projective DP-SGD desk benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", help="synthetic dataset tools")
    dsub = d.add_subparsers(dest="data_command", required=True)
    g = dsub.add_parser("gen", help="generate a keypoint dataset")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--joints", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_data_gen)

    a = sub.add_parser("account", help="calibrate sigma and print the RDP curve")
    a.add_argument("--epsilon", type=float)
    a.add_argument("--sigma", type=float, help="account a given sigma instead of calibrating")
    a.add_argument("--delta", type=float, default=4e-5)
    a.add_argument("--q", type=float, required=True)
    a.add_argument("--steps", type=int, required=True)
    a.set_defaults(func=_cmd_account)

    r = sub.add_parser("run", help="run a sweep from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--filter", action="append", metavar="KEY=VALUE",
                   help="restrict cells, e.g. variant=DPSGD or C=0.1|1.0")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=_cmd_run)

    pl = sub.add_parser("plot", help="render figures from a results CSV")
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_cmd_plot)

    c = sub.add_parser("config", help="configuration helpers")
    csub = c.add_subparsers(dest="config_command", required=True)
    pd = csub.add_parser("print-defaults")
    pd.set_defaults(func=_cmd_print_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "account" and args.epsilon is None and args.sigma is None:
        build_parser().error("account needs --epsilon or --sigma")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
