"""Command-line entry point: ``memextract [global flags] <command> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from threadpoolctl import threadpool_limits

from memextract import metrics
from memextract.harness import pipeline as P
from memextract.harness import plots, theory
from memextract.harness.config import ConfigError, fixture_config, load_config, with_overrides

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _lambdas(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memextract", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="experiment JSON (default: the built-in desk fixture)")
    ap.add_argument("--seed", type=int, dest="global_seed", help="override every component seed")
    ap.add_argument("--out", help="run directory (overrides out_dir)")
    ap.add_argument("--threads", type=int, help="worker threads for sampling and matching")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    sub.add_parser("synth", help="build the training set")
    sub.add_parser("train-diffusion", help="train the denoiser")
    sub.add_parser("train-teacher", help="assign labels and train the clean-input teacher")
    sub.add_parser("distill", help="generate the pseudo-labelled set and distil the student")
    ex = sub.add_parser("extract", help="guided sampling at one guidance scale")
    ex.add_argument("--lambda", type=float, dest="lam", required=True)
    ex.add_argument("--steps", type=int)
    ex.add_argument("--n", type=int)
    ex.add_argument("--seed", type=int, dest="sample_seed")
    ex.add_argument("--class", type=int, dest="target_label")
    ex.add_argument("--variant", choices=("side", "ti"), default="side")
    sub.add_parser("evaluate", help="per-lambda SIDE reports and the window summary")
    sw = sub.add_parser("sweep", help="AMS/UMS table over a lambda range")
    sw.add_argument("--lambdas", type=_lambdas, help="comma-separated (default: lambda_set)")
    sw.add_argument("--variant", choices=("side", "ti"), default="side")
    sub.add_parser("compare", help="Random vs OL-TI vs SIDE over the averaging window")
    th = sub.add_parser("verify-theory", help="numerical checks of the Gaussian identities")
    th.add_argument("--quick", action="store_true", help="fewer Monte Carlo samples")
    sub.add_parser("report", help="render SVG figures from the run's CSV files")
    return ap


def _config(args):
    cfg = load_config(args.config) if args.config else fixture_config()
    return with_overrides(cfg, seed=args.global_seed, out_dir=args.out, threads=args.threads)


def _print_report(rep: metrics.MemorizationReport, label: str) -> None:
    parts = " ".join(f"{t.tier.name}={t.ams:.4f}/{t.ums:.4f}" for t in rep.tiers)
    print(f"{label} lambda={rep.lam:g} n={rep.n_gen} AMS/UMS {parts}")


def _run(args) -> int:
    cfg = _config(args)
    root = cfg.out_dir
    if args.command == "verify-theory":
        results = theory.run_all(quick=args.quick)
        print(theory.format_table(results))
        print(f"wrote {theory.write_csv(results, f'{root}/theory.csv')}")
        return EXIT_OK if all(r.passed for r in results) else EXIT_STAGE
    if args.command == "report":
        for path in plots.render_run(root):
            print(path)
        return EXIT_OK

    with threadpool_limits(1):
        p = P.Pipeline(cfg)
        if args.command == "synth":
            x = p.dataset()["x"]
            print(f"dataset {cfg.dataset.kind}: N={len(x)} dim={x.shape[1]} "
                  f"range=[{x.min():.3f}, {x.max():.3f}]")
        elif args.command == "train-diffusion":
            p.denoiser()
            print(f"denoiser: {p.root / 'models/denoiser.ckpt'}")
        elif args.command == "train-teacher":
            p.teacher()
            print(f"teacher: {p.root / 'models/teacher.ckpt'}")
        elif args.command == "distill":
            p.student()
            print(f"student: {p.root / 'models/student.ckpt'}")
        elif args.command == "extract":
            s = cfg.sampling
            custom = dataclasses.replace(
                s, steps=args.steps or s.steps, n_gen=args.n or s.n_gen,
                seed=s.seed if args.sample_seed is None else args.sample_seed,
                target_label=s.target_label if args.target_label is None else args.target_label)
            if args.lam < 0:
                raise ConfigError("--lambda must be >= 0")
            rep = p.evaluate(args.variant, args.lam, None if custom == s else custom)
            _print_report(rep, args.variant if args.lam > 0 else "random")
        elif args.command == "evaluate":
            P.run_side(cfg)
            print(open(p.root / "summary.csv").read(), end="")
        elif args.command == "sweep":
            reports = P.sweep_lambda(cfg, args.lambdas, args.variant)
            for rep in reports:
                _print_report(rep, args.variant)
            print(open(p.root / "sweep_argmax.csv").read(), end="")
        elif args.command == "compare":
            table = P.compare_variants(cfg)
            print(open(p.root / "compare.csv").read(), end="")
            for other, m in P.ordering(table).items():
                verdict = "beyond" if m["beats"] else "within"
                print(f"SIDE - {other} (mid AMS): {m['margin']:+.4f}, 95% band {m['band95']:.4f} "
                      f"({verdict} noise)")
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except P.StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
