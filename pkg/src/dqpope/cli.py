"""Command line entry point: ``dqpope run|oracle|check``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import experiments as ex
from .errors import ConfigError, DegenerateRatioError, InputError, ResourceError, TrainingDivergedError
from .estimators import cateope_project
from .metrics import pinball, pinball_grad
from .neural import gradient_check, make_net

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_TRAINING = 3

log = logging.getLogger("dqpope")


def _summarise(cfg: ex.ExperimentConfig, result) -> None:
    if cfg.experiment == "toy-mse-table":
        for noise in result.noises:
            cells = "  ".join(f"{c}={1e3 * result.mse(noise, c):.3g}" for c in result.columns)
            print(f"{noise}: {cells}")
    elif cfg.experiment == "complexity-sweep":
        for rate in cfg.mixture_rates:
            cells = "  ".join(f"N={n}: {result.mean_w1(rate, n):.4g}" for n in cfg.sample_sizes)
            print(f"mixture {rate:g}: {cells}")
    elif cfg.experiment == "tabular-contraction":
        for row in result:
            print(f"gamma={row.gamma:g} p={row.p}: max ratio {row.max_ratio:.6f} "
                  f"(bound {row.bound:.6f}, skipped {row.skipped}) {'ok' if row.passed else 'FAIL'}")
    else:
        print(f"KS statistics: {', '.join(f'{k:.4f}' for k in result.ks)}")
    print(f"wrote results to {cfg.output_path()}")


# -- property checks -----------------------------------------------------------


def _check_gradients() -> Tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for mode in ("concat", "cosine"):
        for hidden in ((12, 12), (64, 64, 64)):
            net = make_net(3, 2, hidden, rng, mode, cosine_order=8)
            for k in net.params:
                net.params[k] = rng.uniform(-0.5, 0.5, size=net.params[k].shape)
            b = 16
            worst = max(worst, gradient_check(
                net, rng.normal(size=(b, 3)), rng.integers(0, 2, b), rng.uniform(0.01, 0.99, b),
                rng.normal(size=b), rng))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def _check_projection() -> Tuple[bool, str]:
    rng = np.random.default_rng(1)
    atoms = np.linspace(-10, 10, 51)
    p = rng.dirichlet(np.ones(51), size=10_000)
    out = cateope_project(rng.uniform(-15, 15, 10_000), rng.uniform(0, 1, 10_000), p, atoms, -10, 10)
    err = float(np.max(np.abs(out.sum(axis=1) - 1.0)))
    return err < 1e-9, f"max mass error {err:.1e}"


def _check_pinball() -> Tuple[bool, str]:
    ok = (pinball(0.0, 0.3) == 0.0 and pinball(2.0, 0.5) == 1.0
          and np.isclose(pinball(-1.0, 0.9), 0.1) and np.isclose(pinball(1.0, 0.9), 0.9)
          and pinball_grad(0.0, 0.3) == 0.3 - 1.0)
    return bool(ok), "spot values"


def _check_contraction() -> Tuple[bool, str]:
    cfg = ex.parse_config({"experiment": "tabular-contraction", "trials": 200})
    rows = ex.run_contraction_suite(cfg, write=False)
    worst = max(r.max_ratio / r.bound for r in rows)
    return all(r.passed for r in rows), f"max ratio / bound {worst:.4f}"


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("pinball", _check_pinball),
    ("gradients", _check_gradients),
    ("projection", _check_projection),
    ("contraction", _check_contraction),
]


def run_checks() -> bool:
    all_ok = True
    for name, fn in CHECKS:
        ok, detail = fn()
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqpope", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a YAML config")
    run.add_argument("config")
    oracle = sub.add_parser("oracle", help="write the Monte-Carlo return distribution only")
    oracle.add_argument("config")
    sub.add_parser("check", help="run the fast property suites")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            return EXIT_OK if run_checks() else EXIT_CHECK_FAILED
        cfg = ex.load_config(args.config)
        if args.command == "oracle":
            ref = ex.run_oracle(cfg)
            print(f"{len(ref)} returns, mean {ref.mean:.6g}; wrote {cfg.output_path() / 'oracle.csv'}")
            return EXIT_OK
        _summarise(cfg, ex.run_experiment(cfg))
        return EXIT_OK
    except (ConfigError, InputError, DegenerateRatioError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, ResourceError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
