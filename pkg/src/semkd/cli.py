"""Command line entry point: ``semkd run | validate | gradcheck``.

Log verbosity comes from the ``SEMKD_LOG`` environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .harness import METHODS, TeacherBelowThreshold, run_experiment
from .scenario import ScenarioError, load_scenario


def _methods(text: str) -> list[str]:
    names = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in names if m not in METHODS]
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"unknown method(s) {', '.join(unknown) or '(none)'}; choose from {', '.join(METHODS)}")
    return names


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the methods on a scenario and write CSV reports")
    run.add_argument("--scenario", default="default", help="scenario YAML path, or 'default'")
    run.add_argument("--seed", type=_seed, default=None, help="overrides the scenario seed")
    run.add_argument("--methods", type=_methods, default=list(METHODS),
                     help="comma-separated subset of " + ",".join(METHODS))
    run.add_argument("--out", default=None, help="output directory (default runs/seed<seed>)")
    run.add_argument("--policy", choices=("single", "all"), default=None,
                     help="planner adjustment policy (default from scenario)")

    val = sub.add_parser("validate", help="check a scenario file and list every violation")
    val.add_argument("--scenario", default="default")

    grad = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    grad.add_argument("--seeds", type=int, default=20)
    return parser


def gradcheck(seeds: int) -> float:
    """Worst relative error over random 2-block nets for every training loss."""
    from .distill import kl_loss_and_grad, transitional_loss_and_grad
    from .nn import MicroNet, backward, cross_entropy, forward, max_relative_error, numerical_gradient

    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        net = MicroNet.init(4, 5, 2, 3, rng)
        net.params += rng.normal(0, 0.1, net.params.size)
        x = rng.normal(size=(6, 4))
        labels = rng.integers(0, 3, 6)
        t0, t1 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        losses = {
            "cross_entropy": lambda z: cross_entropy(z, labels),
            "stage1": lambda z: kl_loss_and_grad(z, t0, 2.0),
            "stage2": lambda z: transitional_loss_and_grad(z, t0, t1, 0.3, 2.0),
            "stage3": lambda z: kl_loss_and_grad(z, t1, 2.0),
        }
        for fn in losses.values():
            fp = forward(net, x)
            analytic = backward(net, fp, fn(fp.logits)[1])
            numeric = numerical_gradient(lambda p: fn(forward(net.with_params(p), x).logits)[0], net.params)
            worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SEMKD_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    if args.command == "validate":
        try:
            cfg = load_scenario(args.scenario)
        except (ScenarioError, OSError) as exc:
            for line in getattr(exc, "violations", [str(exc)]):
                print(f"invalid: {line}", file=sys.stderr)
            return 1
        print(f"ok: {cfg.num_devices} devices, seed {cfg.seed}, digest {cfg.digest()}")
        return 0

    if args.command == "gradcheck":
        worst = gradcheck(args.seeds)
        print(f"max relative error over {args.seeds} nets: {worst:.3e}")
        return 0 if worst < 1e-4 else 1

    try:
        seed_tag = args.seed if args.seed is not None else load_scenario(args.scenario).seed
        out = args.out or os.path.join("runs", f"seed{seed_tag}")
        paths = run_experiment(args.scenario, seed=args.seed, methods=args.methods, out_dir=out,
                               policy=args.policy)
    except (ScenarioError, OSError, TeacherBelowThreshold, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
