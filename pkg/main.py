"""Command-line front door for the adapter scaling experiments.

    uv run main.py gamma --rule rslora --alpha 16 --rank 256
    uv run main.py moments --config cfg.json --out results/
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from jsonschema import ValidationError

from adapter import AdapterConfig, ScalingRule, gamma
from config import ConfigError, config_comment, resolve_config
from experiments import (
    ExperimentConfig,
    run_init_only_ablation,
    run_lr_sweep,
    run_rank_sweep,
    run_scaling_rule_comparison,
    run_sgd_stability,
)
from numerics import NumericsError, RngStream
from reports import emit_reports
from theory import (
    SlopeSummary,
    StatisticKind,
    expectation_identity,
    gradient_check_suite,
    input_gradient_scaling_experiment,
    moment_scaling_experiment,
    ranks_for_rule,
    remainder_order_sweep,
    step_one_suite,
    summarize_slope,
)

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-5
STEP_ONE_TOLERANCE = 1e-13
REMAINDER_STEPS = 10
THEORY_COMMANDS = ("trajectory", "moments")


class UsageError(Exception):
    def __init__(self, message: str, usage: str) -> None:
        super().__init__(message)
        self.usage = usage


class ArgumentParser(argparse.ArgumentParser):
    """Raises instead of exiting so ``run_command`` owns the exit code."""

    def error(self, message: str):
        raise UsageError(message, self.format_usage())


def parse_ranks(text: str) -> List[int]:
    try:
        ranks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"ranks must be comma-separated integers, got {text!r}") from None
    if not ranks or any(r < 1 for r in ranks):
        raise argparse.ArgumentTypeError(f"ranks must be positive, got {text!r}")
    return ranks


def parse_seed(text: str) -> int:
    try:
        seed = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {text}")
    return seed


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Experiment config (JSON, or YAML by extension).")
    parser.add_argument("--out", type=Path, default=Path("results"), help="Output directory for CSV reports.")
    parser.add_argument("--seed", type=parse_seed, help="Base seed (overrides config 'seed').")
    parser.add_argument("--threads", type=int, help="Concurrent cells (overrides config 'threads').")
    parser.add_argument("--ranks", type=parse_ranks, help="Comma-separated ranks.")
    parser.add_argument("--rule", help="lora, rslora, none or power[:nu].")
    parser.add_argument("--nu", type=float, help="Exponent for the power rule.")
    parser.add_argument("--alpha", type=float, help="Scaling numerator alpha.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress to stderr.")


def _add_save_adapters(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--save-adapters",
        type=Path,
        metavar="DIR",
        help="Write each cell's final adapters and merged weights under DIR.",
    )


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="main.py",
        description="Rank scaling of low-rank adapters: checks, sweeps and reports.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gamma", help="Print the scaling factor for a rule and rank.")
    p.add_argument("--rule", help="lora, rslora (default), none or power[:nu].")
    p.add_argument("--nu", type=float, help="Exponent for the power rule.")
    p.add_argument("--alpha", type=float, default=16.0, help="Scaling numerator alpha.")
    p.add_argument("--rank", type=int, required=True, help="Adapter rank.")
    p.add_argument("-v", "--verbose", action="store_true", help="Log progress to stderr.")
    p.set_defaults(handler=cmd_gamma)

    p = commands.add_parser("gradcheck", help="Randomized finite-difference gradient checks.")
    p.add_argument("--cases", type=int, default=200, help="Number of random configurations.")
    p.add_argument("--seed", type=parse_seed, default=0, help="Base seed.")
    p.add_argument("-v", "--verbose", action="store_true", help="Log progress to stderr.")
    p.set_defaults(handler=cmd_gradcheck)

    p = commands.add_parser("trajectory", help="First-order trajectory checks.")
    _add_shared(p)
    p.add_argument("--cases", type=int, default=50, help="Random configurations for the step-1 check.")
    p.set_defaults(handler=cmd_trajectory)

    p = commands.add_parser("moments", help="Monte-Carlo output moments and input gradients across ranks.")
    _add_shared(p)
    p.set_defaults(handler=cmd_moments)

    p = commands.add_parser("sweep", help="Training sweeps.")
    _add_shared(p)
    p.add_argument("--kind", choices=["rank", "sgd", "rules"], default="rank")
    _add_save_adapters(p)
    p.set_defaults(handler=cmd_sweep)

    p = commands.add_parser("ablate", help="Initialization and learning-rate ablations.")
    _add_shared(p)
    p.add_argument("--kind", choices=["init-only", "lr"], default="init-only")
    _add_save_adapters(p)
    p.set_defaults(handler=cmd_ablate)
    return parser


def _rule_text(rule: Optional[str], nu: Optional[float]) -> Optional[str]:
    if nu is not None and (rule is None or rule == "power"):
        return f"power:{nu!r}"
    return rule


def check_rule_flags(args: argparse.Namespace, parser: ArgumentParser) -> None:
    rule, nu = getattr(args, "rule", None), getattr(args, "nu", None)
    if nu is not None and rule not in (None, "power"):
        parser.error(f"--nu applies only to --rule power, got --rule {rule}")


def overrides_for(args: argparse.Namespace) -> Dict[str, object]:
    """Map shared flags one-to-one onto config keys; theory commands target ``theory.*``."""
    prefix = "theory." if args.command in THEORY_COMMANDS else ""
    rule = _rule_text(args.rule, args.nu)
    return {
        "seed": args.seed,
        "threads": args.threads,
        f"{prefix}ranks": args.ranks,
        f"{prefix}rules": [rule] if rule is not None else None,
        f"{prefix}alpha": args.alpha,
    }


def load_config(args: argparse.Namespace):
    document = resolve_config(args.config, overrides_for(args))
    return ExperimentConfig.from_mapping(document), config_comment(document)


def _print_paths(paths: Sequence[Path]) -> None:
    for path in paths:
        print(f"Wrote {path}")


def cmd_gamma(args: argparse.Namespace) -> int:
    rule = ScalingRule.parse(_rule_text(args.rule, args.nu) or "rslora", args.alpha)
    print(format(gamma(rule, args.rank), ".17g"))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.cases < 1:
        raise ValueError(f"--cases must be positive, got {args.cases}")
    cases = gradient_check_suite(args.cases, RngStream(args.seed))
    worst = max(cases, key=lambda c: c.error)
    print(f"{len(cases)} cases, max relative error {worst.error:.3g} ({worst.description})")
    if worst.error > GRADCHECK_TOLERANCE:
        print(f"Gradient check failed: {worst.error:.3g} > {GRADCHECK_TOLERANCE}", file=sys.stderr)
        return 1
    return 0


def cmd_trajectory(args: argparse.Namespace) -> int:
    if args.cases < 1:
        raise ValueError(f"--cases must be positive, got {args.cases}")
    cfg, comment = load_config(args)
    th = cfg.theory
    rules = th.scaling_rules()
    root = RngStream(cfg.seed)

    errors = step_one_suite(args.cases, rules, root.derive("step-one"), th.eta)
    print(f"step 1: max relative error {max(errors):.3g} over {len(errors)} configurations")

    alphas = [th.alpha * 2.0**-k for k in range(5)]
    slopes = []
    for rule in rules:
        config = AdapterConfig(th.ranks[0], rule)
        fit = remainder_order_sweep(
            config, th.d1, th.d2, th.eta, REMAINDER_STEPS, alphas, root.derive("remainder", rule.tag)
        )
        slopes.append(
            SlopeSummary(
                rule=rule.tag,
                nu=rule.exponent,
                statistic=StatisticKind.REMAINDER.value,
                m=0,
                slope=fit.slope,
                intercept=fit.intercept,
                r_squared=fit.r_squared,
                n_points=len(fit.points),
            )
        )
        print(f"remainder {rule.tag}: relative residual ~ gamma^{fit.slope:.3f}")

    for rank in (16, 256):
        _, error = expectation_identity(rank, th.d1, None, 512, root.derive("gram", rank))
        print(f"E[A0^T A0] at rank {rank}: relative error {error:.3g}")

    _print_paths(emit_reports({"slopes": slopes}, args.out, comment))
    if max(errors) > STEP_ONE_TOLERANCE:
        print(f"Step-1 check failed: {max(errors):.3g} > {STEP_ONE_TOLERANCE}", file=sys.stderr)
        return 1
    return 0


def cmd_moments(args: argparse.Namespace) -> int:
    cfg, comment = load_config(args)
    th = cfg.theory
    moments, slopes = [], []
    for rule in th.scaling_rules():
        ranks = ranks_for_rule(rule, th.ranks)
        common = dict(
            n_steps=th.n_steps,
            n_seeds=th.n_seeds,
            d1=th.d1,
            d2=th.d2,
            eta=th.eta,
            seed=cfg.seed,
            n_eval=th.n_eval,
            sigma_a=cfg.sigma_a,
            threads=cfg.threads,
        )
        forward = moment_scaling_experiment(rule, ranks, th.m, input_mean=th.input_mean, **common)
        backward = input_gradient_scaling_experiment(rule, ranks, **common)
        for estimates in (forward, backward):
            moments.extend(estimates)
            summary = summarize_slope(estimates)
            slopes.append(summary)
            print(f"{summary.statistic} {summary.rule}: slope {summary.slope:.3f} (r^2 {summary.r_squared:.3f})")
    _print_paths(emit_reports({"moments": moments, "slopes": slopes}, args.out, comment))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg, comment = load_config(args)
    runner = {
        "rank": run_rank_sweep,
        "sgd": run_sgd_stability,
        "rules": run_scaling_rule_comparison,
    }[args.kind]
    records = runner(cfg, args.save_adapters)
    _print_paths(emit_reports({"trajectory": records}, args.out, comment))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg, comment = load_config(args)
    if args.kind == "lr":
        reports = {"lrsweep": run_lr_sweep(cfg, export_dir=args.save_adapters)}
    else:
        reports = {"trajectory": run_init_only_ablation(cfg, args.save_adapters)}
    _print_paths(emit_reports(reports, args.out, comment))
    return 0


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def run_command(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        check_rule_flags(args, parser)
    except UsageError as e:
        print(e.usage, end="", file=sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else 0

    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 1
    except (NumericsError, ValidationError, ValueError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
