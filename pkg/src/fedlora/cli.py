"""Command-line entry point: canned synthetic study, theory harness, free-form runs.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Every run writes a manifest before training, streams metrics to CSV, renders
figures next to the CSV, and drops a completion marker when done.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bilevel import deterministic_bilevel_run, theorem_step_sizes, verify_quadratic_bounds
from .config import ConfigError, load_config, resolve, synth_defaults
from .exceptions import NumericFailure
from .federation import build_clients, run_federation
from .manifest import RunManifest, mark_complete, write_manifest
from .metrics import MetricsWriter, read_metrics
from .plots import render_theory_figure, render_training_figure
from .quadratic import QuadraticBilevel, random_instance
from .rng import stream
from .synthdata import build_study

USAGE_ERROR = 2
NUMERIC_ERROR = 3


def _add_common_output_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out-dir", type=Path, default=None,
                        help="run directory (default: runs/<subcommand>-...)")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip figure rendering (CSV output is unaffected)")


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("hyperparameter overrides")
    group.add_argument("--upper-lr", type=float, default=None)
    group.add_argument("--lower-lr", type=float, default=None)
    group.add_argument("--steps", type=int, default=None)
    group.add_argument("--interval", type=int, default=None)
    group.add_argument("--batch-size", type=int, default=None)
    group.add_argument("--rank", type=int, default=None)
    group.add_argument("--client-rank", type=int, default=None)
    group.add_argument("--rank-min", type=int, default=None)
    group.add_argument("--rank-max", type=int, default=None)
    group.add_argument("--penalty", type=float, default=None,
                       help="L2 coefficient on the trailing rank block")
    group.add_argument("--sparsity", type=float, default=None,
                       help="fraction of trailing rank slots penalized")
    group.add_argument("--prune-tol-factor", type=float, default=None)
    group.add_argument("--upper-optimizer", choices=("adamw", "sgd"), default=None)
    group.add_argument("--maml-mode", choices=("first-order", "exact"), default=None)
    group.add_argument("--hvp-mode", choices=("analytic", "finite-difference"), default=None)
    group.add_argument("--index-pattern", choices=("paper", "alternative"), default=None)
    group.add_argument("--lower-steps", type=int, default=None)
    group.add_argument("--noise-is-std", action="store_true", default=None,
                       help="read the noise levels as standard deviations")
    group.add_argument("--weight-decay", type=float, default=None)


_OVERRIDE_KEYS = (
    "upper_lr", "lower_lr", "steps", "interval", "batch_size", "rank",
    "client_rank", "rank_min", "rank_max", "penalty", "sparsity",
    "prune_tol_factor", "upper_optimizer", "maml_mode", "hvp_mode",
    "index_pattern", "lower_steps", "noise_is_std", "weight_decay",
)


def _apply_overrides(document: dict, args: argparse.Namespace) -> dict:
    for key in _OVERRIDE_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            document[key] = value
    return document


def execute_run(document: dict, out_dir: Path, figures: bool = True) -> Path:
    """Run a federated training config and write all artifacts into ``out_dir``."""
    cfg, spec = resolve(document)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config=dict(document), seed=cfg.seed)
    write_manifest(out_dir, manifest)

    tasks = build_study(spec, cfg.seed)
    clients = build_clients(cfg, tasks)
    csv_path = out_dir / "metrics.csv"
    with MetricsWriter(csv_path) as writer:
        for log in run_federation(cfg, clients):
            writer.append(log.records)
    manifest.outputs.append(csv_path.name)

    if figures:
        records = read_metrics(csv_path)
        fig = render_training_figure(records, out_dir / "metrics.png",
                                     title=f"{cfg.algorithm} seed {cfg.seed}")
        manifest.outputs.append(fig.name)
    mark_complete(out_dir, manifest)
    return csv_path


def _cmd_synth(args: argparse.Namespace) -> int:
    document = synth_defaults(args.algorithm, args.seed)
    _apply_overrides(document, args)
    out_dir = args.out_dir or Path("runs") / f"synth-{args.algorithm}-s{args.seed}"
    csv_path = execute_run(document, out_dir, figures=not args.no_figures)
    records = read_metrics(csv_path)
    final_round = max(r.round for r in records)
    for record in records:
        if record.round == final_round:
            print(f"client {record.client_id}: test_loss={record.test_loss:.6g} "
                  f"eff_rank={record.eff_rank} current_rank={record.current_rank_k}")
    print(f"wrote {csv_path}")
    return 0


def _cmd_fed(args: argparse.Namespace) -> int:
    document = load_config(args.config)
    out_dir = args.out_dir or Path("runs") / f"fed-{Path(args.config).stem}"
    csv_path = execute_run(document, out_dir, figures=not args.no_figures)
    print(f"wrote {csv_path}")
    return 0


def _explicit_instance(mu: float, smoothness: float, dim_x: int, dim_y: int) -> QuadraticBilevel:
    """Decoupled instance whose constants equal the requested (mu, L) exactly."""
    if smoothness < mu or mu <= 0:
        raise ConfigError(f"need 0 < mu <= smoothness, got mu={mu}, L={smoothness}")
    h = np.diag(np.linspace(mu, smoothness, dim_y))
    q = np.diag(np.linspace(mu, smoothness, dim_x))
    return QuadraticBilevel(h=h, p=np.zeros((dim_y, dim_x)), q=q, b=np.zeros(dim_y))


def _cmd_theory(args: argparse.Namespace) -> int:
    out_dir = args.out_dir or Path("runs") / f"theory-s{args.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    config_echo = {
        "instances": args.instances, "steps": args.steps, "seed": args.seed,
        "dim_x": args.dim_x, "dim_y": args.dim_y, "mu": args.mu,
        "smoothness": args.smoothness,
    }
    manifest = RunManifest(config=config_echo, seed=args.seed)
    write_manifest(out_dir, manifest)

    explicit = args.mu is not None or args.smoothness is not None
    if explicit and (args.mu is None or args.smoothness is None):
        raise ConfigError("--mu and --smoothness must be given together")

    summary = []
    traces = {}
    trace_path = out_dir / "trace.csv"
    with open(trace_path, "w") as handle:
        handle.write("instance,step,phi_grad_sq\n")
        count = 1 if explicit else args.instances
        for index in range(count):
            if explicit:
                problem = _explicit_instance(args.mu, args.smoothness,
                                             args.dim_x, args.dim_y)
            else:
                problem = random_instance(args.dim_x, args.dim_y,
                                          stream(args.seed, index))
            rng = stream(args.seed, 10_000 + index)
            x0 = rng.normal(size=problem.n_x)
            y0 = rng.normal(size=problem.n_y)
            trace = deterministic_bilevel_run(problem, x0, y0, args.steps)
            for t, value in enumerate(trace.phi_grad_sq):
                handle.write(f"{index},{t},{value:.17g}\n")
            traces[index] = trace.phi_grad_sq
            bounds = verify_quadratic_bounds(problem, trace)
            head = max(1, min(100, args.steps // 10))
            ratio = trace.mean_grad_sq() / max(trace.mean_grad_sq(0, head), 1e-300)
            alpha, eta = trace.alpha, trace.eta
            summary.append({
                "instance": index,
                "mu": problem.strong_convexity,
                "smoothness": problem.smoothness,
                "condition_number": problem.condition_number,
                "alpha": alpha,
                "eta": eta,
                "decay_ratio": ratio,
                "decay_ok": ratio <= 0.2 or trace.mean_grad_sq() < 1e-18,
                **bounds,
                "bounds_ok": bounds["contraction_violations"] == 0
                and bounds["bias_violations"] == 0,
            })
    manifest.outputs.append(trace_path.name)

    summary_path = out_dir / "summary.json"
    all_ok = all(row["decay_ok"] and row["bounds_ok"] for row in summary)
    summary_path.write_text(json.dumps(
        {"instances": summary, "all_ok": all_ok}, indent=2) + "\n")
    manifest.outputs.append(summary_path.name)

    if not args.no_figures:
        fig = render_theory_figure(traces, out_dir / "gradnorm.png")
        manifest.outputs.append(fig.name)
    mark_complete(out_dir, manifest)
    for row in summary:
        print(f"instance {row['instance']}: decay_ratio={row['decay_ratio']:.4f} "
              f"contraction_violations={row['contraction_violations']} "
              f"bias_violations={row['bias_violations']} "
              f"{'PASS' if row['decay_ok'] and row['bounds_ok'] else 'FAIL'}")
    print(f"wrote {trace_path}")
    return 0 if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlora",
        description="Deterministic federated low-rank adapter training simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="two-client synthetic rank-learning study")
    synth.add_argument("--algorithm", required=True,
                       choices=("pf2lora", "homlora", "hetlora", "perfedavg"))
    synth.add_argument("--seed", type=int, default=0)
    _add_common_output_flags(synth)
    _add_override_flags(synth)
    synth.set_defaults(func=_cmd_synth)

    theory = sub.add_parser("theory", help="quadratic convergence harness")
    theory.add_argument("--instances", type=int, default=5)
    theory.add_argument("--steps", type=int, default=1000)
    theory.add_argument("--seed", type=int, default=0)
    theory.add_argument("--dim-x", type=int, default=8)
    theory.add_argument("--dim-y", type=int, default=8)
    theory.add_argument("--mu", type=float, default=None,
                        help="explicit strong-convexity constant (with --smoothness)")
    theory.add_argument("--smoothness", type=float, default=None,
                        help="explicit joint smoothness constant (with --mu)")
    _add_common_output_flags(theory)
    theory.set_defaults(func=_cmd_theory)

    fed = sub.add_parser("fed", help="free-form federated run from a config file")
    fed.add_argument("--config", required=True, type=Path)
    _add_common_output_flags(fed)
    fed.set_defaults(func=_cmd_fed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
