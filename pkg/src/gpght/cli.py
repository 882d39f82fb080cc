"""Command-line entry point: ``gpght {gen,oracle,train,eval,ablate,report}``.

Exit codes: 0 success, 2 invalid input (arguments, config or network file),
1 any other failure.  ``SOTA_SEED`` overrides the seed of a config.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .harness import (
    ConfigError,
    check_od,
    collect_cells,
    emit_curve,
    emit_report,
    load_experiment_config,
    run_experiment,
    sota_probability,
    summarize,
    train_config_from,
)
from .network import NetworkError, build_sioux_falls, build_synthetic, load_network
from .oracles import OracleError, oracle_policy_rollout_value, solve_budget, synthetic_upper_bound
from .policy import Policy, StateError
from .tensor import CheckpointError, read_header
from .trainer import load_checkpoint, save_checkpoint, train

log = logging.getLogger("gpght")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    pass


def _seed_override() -> int | None:
    raw = os.environ.get("SOTA_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SOTA_SEED must be an integer, got {raw!r}") from None


def _write_json(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _parse_od(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--od expects two comma-separated node ids, got {text!r}") from None
    return a, b


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


# --- subcommands --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    net = build_synthetic() if args.network == "synthetic" else build_sioux_falls(args.seed)
    net.save(args.out)
    log.info("wrote %s (%d nodes, %d edges)", args.out, net.num_nodes, net.num_edges)
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.target is not None:
        if not 0.0 < args.target < 1.0:
            raise UsageError("--target must lie in (0, 1)")
        tol = 1e-9
        budget = solve_budget(args.target, tol=tol)
        doc = {"value": budget, "method": "bisection", "error_estimate": tol,
               "config": {"target": args.target, "network": "synthetic"}}
    else:
        if args.budget < 0:
            raise UsageError("--budget must be >= 0")
        if args.method == "quadrature":
            doc = synthetic_upper_bound(args.budget).to_dict()
        else:
            doc = oracle_policy_rollout_value(args.budget, args.samples, args.seed).to_dict()
    _write_json(doc, args.out)
    return EXIT_OK


def _train_sections(path) -> tuple[dict, dict]:
    """(train overrides, policy overrides) from a JSON config; a flat object is all train keys."""
    if path is None:
        return {}, {}
    doc = _read_json(path)
    if "train" in doc or "policy" in doc:
        extra = set(doc) - {"train", "policy"}
        if extra:
            raise UsageError(f"unknown config sections {sorted(extra)}")
        return dict(doc.get("train", {})), dict(doc.get("policy", {}))
    return doc, {}


def cmd_train(args) -> int:
    net = load_network(args.network)
    od = _parse_od(args.od)
    t_let = check_od(net, od)
    if not args.budget_mult > 0:
        raise UsageError("--budget-mult must be > 0")
    budget = args.budget_mult * t_let
    train_doc, policy_doc = _train_sections(args.config)
    seed = _seed_override()
    if seed is not None:
        train_doc["seed"] = seed
    tcfg = train_config_from(train_doc)
    try:
        policy = Policy.for_network(net, t_let, seed=tcfg.seed, **policy_doc)
    except TypeError as exc:
        raise UsageError(f"bad policy config: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    state = None
    if args.resume and ckpt.exists():
        state, saved_net, o, d, saved_budget, saved_cfg = load_checkpoint(ckpt, policy)
        if (saved_net, (o, d), saved_budget, replace(saved_cfg, iterations=tcfg.iterations)) != (net, od, budget, tcfg):
            raise UsageError("existing checkpoint was produced by a different network/OD/budget/config")
        log.info("resuming from iteration %d", state.iteration)
    state = train(policy, net, od[0], od[1], budget, tcfg, state=state, checkpoint_path=ckpt,
                  progress=(lambda it, rate: log.debug("iteration %d on-time %.3f", it, rate)))
    save_checkpoint(ckpt, state, net, od[0], od[1], budget, tcfg)
    run_config = {"train": asdict(tcfg), "policy": policy.config.to_dict(), "network": str(args.network),
                  "od": list(od), "budget_multiplier": args.budget_mult, "budget": budget, "t_let": t_let}
    emit_curve(state.curve, out / "curve.csv", run_config)
    final = state.curve[-1].J_mean if state.curve else None
    _write_json({"final_J": final, "iterations": state.iteration, **run_config}, str(out / "summary.json"))
    log.info("final J %s after %d iterations", final, state.iteration)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    header = read_header(args.checkpoint)
    if "train" not in header:
        raise UsageError(f"{args.checkpoint} carries no network/OD information")
    state, net, o, d, budget, tcfg = load_checkpoint(args.checkpoint)
    if args.budget_mult is not None:
        budget = args.budget_mult * check_od(net, (o, d))
    seed = _seed_override()
    seed = args.seed if seed is None else seed
    j, se = sota_probability(state.policy, net, (o, d), budget, args.samples, seed,
                             max_steps=tcfg.steps_for(net), greedy=args.greedy)
    _write_json({"J": j, "stderr": se, "samples": args.samples, "seed": seed, "budget": budget,
                 "od": [o, d], "greedy": args.greedy, "iterations": state.iteration}, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = load_experiment_config(args.config)
    seed = _seed_override()
    if seed is not None:
        config = replace(config, seeds=(seed,))
    out = Path(args.out) if args.out else Path(args.config).with_suffix("")
    report = run_experiment(config, out, progress=lambda name, rows: log.info(
        "%s: %s", name, ", ".join(f"m={r.multiplier:g} J={r.J:.4f}" for r in rows)))
    for row in summarize(report):
        log.info("%(origin)d-%(destination)d m=%(multiplier)g %(variant)s J=%(J_mean).4f +- %(J_sem).4f", row)
    log.info("report written to %s", out / "report.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    report = collect_cells(args.in_dir)
    emit_report(report, args.out)
    for row in summarize(report):
        print(f"{row['origin']}-{row['destination']}\tm={row['multiplier']:g}\t{row['variant']}\t"
              f"J={row['J_mean']:.4f}\tsem={row['J_sem']:.4f}\tseeds={row['seeds']}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpght", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a benchmark network as JSON")
    p.add_argument("--network", choices=("synthetic", "sfn"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="parameter seed for the generated SFN")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("oracle", help="synthetic-network optimal on-time probability")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--budget", type=float)
    g.add_argument("--target", type=float, help="solve for the budget reaching this probability")
    p.add_argument("--method", choices=("quadrature", "monte_carlo"), default="quadrature")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("train", help="train a policy for one OD pair and budget")
    p.add_argument("--network", required=True)
    p.add_argument("--od", required=True, help="origin,destination node ids")
    p.add_argument("--budget-mult", type=float, required=True, help="budget as a multiple of t_LET")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="on-time probability of a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget-mult", type=float)
    p.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an experiment config (OD x budget x variant x seed)")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="collect experiment cells into one CSV")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, NetworkError, OracleError, StateError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except CheckpointError as exc:
        log.error("checkpoint: %s", exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
