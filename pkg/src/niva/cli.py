"""Command-line entry point: ``niva <subcommand> ...``.

Exit codes: 0 success, 1 a check or invariant failed, 2 bad usage or
configuration, 3 unreadable or malformed input, 4 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections import defaultdict

import numpy as np

from .config import ModelConfig, RolloutConfig, TrainConfig, apply_overrides
from .scenario import KINDS, FormatError, Scenario, atomic_write, read_scenario, write_scenario

log = logging.getLogger("niva")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _log_config(name: str, resolved: dict):
    log.info("resolved %s config: %s", name, json.dumps(resolved, sort_keys=True))


def _resolve(sections: dict, overrides: list) -> dict:
    try:
        return apply_overrides(sections, overrides or [])
    except (KeyError, ValueError) as err:
        raise UsageError(str(err)) from err


# --- subcommands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .scenario import generate_toy_dataset

    _log_config("gen", {"kind": args.kind, "n": args.n, "seed": args.seed})
    try:
        scenarios = generate_toy_dataset(args.kind, args.n, args.seed)
    except ValueError as err:
        raise UsageError(str(err)) from err
    write_scenario(args.out, scenarios)
    print(f"wrote {len(scenarios)} scenarios to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import write_checkpoint
    from .training import TrainingDiverged, train

    cfgs = _resolve({"model": ModelConfig(), "train": TrainConfig()}, args.set)
    resolved = {name: dataclasses.asdict(c) for name, c in cfgs.items()}
    _log_config("train", resolved)
    data = read_scenario(args.data)
    if not data:
        raise FormatError(f"{args.data} holds no scenarios")

    def progress(step, row, _estep):
        log.debug("step %d loss %.4f", step, row["loss"])

    try:
        result = train(data, cfgs["model"], cfgs["train"], callback=progress)
    except TrainingDiverged as err:
        log.error("%s", err)
        return EXIT_DIVERGED
    write_checkpoint(args.out, result.model, {"train": resolved["train"]})
    atomic_write(args.out + ".resolved.json",
                 (json.dumps(resolved, sort_keys=True, indent=2) + "\n").encode("utf-8"))
    atomic_write(args.out + ".trace.csv", result.trace_csv().encode("utf-8"))
    last = result.trace[-1]["loss"] if result.trace else float("nan")
    print(f"trained {len(result.trace)} steps, final loss {last:.4f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .checkpoint import read_checkpoint
    from .rollout import rollout_scenario

    if args.rollouts < 1:
        raise UsageError("--rollouts must be >= 1")
    cfgs = _resolve({"rollout": RolloutConfig(num_rollouts=args.rollouts)}, args.set)
    cfg = cfgs["rollout"]
    horizon_fixed = any(item.startswith("rollout.horizon=") for item in args.set or [])
    model, _ = read_checkpoint(args.ckpt)
    data = read_scenario(args.data)
    if args.intention is not None and not 0 <= args.intention < model.cfg.num_intentions:
        raise UsageError(f"--intention must lie in [0, {model.cfg.num_intentions})")
    _log_config("sample", {"rollout": dataclasses.asdict(cfg), "intention": args.intention,
                           "style_seed": args.style_seed})
    out = []
    for scenario in data:
        run_cfg = cfg
        if scenario.future and not horizon_fixed:
            run_cfg = dataclasses.replace(cfg, horizon=scenario.future_steps)
        for r in range(run_cfg.num_rollouts):
            result = rollout_scenario(model, scenario, run_cfg, r, intentions=args.intention,
                                      style_seed=args.style_seed)
            out.append(result.to_scenario(scenario))
    write_scenario(args.out, out)
    print(f"wrote {len(out)} rollouts to {args.out}")
    return EXIT_OK


def _group_by_source(rollouts) -> dict:
    groups = defaultdict(list)
    for r in rollouts:
        groups[r.metadata.get("source_id", r.id)].append(r)
    return groups


def cmd_eval(args) -> int:
    from .metrics import collision_rate, metrics_csv, min_ade, offroad_rate

    _log_config("eval", {"rollouts": args.rollouts, "truth": args.truth})
    groups = _group_by_source(read_scenario(args.rollouts))
    truth = {s.id: s for s in read_scenario(args.truth)}
    rows = []
    for sid in sorted(groups):
        if sid not in truth:
            raise FormatError(f"no ground truth for scenario {sid!r}")
        ref = truth[sid]
        if not ref.future:
            raise FormatError(f"ground truth {sid!r} has no future steps")
        poses, _, valid, kinds = ref.track_arrays(True)
        h = ref.history_steps
        target = np.where(valid[h:, :, None], poses[h:], np.nan)
        kind_names = [a.kind for a in ref.history[0]]
        futures = []
        for r in groups[sid]:
            if r.num_agents != ref.num_agents or r.future_steps != ref.future_steps:
                raise FormatError(f"rollout {r.id} does not match the shape of {sid}")
            futures.append(r.track_arrays(True)[0][h:])
        rows.append({
            "scenario_id": sid,
            "num_rollouts": len(futures),
            "min_ade": min_ade(futures, target),
            "collision_rate": float(np.mean([collision_rate(f, kind_names) for f in futures])),
            "offroad_rate": float(np.mean([offroad_rate(f, ref.map) for f in futures])),
        })
    if not rows:
        raise FormatError(f"{args.rollouts} holds no rollouts")
    atomic_write(args.out, metrics_csv(rows).encode("utf-8"))
    mean_ade = float(np.mean([r["min_ade"] for r in rows]))
    print(f"evaluated {len(rows)} scenarios, mean minADE {mean_ade:.4f} m; report {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_primitives, end_to_end_check

    results = check_primitives(args.seeds) + [end_to_end_check()]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: max rel err {r.max_rel_err:.3e} (tol {r.tolerance:.0e})")
    worst = max(r.max_rel_err for r in results if r.tolerance == results[0].tolerance)
    ok = all(r.ok for r in results)
    print(f"max rel err = {worst:.3e} {'<=' if worst <= results[0].tolerance else '>'} "
          f"{results[0].tolerance:.0e} over primitives; end-to-end {results[-1].max_rel_err:.3e}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_oracle(args) -> int:
    from .oracles import run_all

    results = run_all(args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK


def cmd_bound(args) -> int:
    from .rollout import AsyncBoundCase, async_bound_check

    try:
        taus = sorted((float(t) for t in args.tau_list.split(",") if t.strip()), reverse=True)
        case = AsyncBoundCase(args.k, args.m, args.delay, args.dynamics)
    except ValueError as err:
        raise UsageError(str(err)) from err
    if not taus:
        raise UsageError("--tau-list is empty")
    _log_config("bound", {**dataclasses.asdict(case), "taus": taus, "substeps": args.substeps})
    rows = async_bound_check(case, taus, args.substeps)
    print("tau,empirical_gap,analytic_bound,worst_delay,lipschitz_violations,holds")
    for r in rows:
        print(f"{r.tau!r},{r.empirical_gap!r},{r.analytic_bound!r},{r.worst_delay!r},"
              f"{r.lipschitz_violations},{str(r.holds).lower()}")
    gaps = [r.empirical_gap for r in rows]
    monotone = all(a > b for a, b in zip(gaps, gaps[1:]))
    if not monotone:
        print("gap does not shrink monotonically with tau", file=sys.stderr)
    return EXIT_OK if monotone and all(r.holds for r in rows) else EXIT_CHECK


def cmd_plot(args) -> int:
    from .plot import render_svg

    groups = _group_by_source(read_scenario(args.rollouts))
    if not groups:
        raise FormatError(f"{args.rollouts} holds no rollouts")
    sid = sorted(groups)[0]
    if len(groups) > 1:
        log.warning("rollouts cover %d scenarios; plotting %s", len(groups), sid)
    rollouts = groups[sid]
    first = rollouts[0]
    truth = first.metadata.get("truth_future")
    future = None
    if truth is not None:
        from .scenario import states_from_arrays

        kinds = first.track_arrays(False)[3]
        truth = np.asarray(truth, dtype=np.float64)
        future = states_from_arrays(truth, np.zeros(truth.shape[:2]), kinds=kinds)
    base = Scenario(sid, list(first.history), future, list(first.map), list(first.signals), first.step_seconds)
    atomic_write(args.out, render_svg(base, rollouts).encode("utf-8"))
    print(f"wrote {args.out}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="niva", description="Hierarchical latent traffic simulator toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a toy scenario dataset")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="variational EM training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; sidecars get .resolved.json and .trace.csv")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a model.* or train.* setting (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="closed-loop rollouts from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rollouts", type=int, required=True, help="rollouts per scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--intention", type=int, default=None, help="force every agent's intention")
    p.add_argument("--style-seed", type=int, default=None, help="share style draws across rollouts")
    p.add_argument("--set", action="append", metavar="rollout.KEY=VALUE")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="minADE, collision and off-road rates as CSV")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the full loss")
    p.add_argument("--seeds", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="Gaussian and E-step algebra against numerical oracles")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bound", help="held-decision divergence against its analytic bound")
    p.add_argument("--k", type=float, required=True, help="Lipschitz constant")
    p.add_argument("--m", type=float, required=True, help="action gap")
    p.add_argument("--tau-list", required=True, help="comma-separated patch lengths in seconds")
    p.add_argument("--dynamics", default="linear", choices=("linear", "sine", "tanh"))
    p.add_argument("--delay", type=float, default=None, help="fixed decision delay; default scans the patch")
    p.add_argument("--substeps", type=int, default=1000)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("plot", help="SVG overlay of map, recorded future and rollouts")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as err:
        log.error("%s", err)
        return EXIT_USAGE
    except (FormatError, OSError) as err:
        log.error("%s", err)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
