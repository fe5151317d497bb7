"""Command-line pipeline: data generation, training, allocation, evaluation,
online simulation, and an end-to-end chain.

Every run writes a resolved-config snapshot next to its outputs so an
experiment is reproducible from the snapshot plus the seed alone. Paths
inside snapshots are stored relative to the output location to keep reruns
byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import AllocationProblem, WindowStore, solve_and_assign
from .baselines import (
    CheapestPolicy,
    ExpertPolicy,
    RewardModel,
    RewardModelPolicy,
    UniformRandomPolicy,
    train_reward_model,
)
from .bcq import BcqAgent, BcqPolicy, bcq_train
from .core import (
    ActionSet,
    HyperParams,
    cents,
    load_dataset,
    units,
    validate_dataset,
    write_dataset,
)
from .envsim import CheckinEnv, config_to_dict, default_config, generate_dataset, load_config
from .evaluation import match_records, offline_report, simulate_online


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="budgetrl",
        description="Cash-bonus promotion pipeline: offline Q-learning plus a "
                    "budgeted Lagrangian allocator.")
    parser.add_argument("--version", action="version", version=f"budgetrl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="simulate logged trajectories under the behavior policy")
    p.add_argument("--config", help="env/behavior/action config JSON (defaults built in)")
    p.add_argument("--n-users", type=int, default=2000, help="number of user cycles to simulate")
    p.add_argument("--seed", type=int, default=0, help="master seed for per-user streams")
    p.add_argument("--out", required=True, help="dataset directory to create or append to")

    p = sub.add_parser("train", help="train the constrained Q-agent or the supervised reward model")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--policy", choices=["bcq", "lr"], default="bcq", help="model family to train")
    p.add_argument("--xi", type=float, default=0.3, help="behavior-probability ratio threshold")
    p.add_argument("--gamma", type=float, default=1.0, help="discount factor")
    p.add_argument("--kappa", type=float, default=1.0, help="Huber loss threshold")
    p.add_argument("--steps", type=int, default=3000, help="training steps")
    p.add_argument("--batch-size", type=int, default=64, help="mini-batch size")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate")
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd", help="update rule")
    p.add_argument("--hidden", default="128,128", help="comma-separated hidden layer widths")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.add_argument("--log", help="training-log CSV path (step, loss, behavior agreement)")

    p = sub.add_parser("allocate", help="budget-constrained assignment, batch or stream")
    p.add_argument("--budget", type=float, required=True, help="average budget per customer, currency units")
    p.add_argument("--q-matrix", help="batch mode: CSV of value rows, header = action costs")
    p.add_argument("--stream", help="stream mode: JSONL of {ts, q} rows")
    p.add_argument("--costs", help="stream mode: comma-separated action costs in units")
    p.add_argument("--window-hours", type=float, default=24.0, help="sliding window span")
    p.add_argument("--refresh-minutes", type=float, default=10.0, help="multiplier refresh period")
    p.add_argument("--out", required=True, help="assignment CSV (batch) or decisions JSONL (stream)")
    p.add_argument("--lambda-timeline", help="stream mode: CSV of multiplier snapshots")

    p = sub.add_parser("evaluate", help="matched-record offline evaluation on logged data")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--policy", choices=["bcq", "lr-greedy", "expert"], default="bcq",
                   help="policy to score against the log")
    p.add_argument("--model", help="model JSON (bcq or lr policies)")
    p.add_argument("--config", help="config JSON (expert policy table)")
    p.add_argument("--xi", type=float, help="override the agent's trained xi")
    p.add_argument("--full-trajectory", action="store_true",
                   help="drop partially matching trajectories instead of keeping prefixes")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("simulate", help="virtual-time online run with budget control")
    p.add_argument("--config", help="env/behavior/action config JSON")
    p.add_argument("--policy", choices=["bcq", "lr-lp", "lr-greedy", "expert", "cheapest", "random"],
                   default="bcq", help="decision policy to deploy")
    p.add_argument("--model", help="model JSON (bcq / lr policies)")
    p.add_argument("--budget", type=float, default=0.87, help="average budget per customer per day")
    p.add_argument("--days", type=int, default=7, help="virtual days to run")
    p.add_argument("--arrivals", type=int, default=150, help="new users per day")
    p.add_argument("--seed", type=int, default=0, help="simulation seed")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--timeline", help="per-day CSV (day, retention, avg_cost, lambda)")

    p = sub.add_parser("pipeline", help="generate-data, train, simulate, evaluate with one seed")
    p.add_argument("--workdir", required=True, help="directory for all artifacts")
    p.add_argument("--config", help="env/behavior/action config JSON")
    p.add_argument("--seed", type=int, default=0, help="seed for every stage")
    p.add_argument("--n-users", type=int, default=1500, help="logged cycles to generate")
    p.add_argument("--steps", type=int, default=2000, help="training steps")
    p.add_argument("--xi", type=float, default=0.3, help="behavior-probability ratio threshold")
    p.add_argument("--budget", type=float, default=0.87, help="average budget per customer per day")
    p.add_argument("--days", type=int, default=7, help="virtual days to simulate")
    p.add_argument("--arrivals", type=int, default=120, help="new users per day")
    return parser


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise FileNotFoundError(f"{what} path is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _snapshot(out_path: Path, command: str, resolved: dict) -> None:
    payload = {"command": command, "resolved": resolved}
    _write_json(out_path.with_name(out_path.name + ".config.json"), payload)


def _load_config_arg(path: str | None):
    if path is None:
        return default_config()
    return load_config(_require_file(path, "config"))


def _hyper_from_args(args) -> HyperParams:
    hidden = tuple(int(w) for w in str(args.hidden).split(",") if w)
    return HyperParams(gamma=args.gamma, xi=args.xi, kappa=args.kappa,
                       learning_rate=args.lr, batch_size=args.batch_size,
                       training_steps=args.steps, seed=args.seed,
                       hidden_sizes=hidden, optimizer=args.optimizer)


def cmd_generate_data(args) -> int:
    env_config, behavior, actions = _load_config_arg(args.config)
    env = CheckinEnv(env_config, actions)
    dataset = generate_dataset(env, behavior, args.n_users, args.seed)
    violations = validate_dataset(dataset, actions, env_config.feature_dim)
    if violations:
        return _fail(f"generated dataset failed validation: {violations[:3]}")
    out = Path(args.out)
    write_dataset(out, dataset, actions, env_config.feature_dim, env_config.bonuses_per_cycle)
    _snapshot(out / "run", "generate-data", {
        "n_users": args.n_users, "seed": args.seed,
        "config": config_to_dict(env_config, behavior, actions),
    })
    print(f"wrote {len(dataset)} trajectories to {out}")
    return 0


def cmd_train(args) -> int:
    dataset_dir = _require_file(args.dataset, "dataset")
    dataset, manifest = load_dataset(dataset_dir)
    actions = ActionSet.from_dict(manifest["actions"])
    hyper = _hyper_from_args(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.policy == "bcq":
        agent = bcq_train(dataset, actions, hyper)
        agent.save(out)
        if args.log:
            with open(args.log, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=["step", "loss", "behavior_agreement"])
                writer.writeheader()
                writer.writerows(agent.training_log)
    else:
        model = train_reward_model(dataset, actions, hyper)
        model.save(out)

    _snapshot(out, "train", {
        "policy": args.policy, "dataset": dataset_dir.name,
        "hyper": {**hyper.__dict__, "hidden_sizes": list(hyper.hidden_sizes)},
    })
    print(f"saved {args.policy} model to {out}")
    return 0


def _read_q_matrix_csv(path: Path):
    with path.open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        costs_cents = tuple(cents(float(h)) for h in header)
        rows = []
        for row in reader:
            rows.append([float(v) if v.strip() else np.nan for v in row])
    return np.asarray(rows, dtype=float), costs_cents


def cmd_allocate(args) -> int:
    if (args.q_matrix is None) == (args.stream is None):
        return _fail("allocate needs exactly one of --q-matrix (batch) or --stream")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    budget_cents = cents(args.budget)

    if args.q_matrix:
        q, costs_cents = _read_q_matrix_csv(_require_file(args.q_matrix, "q-matrix"))
        problem = AllocationProblem(q, costs_cents, budget_cents)
        result = solve_and_assign(problem)
        with out.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["customer", "action_index", "cost_units", "q_value"])
            for i, a in enumerate(result.chosen):
                writer.writerow([i, a, f"{units(costs_cents[a]):.2f}", repr(float(q[i, a]))])
        summary = {
            "lambda": result.lam,
            "objective": result.objective,
            "total_cost_units": units(result.total_cost_cents),
            "mean_cost_units": units(result.total_cost_cents) / problem.n,
            "budget_units": args.budget,
            "customers": problem.n,
        }
        _write_json(out.with_suffix(".summary.json"), summary)
        _snapshot(out, "allocate", {"mode": "batch", "budget_units": args.budget})
        print(f"assigned {problem.n} customers: lambda={result.lam:.6g} "
              f"mean cost={summary['mean_cost_units']:.4f}")
        return 0

    if not args.costs:
        return _fail("stream mode needs --costs (comma-separated units)")
    costs_cents = tuple(cents(float(c)) for c in args.costs.split(","))
    store = WindowStore(costs_cents, budget_cents,
                        window_span=args.window_hours * 3600.0,
                        refresh_period=args.refresh_minutes * 60.0)
    timeline = []
    next_refresh: float | None = None
    with _require_file(args.stream, "stream").open() as f_in, out.open("w") as f_out:
        for line in f_in:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            ts = float(rec["ts"])
            if next_refresh is None:
                next_refresh = ts + store.refresh_period
            while next_refresh <= ts:
                lam = store.window_refresh(next_refresh)
                timeline.append({"ts": next_refresh, "lam": lam, "window": len(store)})
                next_refresh += store.refresh_period
            q_row = np.array([np.nan if v is None else float(v) for v in rec["q"]])
            action = store.allocate_online(q_row, ts)
            f_out.write(json.dumps({"ts": ts, "action_index": action,
                                    "cost_units": units(costs_cents[action]),
                                    "lam": store.lambda_snapshot}) + "\n")
    if args.lambda_timeline:
        with open(args.lambda_timeline, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["ts", "lam", "window"])
            writer.writeheader()
            writer.writerows(timeline)
    _snapshot(out, "allocate", {"mode": "stream", "budget_units": args.budget,
                                "window_hours": args.window_hours,
                                "refresh_minutes": args.refresh_minutes})
    print(f"processed stream; final lambda={store.lambda_snapshot:.6g}")
    return 0


def _policy_from_args(args, actions, env_config, behavior):
    if args.policy == "bcq":
        agent = BcqAgent.load(_require_file(args.model, "model"))
        return BcqPolicy(agent, xi=getattr(args, "xi", None))
    if args.policy in ("lr-greedy", "lr-lp"):
        return RewardModelPolicy(RewardModel.load(_require_file(args.model, "model")))
    if args.policy == "expert":
        return ExpertPolicy(table=behavior.table, n_segments=env_config.n_segments,
                            actions=actions)
    if args.policy == "cheapest":
        return CheapestPolicy(actions)
    if args.policy == "random":
        return UniformRandomPolicy(actions, seed=args.seed)
    raise ValueError(f"unknown policy {args.policy!r}")


def cmd_evaluate(args) -> int:
    dataset_dir = _require_file(args.dataset, "dataset")
    dataset, manifest = load_dataset(dataset_dir)
    actions = ActionSet.from_dict(manifest["actions"])
    env_config, behavior, _ = _load_config_arg(args.config)
    policy = _policy_from_args(args, actions, env_config, behavior)
    matched = match_records(dataset, policy, full_trajectory=args.full_trajectory)
    if matched.matched_steps == 0:
        return _fail("policy matched no logged records; metrics undefined")
    report = offline_report(matched)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {**report.to_dict(), "match_rate": matched.match_rate,
                      "total_trajectories": matched.total_trajectories})
    _snapshot(out, "evaluate", {"policy": args.policy, "dataset": dataset_dir.name,
                                "full_trajectory": args.full_trajectory})
    print(f"matched {matched.matched_trajectories}/{matched.total_trajectories} trajectories: "
          f"retention={report.retention_rate:.4f} avg_cost={report.avg_cost_units:.4f}")
    return 0


def cmd_simulate(args) -> int:
    env_config, behavior, actions = _load_config_arg(args.config)
    env = CheckinEnv(env_config, actions)
    policy = _policy_from_args(args, actions, env_config, behavior)
    store = None
    if args.policy in ("bcq", "lr-lp"):
        store = WindowStore(actions.all_cents, cents(args.budget))
    report = simulate_online(env, policy, store, args.days, args.arrivals, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report.to_dict())
    if args.timeline:
        with open(args.timeline, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["day", "claims", "retention",
                                                   "avg_cost_units", "lam"])
            writer.writeheader()
            writer.writerows(report.per_day)
    _snapshot(out, "simulate", {
        "policy": args.policy, "budget_units": args.budget, "days": args.days,
        "arrivals": args.arrivals, "seed": args.seed,
        "config": config_to_dict(env_config, behavior, actions),
    })
    print(f"simulated {args.days} days: retention={report.retention_rate:.4f} "
          f"avg_cost={report.avg_cost_units:.4f}")
    return 0


def cmd_pipeline(args) -> int:
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    env_config, behavior, actions = _load_config_arg(args.config)

    dataset_dir = workdir / "dataset"
    env = CheckinEnv(env_config, actions)
    dataset = generate_dataset(env, behavior, args.n_users, args.seed)
    violations = validate_dataset(dataset, actions, env_config.feature_dim)
    if violations:
        return _fail(f"generated dataset failed validation: {violations[:3]}")
    write_dataset(dataset_dir, dataset, actions, env_config.feature_dim,
                  env_config.bonuses_per_cycle)

    hyper = HyperParams(xi=args.xi, training_steps=args.steps, seed=args.seed,
                        hidden_sizes=(64, 64), learning_rate=0.01, optimizer="adam")
    agent = bcq_train(dataset, actions, hyper)
    model_path = workdir / "model.json"
    agent.save(model_path)
    with (workdir / "training_log.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "loss", "behavior_agreement"])
        writer.writeheader()
        writer.writerows(agent.training_log)

    store = WindowStore(actions.all_cents, cents(args.budget))
    sim_env = CheckinEnv(env_config, actions)
    sim_report = simulate_online(sim_env, BcqPolicy(agent), store, args.days,
                                 args.arrivals, args.seed)
    _write_json(workdir / "simulate_report.json", sim_report.to_dict())
    with (workdir / "timeline.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["day", "claims", "retention",
                                               "avg_cost_units", "lam"])
        writer.writeheader()
        writer.writerows(sim_report.per_day)

    matched = match_records(dataset, BcqPolicy(agent))
    eval_payload = ({**offline_report(matched).to_dict(), "match_rate": matched.match_rate}
                    if matched.matched_steps else {"matched_steps": 0})
    _write_json(workdir / "eval_report.json", eval_payload)

    _write_json(workdir / "run_config.json", {
        "command": "pipeline", "seed": args.seed, "n_users": args.n_users,
        "steps": args.steps, "xi": args.xi, "budget_units": args.budget,
        "days": args.days, "arrivals": args.arrivals,
        "config": config_to_dict(env_config, behavior, actions),
        "artifacts": {"dataset": "dataset", "model": "model.json",
                      "training_log": "training_log.csv",
                      "simulate_report": "simulate_report.json",
                      "timeline": "timeline.csv", "eval_report": "eval_report.json"},
    })
    print(f"pipeline complete: retention={sim_report.retention_rate:.4f} "
          f"avg_cost={sim_report.avg_cost_units:.4f} (budget {args.budget})")
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "allocate": cmd_allocate,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        return _fail(str(exc))
    except (ValueError, KeyError) as exc:
        return _fail(f"invalid input: {exc}")


if __name__ == "__main__":
    sys.exit(main())
