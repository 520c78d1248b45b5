"""``sopcc`` command line: instances, solving, datasets, training, evaluation, ablation."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

from . import __version__
from .dataset import TrainConfig, generate_dataset, load_dataset, train_model
from .executor import (GreedySolver, MctsSolver, OracleSolver, aggregate, csv_row,
                       run_batch, trial_seed, write_csv, write_records)
from .instance import Instance, InvalidInstanceError, generate_instance, make_rng
from .mcts import SearchParams
from .mpnn import GnnMctsSolver, MpnnModel, parse_mask
from .neural import TrainingDiverged
from .rollout import RolloutParams

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4
SOLVERS = ("mcts", "gnn-mcts", "rollout-greedy", "oracle")
RATIO_COLUMNS = ["instance", "numerator", "denominator", "r_ratio", "time_ratio"]

# Learned-solver figures reported for 20-vertex instances at B=2, P_f=0.1,
# printed as documentation targets next to measured rows.
REFERENCE_ROWS = {
    20: {"solver": "gnn-mcts", "mean_reward": 2.762, "mean_plan_time_s": 0.226, "failure_rate": 0.04},
}


class MissingArtifact(Exception):
    pass


def _probability(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"missing artifact: {p}")
    return p


def load_instances(spec: str) -> tuple[list[Instance], list[str]]:
    """A JSON file or a directory of them (sorted by name)."""
    p = _require(spec)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    if not files:
        raise MissingArtifact(f"no instance files in {p}")
    return [Instance.load(f) for f in files], [f.stem for f in files]


def _search_params(args) -> SearchParams:
    return SearchParams(expansions=args.expansions, z=args.z,
                        rollout=RolloutParams(S=args.S), p_f=args.p_f)


def make_solver(name: str, args):
    params = _search_params(args)
    if name == "mcts":
        return MctsSolver(params)
    if name == "rollout-greedy":
        return GreedySolver()
    if name == "oracle":
        return OracleSolver()
    if name == "gnn-mcts":
        if not args.q_net or not args.f_net:
            raise MissingArtifact("gnn-mcts needs --q-net and --f-net checkpoints")
        q = MpnnModel.load(_require(args.q_net))
        f = MpnnModel.load(_require(args.f_net))
        return GnnMctsSolver(q, f, params)
    raise ValueError(f"unknown solver {name!r}")


# ---------------------------------------------------------------- commands

def cmd_gen_instances(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        inst = generate_instance(args.n, args.budget, args.p_f, make_rng(trial_seed(args.seed, k), 2))
        inst.save(out / f"inst_{k:04d}.json")
    print(f"wrote {args.count} instances to {out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    insts, names = load_instances(args.instance)
    solver = make_solver(args.solver, args)
    recs = run_batch(insts[0], solver, args.seed, trials=args.trials, workers=1, names=names[:1] * args.trials)
    for r in recs:
        print(r.to_json())
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    params = SearchParams(expansions=args.expansions, z=args.z, rollout=RolloutParams(S=args.S))

    def progress(done, total):
        if done % 50 == 0 or done == total:
            print(f"{done}/{total} instances", file=sys.stderr, flush=True)

    meta = generate_dataset(args.out, args.sizes, args.instances, params, seed=args.seed,
                            budget=args.budget, p_f=args.p_f, progress=progress)
    print(json.dumps(meta.__dict__))
    return EXIT_OK


def cmd_train(args) -> int:
    _, examples = load_dataset(_require(args.dataset))
    cfg = TrainConfig(head=args.head, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      seed=args.seed, D=args.D, K=args.K, H=args.H, mask=parse_mask(args.mask))

    def report(epoch, tr, va):
        print(f"epoch {epoch}: train {tr:.6f} val {va:.6f}", file=sys.stderr, flush=True)

    model, curve = train_model(examples, cfg, on_epoch=report)
    model.save(args.out, extra={"dataset": str(args.dataset)})
    if args.curve:
        with open(args.curve, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss"])
            w.writeheader()
            w.writerows(curve.rows())
    print(f"saved {args.head}-net to {args.out}")
    return EXIT_OK


def ratio_row(set_name: str, num: str, den: str, aggs: dict) -> dict:
    a, b = aggs[num], aggs[den]
    r = a.mean_reward / b.mean_reward if b.mean_reward else math.nan
    t = b.mean_plan_time / a.mean_plan_time if a.mean_plan_time else math.nan
    return {"instance": set_name, "numerator": num, "denominator": den,
            "r_ratio": repr(r), "time_ratio": repr(t)}


def cmd_eval(args) -> int:
    insts, names = load_instances(args.instances)
    set_name = args.set_name or Path(args.instances).stem
    solvers = [make_solver(s, args) for s in args.solvers]
    if len(insts) == 1:
        batch, batch_names = insts[0], None
    else:
        batch, batch_names = insts, names
    rows, aggs, all_recs = [], {}, []
    for solver in solvers:
        recs = run_batch(batch, solver, args.seed, trials=args.trials if len(insts) == 1 else None,
                         names=batch_names)
        agg = aggregate(recs)
        aggs[solver.name] = agg
        all_recs.extend(recs)
        rows.append(csv_row(set_name, solver.name, insts[0], agg, args.seed, p_f=args.p_f))
        print(f"{set_name} {solver.name}: reward {agg.mean_reward:.4f} failure {agg.failure_rate:.3f} "
              f"plan {agg.mean_plan_time:.4f}s over {agg.trials} trials", file=sys.stderr, flush=True)
    ref = REFERENCE_ROWS.get(insts[0].n)
    if ref and insts[0].budget == 2.0:
        print(f"# reference ({insts[0].n} vertices, B=2): {ref['solver']} reward {ref['mean_reward']} "
              f"plan {ref['mean_plan_time_s']}s failure {ref['failure_rate']}", file=sys.stderr)
    write_csv(args.out_csv, rows)
    if args.out_trials:
        write_records(args.out_trials, all_recs)
    if args.ratios:
        pairs = [(num, den) for num in ("gnn-mcts",) for den in ("mcts", "oracle")
                 if num in aggs and den in aggs]
        write_csv(args.ratios, [ratio_row(set_name, n, d, aggs) for n, d in pairs], RATIO_COLUMNS)
    return EXIT_OK


def cmd_ablate(args) -> int:
    insts, names = load_instances(args.instances)
    set_name = args.set_name or Path(args.instances).stem
    rows = []
    params = _search_params(args)
    for spec in args.model:
        try:
            label, qpath, fpath = spec.split(":")
        except ValueError:
            raise ValueError(f"--model expects LABEL:QNET:FNET, got {spec!r}") from None
        q, f = MpnnModel.load(_require(qpath)), MpnnModel.load(_require(fpath))
        solver = GnnMctsSolver(q, f, params)
        recs = run_batch(insts if len(insts) > 1 else insts[0], solver, args.seed,
                         trials=None if len(insts) > 1 else args.trials,
                         names=names if len(insts) > 1 else None)
        agg = aggregate(recs)
        rows.append({"instance": set_name, "mask": label, "masked_attributes": " ".join(q.mask),
                     "mean_reward": repr(agg.mean_reward), "failure_rate": repr(agg.failure_rate),
                     "trials": agg.trials, "seed": args.seed})
        print(f"{label}: reward {agg.mean_reward:.4f} failure {agg.failure_rate:.3f}", file=sys.stderr)
    write_csv(args.out_csv, rows, ["instance", "mask", "masked_attributes", "mean_reward",
                                   "failure_rate", "trials", "seed"])
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_search(p):
    p.add_argument("--expansions", type=_positive_int, default=350)
    p.add_argument("--S", type=_positive_int, default=100, help="rollouts per evaluated child")
    p.add_argument("--z", type=float, default=0.3, help="UCTF exploration weight")
    p.add_argument("--p-f", type=_probability, default=None,
                   help="failure bound fed to the planner (default: the instance's own)")
    p.add_argument("--q-net")
    p.add_argument("--f-net")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sopcc", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-instances", help="write random instances as JSON files")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=_positive_int, default=100)
    p.add_argument("--budget", type=float, default=2.0)
    p.add_argument("--p-f", type=_probability, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_instances)

    p = sub.add_parser("solve", help="run trials of one solver on one instance, print JSON lines")
    p.add_argument("--instance", required=True)
    p.add_argument("--solver", choices=SOLVERS, default="mcts")
    p.add_argument("--trials", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _add_search(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gen-dataset", help="distil rollout-search statistics into training examples")
    p.add_argument("--sizes", type=int, nargs="+", default=[20])
    p.add_argument("--instances", type=_positive_int, required=True, help="instances per size")
    p.add_argument("--budget", type=float, default=2.0)
    p.add_argument("--p-f", type=_probability, default=0.1)
    p.add_argument("--expansions", type=_positive_int, default=350)
    p.add_argument("--S", type=_positive_int, default=100)
    p.add_argument("--z", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train a Q-net or F-net on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--head", choices=("q", "f"), required=True)
    p.add_argument("--epochs", type=_positive_int, default=30)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--D", type=_positive_int, default=32)
    p.add_argument("--K", type=_positive_int, default=16)
    p.add_argument("--H", type=_positive_int, default=32)
    p.add_argument("--mask", nargs="*", default=[], help="attributes or groups to zero out")
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="CSV file for per-epoch losses")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate solvers on an instance set, write CSV")
    p.add_argument("--instances", required=True, help="instance JSON file or directory")
    p.add_argument("--solvers", nargs="+", choices=SOLVERS, default=["mcts"])
    p.add_argument("--trials", type=_positive_int, default=100,
                   help="trials when the set is a single instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set-name")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-trials", help="JSON-lines file of every trial record")
    p.add_argument("--ratios", help="CSV file for gnn-mcts vs baseline ratio rows")
    _add_search(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare checkpoints trained with different attribute masks")
    p.add_argument("--instances", required=True)
    p.add_argument("--model", action="append", required=True, metavar="LABEL:QNET:FNET")
    p.add_argument("--trials", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set-name")
    p.add_argument("--out-csv", required=True)
    _add_search(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InvalidInstanceError, ValueError, KeyError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
