"""Command-line driver: build, plan, query and bench.

Flags use kebab-case; the original camel/underscore spellings (``--NMachine``,
``--Pruning_Configuration``, ``--Indexing_Parameters``, ``--α``, ``--Mode``) are
accepted as aliases.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchKnobs, GroundTruth, bench_run, prune_table_csv, recall_at_k, zipf_workload
from .datasets import Dataset, load_dataset, read_vectors, synthetic_dataset
from .errors import BadParam, HybridAnnError, MissingIndex
from .index import VectorBatch, assign_to_lists, load_index, save_index, train_centroids
from .planner import MODES, WorkloadProfile, coefficients_from_rates, cost_table, normalize_mode, plans_for_mode, select_plan
from .planner import PartitionPlan
from .runtime import SimConfig, build_cells, run_cluster

INDEX_FILE = "index.bin"
PLAN_FILE = "plan.json"
_TRUE = {"on", "true", "1", "yes", "enable", "enabled"}
_FALSE = {"off", "false", "0", "no", "disable", "disabled"}


def _on_off(text: str) -> bool:
    t = str(text).strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _mode(text: str) -> str:
    try:
        return normalize_mode(text)
    except BadParam as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a value >= 0, got {text}")
    return v


def _shape(text: str) -> tuple[int, int]:
    try:
        n, d = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected NxD such as 10000x128, got {text!r}") from exc
    if n < 1 or d < 1:
        raise argparse.ArgumentTypeError("N and D must be positive")
    return n, d


class _IndexingParams(argparse.Action):
    """``--Indexing_Parameters nlist=64 nprobe=8`` sets the matching options."""

    allowed = {"nlist", "nprobe", "dim", "k"}

    def __call__(self, parser, namespace, values, option_string=None):
        for item in values:
            key, sep, val = item.partition("=")
            key = key.strip().lower()
            if not sep or key not in self.allowed:
                parser.error(f"{option_string}: expected key=value with key in {sorted(self.allowed)}, got {item!r}")
            try:
                setattr(namespace, key, _positive_int(val))
            except (ValueError, argparse.ArgumentTypeError):
                parser.error(f"{option_string}: {key} must be a positive integer, got {val!r}")


def _add_cluster_flags(p: argparse.ArgumentParser, *, with_k: bool = True) -> None:
    p.add_argument("--n-machine", "--NMachine", dest="n_machine", type=_positive_int, default=4,
                   help="number of worker nodes (default: %(default)s)")
    p.add_argument("--pruning", "--Pruning_Configuration", dest="pruning", type=_on_off, nargs="?", const=True,
                   default=True, help="dimension-level pruning on/off; bare flag means on (default: on)")
    p.add_argument("--nlist", type=_positive_int, default=64, help="number of k-means lists (default: %(default)s)")
    p.add_argument("--nprobe", type=_positive_int, default=8, help="lists scanned per query (default: %(default)s)")
    p.add_argument("--dim", type=_positive_int, default=None, help="expected vector dimension; checked against the data")
    p.add_argument("--Indexing_Parameters", "--indexing-parameters", nargs="+", action=_IndexingParams,
                   metavar="KEY=VALUE", help="alternative spelling for nlist/nprobe/dim/k")
    p.add_argument("--alpha", "--α", dest="alpha", type=_non_negative, default=1.0,
                   help="weight of load imbalance in plan selection (default: %(default)s)")
    p.add_argument("--mode", "--Mode", dest="mode", type=_mode, default="harmony",
                   help=f"one of {', '.join(MODES)} (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="seed for k-means, prewarm and workloads (default: %(default)s)")
    if with_k:
        p.add_argument("--k", type=_positive_int, default=10, help="neighbours per query (default: %(default)s)")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--base", type=Path, help="base vectors (.fvecs/.bvecs/.npy)")
    p.add_argument("--queries", type=Path, help="query vectors (.fvecs/.bvecs/.npy)")
    p.add_argument("--truth", type=Path, help="ground-truth ids (.ivecs); computed exactly when omitted")
    p.add_argument("--synthetic", type=_shape, metavar="NxD", help="Gaussian-mixture base set, e.g. 10000x128")
    p.add_argument("--q-count", type=_positive_int, default=200, help="query count for synthetic data (default: %(default)s)")


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--transport", choices=("sim", "socket"), default="sim", help="(default: %(default)s)")
    p.add_argument("--latency-us", type=_non_negative, default=5.0, help="simulated link latency (default: %(default)s)")
    p.add_argument("--bandwidth", type=float, default=12500.0, help="simulated bytes per microsecond (default: %(default)s)")
    p.add_argument("--us-per-float", type=_non_negative, default=0.001, help="simulated compute cost (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridann", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="train the index, pick a partition plan, write both")
    _add_data_flags(b)
    _add_cluster_flags(b, with_k=False)
    b.add_argument("--kmeans-iters", type=_positive_int, default=25, help="(default: %(default)s)")
    b.add_argument("--out", type=Path, required=True, help="output directory")

    pl = sub.add_parser("plan", help="re-plan an existing index and print the cost table")
    pl.add_argument("--index", type=Path, required=True, help="directory written by build")
    pl.add_argument("--queries", type=Path, help="workload vectors; defaults to sampled base vectors")
    _add_cluster_flags(pl, with_k=False)

    q = sub.add_parser("query", help="answer queries on the partitioned index")
    q.add_argument("--index", type=Path, required=True, help="directory written by build")
    q.add_argument("--queries", type=Path, help="query vectors; otherwise --sample-queries are synthesised")
    q.add_argument("--sample-queries", type=_positive_int, default=10, help="(default: %(default)s)")
    q.add_argument("--recall", action="store_true", help="also report recall against exact search")
    _add_cluster_flags(q)
    _add_sim_flags(q)

    be = sub.add_parser("bench", help="run a benchmark and write JSON/CSV reports")
    _add_data_flags(be)
    _add_cluster_flags(be)
    _add_sim_flags(be)
    be.add_argument("--skew", type=_non_negative, default=None, help="Zipf exponent for a synthetic skewed workload")
    be.add_argument("--report", type=Path, help="JSON report path")
    be.add_argument("--csv", type=Path, help="pruning table CSV path")
    return parser


# -- helpers ------------------------------------------------------------------


def _check_dim(args, d: int) -> None:
    if args.dim is not None and args.dim != d:
        raise BadParam(f"--dim {args.dim} does not match the data dimension {d}")


def _dataset(args) -> Dataset:
    if args.synthetic:
        n, d = args.synthetic
        return synthetic_dataset(n, d, args.q_count, seed=args.seed)
    if not args.base:
        raise BadParam("give --base (and --queries) or --synthetic NxD")
    if not args.base.exists():
        raise FileNotFoundError(f"{args.base} does not exist")
    if args.queries:
        return load_dataset(args.base, args.queries, args.truth)
    base = VectorBatch.from_array(read_vectors(args.base))
    return Dataset(args.base.stem, base, VectorBatch.from_array(np.empty((0, base.dim), np.float32)))


def _profile_queries(base: VectorBatch, queries: VectorBatch | None, seed: int, count: int = 256) -> np.ndarray:
    if queries is not None and queries.count:
        return queries.data
    rng = np.random.default_rng(seed)
    rows = rng.choice(base.count, size=min(count, base.count), replace=False)
    return base.data[np.sort(rows)]


def _choose_plan(args, index, base, queries):
    coeffs = coefficients_from_rates(getattr(args, "us_per_float", 0.001), getattr(args, "bandwidth", 12500.0))
    profile = WorkloadProfile.from_queries(_profile_queries(base, queries, args.seed), index, min(args.nprobe, index.nlist))
    candidates = plans_for_mode(args.mode, args.n_machine, index.dim, index.nlist, index.list_sizes())
    plan = select_plan(candidates, profile, coeffs, args.alpha)
    return plan, cost_table(candidates, profile, coeffs, args.alpha)


def _load(index_dir: Path):
    path = index_dir / INDEX_FILE
    if not path.exists():
        raise MissingIndex(f"no index at {path}; run `hybridann build` first")
    index, base = load_index(path)
    plan_path = index_dir / PLAN_FILE
    plan = PartitionPlan.from_json(plan_path.read_text()) if plan_path.exists() else None
    return index, base, plan


def _print_costs(rows) -> None:
    print("n_vec n_dim    query_cost   imbalance   total_cost")
    for r in rows:
        print(f"{r['n_vec']:>5} {r['n_dim']:>5} {r['query_cost_ms']:>13.4f} {r['imbalance_ms']:>11.4f} {r['total_cost']:>12.4f}")


# -- commands -----------------------------------------------------------------


def cmd_build(args) -> int:
    ds = _dataset(args)
    _check_dim(args, ds.base.dim)
    t0 = time.perf_counter()
    trained = train_centroids(ds.base, args.nlist, iters=args.kmeans_iters, seed=args.seed)
    t1 = time.perf_counter()
    index = assign_to_lists(ds.base, trained)
    t2 = time.perf_counter()
    plan, costs = _choose_plan(args, index, ds.base, ds.queries)
    cells = build_cells(ds.base, index, plan)
    t3 = time.perf_counter()

    args.out.mkdir(parents=True, exist_ok=True)
    save_index(args.out / INDEX_FILE, index, ds.base)
    (args.out / PLAN_FILE).write_text(plan.to_json())
    resident = sum(c.resident_floats for c in cells.values())
    print(f"Train       {t1 - t0:8.3f} s  ({index.nlist} lists, dim {index.dim})")
    print(f"Add         {t2 - t1:8.3f} s  ({ds.base.count} vectors)")
    print(f"Pre-assign  {t3 - t2:8.3f} s  (plan {plan.n_vec}x{plan.n_dim}, mode {args.mode})")
    _print_costs(costs)
    print(f"wrote {args.out / INDEX_FILE} and {args.out / PLAN_FILE}")
    return 0 if resident == ds.base.count * ds.base.dim else 1


def cmd_plan(args) -> int:
    index, base, _ = _load(args.index)
    _check_dim(args, index.dim)
    queries = VectorBatch.from_array(read_vectors(args.queries)) if args.queries else None
    plan, costs = _choose_plan(args, index, base, queries)
    _print_costs(costs)
    (args.index / PLAN_FILE).write_text(plan.to_json())
    print(f"selected plan {plan.n_vec}x{plan.n_dim}; wrote {args.index / PLAN_FILE}")
    return 0


def cmd_query(args) -> int:
    index, base, plan = _load(args.index)
    _check_dim(args, index.dim)
    if args.queries:
        queries = VectorBatch.from_array(read_vectors(args.queries))
    else:
        queries = zipf_workload(index, args.sample_queries, 0.0, args.seed, base=base)
    if plan is None or plan.n_nodes != args.n_machine:
        plan, _ = _choose_plan(args, index, base, queries)
    nprobe = min(args.nprobe, index.nlist)
    config = SimConfig(plan.n_nodes + 1, args.latency_us, args.bandwidth, args.seed, args.us_per_float)
    run = run_cluster(base, index, plan, queries, args.k, nprobe, prune=args.pruning,
                      transport=args.transport, config=config, seed=args.seed)
    for qid, res in run.results.items():
        for rank, (vid, dist) in enumerate(res.pairs()):
            print(f"{qid}\t{rank}\t{vid}\t{dist:.6f}")
    ok = int(run.resident_floats.sum()) == base.count * base.dim and run.ledger.consistent()
    if args.recall:
        truth = GroundTruth.compute(base, queries, args.k)
        print(f"# recall@{args.k} {recall_at_k(run.results, truth, args.k):.4f}", file=sys.stderr)
    return 0 if ok else 1


def cmd_bench(args) -> int:
    ds = _dataset(args)
    _check_dim(args, ds.base.dim)
    if ds.queries.count == 0 and args.skew is None:
        raise BadParam("bench needs --queries, --synthetic, or --skew")
    knobs = BenchKnobs(
        n_machine=args.n_machine, nlist=args.nlist, nprobe=min(args.nprobe, args.nlist), k=args.k,
        pruning=args.pruning, alpha=args.alpha, seed=args.seed, transport=args.transport, skew=args.skew,
        q_count=args.q_count if args.skew is not None else None,
        latency_us=args.latency_us, bandwidth_bytes_per_us=args.bandwidth, us_per_float=args.us_per_float,
    )
    report = bench_run(ds, args.mode, knobs)
    print(report.table())
    if args.report:
        args.report.write_text(report.to_json() + "\n")
    if args.csv:
        args.csv.write_text(prune_table_csv([(ds.name, report.prune)]))
    failed = [name for name, ok in report.doc["audits"].items() if not ok]
    for name in failed:
        print(f"audit failed: {name}", file=sys.stderr)
    return 0 if not failed else 1


COMMANDS = {"build": cmd_build, "plan": cmd_plan, "query": cmd_query, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (HybridAnnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
