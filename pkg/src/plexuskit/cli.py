"""Command-line entry point: ``plexuskit {preprocess,train,rank-configs,validate}``.

Exit codes: 0 ok, 1 validation failure, 2 input error, 3 output error,
4 resource error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import perf_model as pm
from .graph_prep import (balance_metric, dataset_from_edges, load_edge_list, permute_csr,
                         prepare, synth_dataset)
from .grid import enumerate_configs, make_grid, write_comm_stats_csv
from .shardio import ShardError, ShardManifest, encode_file, write_shards
from .tensor_core import ContractError
from .trainer import NonFiniteLossError, TrainConfig, serial_train, train_epochs, write_metrics_csv

EXIT_OK, EXIT_VALIDATION, EXIT_INPUT, EXIT_OUTPUT, EXIT_RESOURCE = range(5)
VALIDATE_RTOL = 1e-9


class InputError(Exception):
    pass


class OutputError(Exception):
    pass


# --- argument helpers ---------------------------------------------------------

def parse_grid(text: str):
    if text == "auto":
        return "auto"
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; expected X,Y,Z or auto") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; expected three positive integers")
    return dims


def parse_synthetic(text: str) -> tuple[str, dict]:
    """``sbm:nodes=256,communities=4`` -> ("sbm", {...})."""
    kind, _, rest = text.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, eq, val = item.partition("=")
        if not eq:
            raise InputError(f"bad synthetic parameter {item!r}")
        params[key.strip()] = float(val) if any(ch in val for ch in ".e") else int(val)
    return kind, params


def _ensure_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_csv(path: Path, rows: list[dict]):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["empty"])
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _load_manifest(path) -> ShardManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise InputError(f"manifest not found: {p}")
    return ShardManifest.load(p)


def _dataset(args):
    """Synthetic or edge-list input as a GraphDataset."""
    if getattr(args, "synthetic", None):
        kind, params = parse_synthetic(args.synthetic)
        return synth_dataset(kind, params, seed=args.data_seed)
    if not getattr(args, "input", None):
        raise InputError("need --input or --synthetic")
    try:
        n, edges = load_edge_list(args.input, args.num_nodes)
        feats = np.load(args.features) if args.features else None
        labels = np.load(args.labels) if args.labels else None
    except OSError as exc:
        raise InputError(f"cannot read input: {exc}") from exc
    return dataset_from_edges(n, edges, feats, labels, num_features=args.num_features,
                              num_classes=args.num_classes, seed=args.data_seed,
                              name=Path(args.input).stem, directed=args.directed)


def _coefficients(path) -> pm.PerfCoefficients:
    if path:
        try:
            return pm.PerfCoefficients.load(path)
        except (OSError, KeyError, ValueError) as exc:
            raise InputError(f"cannot read coefficients {path}: {exc}") from exc
    print(f"warning: no coefficients given; using defaults {pm.DEFAULT_COEFFICIENTS}", file=sys.stderr)
    return pm.PerfCoefficients()


def _machine(path, precision="f32") -> pm.MachineParams:
    if not path:
        return pm.MachineParams(bytes_per_scalar=8 if precision == "f64" else 4)
    try:
        return pm.MachineParams.load(path)
    except (OSError, ValueError, TypeError) as exc:
        raise InputError(f"cannot read machine file {path}: {exc}") from exc


def _train_config(args, **over) -> TrainConfig:
    kw = dict(layers=args.layers, hidden=args.hidden, epochs=args.epochs, lr=args.lr,
              seed=args.seed, precision=args.precision, block_count=args.block_count,
              deterministic=args.deterministic)
    kw.update(over)
    return TrainConfig(**kw)


# --- subcommands --------------------------------------------------------------

def cmd_preprocess(args) -> int:
    ds = _dataset(args)
    g = prepare(ds, seed=args.seed)
    single = permute_csr(g.adjacency, g.perm.row, np.arange(g.num_nodes))
    print(f"dataset {g.name}: {g.num_nodes} nodes, {g.adjacency.nnz} nonzeros")
    print(f"balance original  {balance_metric(g.adjacency, args.p, args.q):.4f}")
    print(f"balance single    {balance_metric(single, args.p, args.q):.4f}")
    print(f"balance double    {balance_metric(g.a_even, args.p, args.q):.4f}")
    out = _ensure_dir(args.out)
    try:
        m = write_shards(g, args.p, args.q, out, args.precision)
    except OSError as exc:
        raise OutputError(f"cannot write shards to {out}: {exc}") from exc
    print(f"wrote {len(m.shards)} shard files ({m.total_bytes()} bytes) to {out}")
    return EXIT_OK


def choose_grid(g_total: int, stats: pm.DatasetStats, machine, coeffs):
    ranked = pm.rank_configs(g_total, stats, machine, coeffs)
    return ranked[0].config, ranked


def cmd_train(args) -> int:
    manifest = _load_manifest(args.manifest)
    cfg = _train_config(args)
    if args.grid == "auto":
        if not args.machine:
            raise InputError("--grid auto requires --machine")
        if not args.gpus:
            raise InputError("--grid auto requires --gpus")
        stats = pm.DatasetStats(manifest.num_nodes, manifest.nnz,
                                cfg.layer_dims(manifest.num_features, manifest.num_classes))
        dims, _ = choose_grid(args.gpus, stats, _machine(args.machine), _coefficients(args.coeffs))
        print(f"auto grid: {dims[0]},{dims[1]},{dims[2]}")
    else:
        dims = args.grid
    grid = make_grid(*dims)
    out = _ensure_dir(args.out)
    t0 = time.perf_counter()
    result = train_epochs(manifest, grid, cfg)
    for m in result.epochs:
        print(f"epoch {m.epoch:3d} loss {m.loss:.6f} acc {m.train_acc:.4f}")
    try:
        write_metrics_csv(out / "metrics.csv", result)
        write_comm_stats_csv(out / "comm_stats.csv", result.stats)
        blob, _ = encode_file({f"W{i}": w for i, w in enumerate(result.weights)}
                              | {"features": result.features}, cfg.precision)
        (out / "model.plxs").write_bytes(blob)
    except OSError as exc:
        raise OutputError(f"cannot write results to {out}: {exc}") from exc
    _write_csv(out / "summary.csv", [summary_row(result, dims, time.perf_counter() - t0)])
    return EXIT_OK


def summary_row(result, dims, wall: float) -> dict:
    """Mean over epochs 3..10 (1-based), or all epochs when fewer exist."""
    window = result.epochs[2:] or result.epochs
    row = {"gx": dims[0], "gy": dims[1], "gz": dims[2], "epochs": len(result.epochs),
           "window": len(window), "wall_seconds": f"{wall:.6f}"}
    if window:
        row["final_loss"] = repr(result.epochs[-1].loss)
        for ph in ("epoch", "forward_spmm", "forward_gemm", "backward", "optimizer", "collectives"):
            row[f"mean_{ph}"] = f"{np.mean([m.times.get(ph, 0.0) for m in window]):.6f}"
        row["bytes_per_epoch"] = int(np.mean([m.comm.total_bytes() for m in window]))
    return row


def cmd_rank_configs(args) -> int:
    if args.manifest:
        m = _load_manifest(args.manifest)
        dims = [m.num_features] + [args.hidden] * (args.layers - 1) + [m.num_classes]
        stats = pm.DatasetStats(m.num_nodes, m.nnz, dims)
    elif args.stats:
        try:
            n, nnz, d = args.stats.split(",")
            stats = pm.DatasetStats(int(n), int(nnz), [int(v) for v in d.split(";")])
        except ValueError as exc:
            raise InputError(f"bad --stats {args.stats!r}; expected N,NNZ,D0;D1;...") from exc
    else:
        raise InputError("rank-configs needs --manifest or --stats")
    ranked = pm.rank_configs(args.gpus, stats, _machine(args.machine, args.precision),
                             _coefficients(args.coeffs))
    rows = [{"gx": p.config[0], "gy": p.config[1], "gz": p.config[2],
             "spmm_s": f"{p.spmm:.6e}", "comm_s": f"{p.comm_total:.6e}",
             "total_s": f"{p.total:.6e}", "clamped": int(p.clamped)} for p in ranked]
    print(f"{'Gx':>4} {'Gy':>4} {'Gz':>4} {'spmm_s':>12} {'comm_s':>12} {'total_s':>12}")
    for r in rows:
        print(f"{r['gx']:>4} {r['gy']:>4} {r['gz']:>4} {r['spmm_s']:>12} {r['comm_s']:>12} "
              f"{r['total_s']:>12}")
    if args.out:
        _write_csv(_ensure_dir(args.out) / "rank_configs.csv", rows)
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.manifest:
        from .trainer import load_prepared
        g = load_prepared(_load_manifest(args.manifest))
    else:
        ds = synth_dataset(*parse_synthetic(args.synthetic or "sbm:nodes=256,communities=4,"
                                            "features=16,classes=4"), seed=args.data_seed)
        g = prepare(ds, seed=args.seed)
    cfg = _train_config(args, precision="f64", deterministic=True)
    t0 = time.perf_counter()
    ref = [m.loss for m in serial_train(g, cfg)[0]]
    rows, failures = [], []
    for dims in enumerate_configs(args.gpus):
        res = train_epochs(g, make_grid(*dims), _train_config(args, precision="f64",
                                                               deterministic=True,
                                                               fault=args.inject_fault))
        rel = [abs(a - b) / max(abs(b), 1e-300) for a, b in zip(res.losses, ref)]
        worst = max(rel, default=0.0)
        bad = [e for e, r in enumerate(rel) if not r <= VALIDATE_RTOL]
        status = "pass" if not bad else "FAIL"
        name = f"{dims[0]},{dims[1]},{dims[2]}"
        print(f"{name:>10} max_rel_dev {worst:.3e} {status}")
        rows.append({"gx": dims[0], "gy": dims[1], "gz": dims[2], "max_rel_dev": f"{worst:.6e}",
                     "status": status})
        if bad:
            failures.append((name, bad[0]))
    print(f"validated {len(rows)} configurations in {time.perf_counter() - t0:.2f}s")
    if args.out:
        _write_csv(_ensure_dir(args.out) / "validate.csv", rows)
    for name, epoch in failures:
        print(f"validation failed: grid {name} first deviates at epoch {epoch}", file=sys.stderr)
    return EXIT_VALIDATION if failures else EXIT_OK


# --- parser -------------------------------------------------------------------

def _model_flags(p):
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0, help="weight and permutation seed")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--block-count", type=int, default=None)


def _data_flags(p):
    p.add_argument("--input", help="edge list file ('src dst' per line)")
    p.add_argument("--synthetic", help="generator spec, e.g. sbm:nodes=4096,communities=8")
    p.add_argument("--features", help=".npy feature matrix for --input")
    p.add_argument("--labels", help=".npy label vector for --input")
    p.add_argument("--num-nodes", type=int, default=None)
    p.add_argument("--num-features", type=int, default=128)
    p.add_argument("--num-classes", type=int, default=32)
    p.add_argument("--directed", action="store_true")
    p.add_argument("--data-seed", type=int, default=0, help="seed for generated graph data")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plexuskit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalise, permute and shard a graph")
    _data_flags(p)
    p.add_argument("--p", type=int, default=8, help="row shard count")
    p.add_argument("--q", type=int, default=8, help="column shard count")
    p.add_argument("--seed", type=int, default=0, help="permutation seed")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a virtual 3D grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", type=parse_grid, default=(1, 1, 1))
    p.add_argument("--gpus", type=int, default=None, help="rank count for --grid auto")
    p.add_argument("--machine")
    p.add_argument("--coeffs")
    _model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank-configs", help="predict epoch time for every grid of G ranks")
    p.add_argument("--manifest")
    p.add_argument("--stats", help="N,NNZ,D0;D1;...;DL")
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--machine")
    p.add_argument("--coeffs")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rank_configs)

    p = sub.add_parser("validate", help="compare every grid of G ranks against the serial run")
    p.add_argument("--manifest")
    p.add_argument("--synthetic")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--gpus", type=int, default=8)
    p.add_argument("--inject-fault", default=None, help="collective tag to skip (negative control)")
    _model_flags(p)
    p.set_defaults(hidden=16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    except MemoryError as exc:
        print(f"error: out of memory: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (InputError, ShardError, ContractError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
