"""Training loop on the virtual grid, the serial reference, and data loading."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .engine import (AdjacencyShardSet, backward_all, build_adjacency_shards, build_shard_set,
                     default_block_count, forward_all)
from .graph_prep import PreparedGraph, PermutationPair, invert, make_rng, permute_csr
from .grid import Comm, CommStats, GridConfig, make_scheduler
from .layout import chunk_bounds, layer_bounds, plan_layouts
from .shardio import SectionReader, ShardManifest, read_permutation
from .tensor_core import (CsrMatrix, count_correct, csr_transpose, gemm, relu_backward,
                          relu_forward, resolve_dtype, softmax_cross_entropy, spmm)

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    layers: int = 3
    hidden: int = 128
    epochs: int = 10
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    precision: str = "f64"
    block_count: int | None = None
    deterministic: bool = True
    scheduler: str = "threaded"
    max_workers: int | None = None
    fault: str | None = None

    def layer_dims(self, num_features: int, num_classes: int) -> list[int]:
        return [num_features] + [self.hidden] * (self.layers - 1) + [num_classes]

    @property
    def dtype(self) -> np.dtype:
        return resolve_dtype(self.precision)


def init_model(dims: list[int], seed: int, dtype=np.float64) -> list[np.ndarray]:
    """Global Glorot-uniform weights; shard them afterwards so every grid
    starts from the same model."""
    if len(dims) < 2:
        raise ValueError("need at least one layer")
    rng = make_rng(seed)
    out = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        out.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
    return out


@dataclass
class AdamState:
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-2, betas=(0.9, 0.999), eps=1e-8) -> "AdamState":
        return cls(lr, betas, eps, 0, [np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params])

    def num_elements(self) -> int:
        return sum(a.size for a in self.m) + sum(a.size for a in self.v)


def adam_step(params: list, grads: list, state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_acc: float
    rank: int = -1
    times: dict = field(default_factory=dict)
    comm: CommStats = field(default_factory=CommStats)

    PHASES = ("load", "forward_spmm", "forward_gemm", "backward", "optimizer", "collectives", "epoch")

    def row(self) -> dict:
        out = {"epoch": self.epoch, "rank": "all" if self.rank < 0 else self.rank,
               "loss": repr(float(self.loss)), "train_acc": repr(float(self.train_acc))}
        for ph in self.PHASES:
            out[f"time_{ph}"] = f"{self.times.get(ph, 0.0):.6f}"
        out["bytes_total"] = self.comm.total_bytes()
        out["flops_spmm"] = self.comm.flops["spmm"]
        out["flops_spmm_bwd"] = self.comm.flops["spmm_bwd"]
        out["flops_gemm"] = self.comm.flops["gemm"]
        return out


@dataclass
class RankData:
    rank: int
    coords: tuple
    adjacency: AdjacencyShardSet
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    out_cols: tuple[int, int]
    bytes_read: int = 0
    files_read: int = 0


def shard_weights(full: list, grid: GridConfig, rank: int, n: int) -> list[np.ndarray]:
    dims = [full[0].shape[0]] + [w.shape[1] for w in full]
    coords = grid.coords(rank)
    out = []
    for layout, w in zip(plan_layouts(len(full)), full):
        bd = layer_bounds(layout, grid.dims, coords, n, dims[layout.layer], dims[layout.layer + 1])
        out.append(np.array(w[slice(*bd.w_rows), slice(*bd.w_cols)], copy=True))
    return out


def gather_weights(shards: dict[int, list], grid: GridConfig, dims: list[int], n: int) -> list:
    full = [np.zeros((dims[i], dims[i + 1]), dtype=shards[0][0].dtype) for i in range(len(dims) - 1)]
    for rank, ws in shards.items():
        coords = grid.coords(rank)
        for layout, w in zip(plan_layouts(len(full)), ws):
            bd = layer_bounds(layout, grid.dims, coords, n, dims[layout.layer], dims[layout.layer + 1])
            full[layout.layer][slice(*bd.w_rows), slice(*bd.w_cols)] = w
    return full


def gather_features(shards: dict[int, np.ndarray], grid: GridConfig, dims: list[int], n: int):
    layout = plan_layouts(1)[0]
    full = np.zeros((n, dims[0]), dtype=shards[0].dtype)
    for rank, f in shards.items():
        bd = layer_bounds(layout, grid.dims, grid.coords(rank), n, dims[0], dims[1])
        full[slice(*bd.f0_rows), slice(*bd.f_in_cols)] = f
    return full


def _rank_bounds(grid, rank, n, dims):
    layouts = plan_layouts(len(dims) - 1)
    coords = grid.coords(rank)
    first = layer_bounds(layouts[0], grid.dims, coords, n, dims[0], dims[1])
    last = layer_bounds(layouts[-1], grid.dims, coords, n, dims[-2], dims[-1])
    return coords, first, last


def rank_data_from_prepared(g: PreparedGraph, grid: GridConfig, rank: int, dims: list[int],
                            dtype=np.float64) -> RankData:
    n, num_layers = g.num_nodes, len(dims) - 1
    coords, first, last = _rank_bounds(grid, rank, n, dims)
    adj = build_adjacency_shards(g.a_even.astype(dtype), g.a_odd.astype(dtype), grid, rank,
                                 num_layers)
    order = g.output_order(num_layers)
    rows = slice(*last.out_rows)
    return RankData(rank, coords, adj,
                    np.array(g.features[slice(*first.f0_rows), slice(*first.f_in_cols)],
                             dtype=dtype, copy=True),
                    g.labels_by_order[order][rows], g.mask_by_order[order][rows], last.out_cols)


def load_rank_shards(manifest: ShardManifest, grid: GridConfig, rank: int, dims: list[int],
                     dtype=np.float64) -> RankData:
    """Read only the shard sections overlapping this rank's blocks."""
    n, num_layers = manifest.num_nodes, len(dims) - 1
    if dims[0] != manifest.num_features:
        raise ValueError(f"model expects {dims[0]} features, manifest has {manifest.num_features}")
    reader = SectionReader(manifest)
    coords, first, last = _rank_bounds(grid, rank, n, dims)
    names = ("a_even", "a_odd")
    adj = build_shard_set(lambda par, r0, r1, c0, c1: reader.csr(names[par], r0, r1, c0, c1).astype(dtype),
                          grid, rank, n, num_layers)
    feats = reader.features(*first.f0_rows, *first.f_in_cols).astype(dtype)
    order = "row" if (num_layers - 1) % 2 == 0 else "col"
    labels = reader.vector(f"labels_{order}", *last.out_rows)
    mask = reader.vector(f"mask_{order}", *last.out_rows)
    return RankData(rank, coords, adj, feats, labels, mask, last.out_cols,
                    reader.bytes_read, len(reader.files_touched))


def load_prepared(manifest: ShardManifest) -> PreparedGraph:
    """Reassemble the whole preprocessed dataset (serial/validation use)."""
    reader = SectionReader(manifest)
    n = manifest.num_nodes
    a_even = reader.csr("a_even", 0, n, 0, n)
    a_odd = reader.csr("a_odd", 0, n, 0, n)
    feats = reader.features(0, n, 0, manifest.num_features)
    prow, pcol = read_permutation(manifest)
    perm = PermutationPair(prow, pcol, manifest.permutation_seed)
    adjacency = permute_csr(a_even, invert(prow), invert(pcol))
    labels = {o: reader.vector(f"labels_{o}", 0, n) for o in ("row", "col")}
    masks = {o: reader.vector(f"mask_{o}", 0, n) for o in ("row", "col")}
    return PreparedGraph(manifest.dataset, adjacency, a_even, a_odd, perm, feats, labels, masks,
                         manifest.num_classes)


@dataclass
class TrainResult:
    grid: GridConfig
    dims: list[int]
    epochs: list[EpochMetrics]
    rank_metrics: dict[int, list[EpochMetrics]]
    stats: dict[int, CommStats]
    weights: list[np.ndarray]
    features: np.ndarray
    bytes_read: dict[int, int]
    optimizer_elements: dict[int, int]
    log: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [m.loss for m in self.epochs]


def _rank_program(comm: Comm, data: RankData, weights: list, cfg: TrainConfig,
                  opt: AdamState, block_counts: list[int], out: list):
    layouts = plan_layouts(len(weights))
    last = layouts[-1]
    st = comm.stats
    cnt = yield from comm.all_reduce(np.array([[data.mask.sum()]], np.float64), last.row,
                                     tag="loss_count")
    count = int(round(cnt[0, 0]))
    for epoch in range(cfg.epochs):
        before = st.snapshot()
        t_epoch = time.perf_counter()
        logits, caches = yield from forward_all(comm, data.adjacency, data.features, weights,
                                                block_counts)
        full = yield from comm.all_gather(logits, last.inner, dim=1, tag="loss_gather_logits")
        loss_part, dfull = softmax_cross_entropy(full, data.labels, data.mask, count=count)
        correct = count_correct(full, data.labels, data.mask)
        red = yield from comm.all_reduce(np.array([[loss_part, correct]], np.float64), last.row,
                                         tag="loss_reduce")
        loss = float(red[0, 0])
        if not np.isfinite(loss):
            raise NonFiniteLossError(epoch, loss)
        dlogits = np.ascontiguousarray(dfull[:, slice(*data.out_cols)])
        dF0, grads = yield from backward_all(comm, data.adjacency, dlogits, caches, weights)
        t0 = time.perf_counter()
        adam_step(weights + [data.features], grads + [dF0], opt)
        st.times["optimizer"] += time.perf_counter() - t0
        st.times["epoch"] += time.perf_counter() - t_epoch
        delta = st.snapshot() - before
        out.append(EpochMetrics(epoch, loss, float(red[0, 1]) / count, comm.rank,
                                dict(delta.times), delta))
    return out


def train_epochs(source, grid: GridConfig, cfg: TrainConfig,
                 init_weights: list | None = None) -> TrainResult:
    """Train on ``grid`` from a :class:`PreparedGraph` or a shard manifest."""
    dtype = cfg.dtype
    if isinstance(source, ShardManifest):
        n, d0, ncls = source.num_nodes, source.num_features, source.num_classes
    else:
        n, d0, ncls = source.num_nodes, source.num_features, source.num_classes
    dims = cfg.layer_dims(d0, ncls)
    full = init_weights if init_weights is not None else init_model(dims, cfg.seed, dtype)
    full = [np.asarray(w, dtype=dtype) for w in full]
    stats = {r: CommStats() for r in range(grid.size)}
    datas, weights, opts, outs = {}, {}, {}, {}
    for r in range(grid.size):
        t0 = time.perf_counter()
        if isinstance(source, ShardManifest):
            datas[r] = load_rank_shards(source, grid, r, dims, dtype)
        else:
            datas[r] = rank_data_from_prepared(source, grid, r, dims, dtype)
        stats[r].times["load"] += time.perf_counter() - t0
        weights[r] = shard_weights(full, grid, r, n)
        opts[r] = AdamState.for_params(weights[r] + [datas[r].features], cfg.lr, cfg.betas, cfg.eps)
        outs[r] = []
    block_counts = [cfg.block_count or default_block_count(chunk_bounds(n, grid.dims[lay.row], 0)[1])
                    for lay in plan_layouts(cfg.layers)]
    skip = frozenset([cfg.fault]) if cfg.fault else frozenset()
    programs = {r: _rank_program(Comm(grid, r, stats[r], skip), datas[r], weights[r], cfg, opts[r],
                                 block_counts, outs[r]) for r in range(grid.size)}
    sched = make_scheduler(cfg.scheduler, cfg.deterministic, cfg.max_workers)
    sched.run(grid, programs, stats)

    global_rows = []
    for e in range(cfg.epochs):
        per = [outs[r][e] for r in range(grid.size)]
        comm_sum = CommStats()
        for m in per:
            comm_sum.bytes.update(m.comm.bytes)
            comm_sum.calls.update(m.comm.calls)
            comm_sum.flops.update(m.comm.flops)
        times = {ph: max(m.times.get(ph, 0.0) for m in per) for ph in EpochMetrics.PHASES}
        global_rows.append(EpochMetrics(e, per[0].loss, per[0].train_acc, -1, times, comm_sum))
    for r in range(grid.size):
        if outs[r]:
            outs[r][0].times["load"] = stats[r].times["load"]
    return TrainResult(
        grid, dims, global_rows, outs, stats,
        gather_weights(weights, grid, dims, n),
        gather_features({r: datas[r].features for r in datas}, grid, dims, n),
        {r: datas[r].bytes_read for r in datas},
        {r: opts[r].num_elements() for r in opts},
        sched.log,
    )


def write_metrics_csv(path, result: TrainResult):
    """One row per epoch per rank plus one global row per epoch."""
    rows = []
    for e, glob in enumerate(result.epochs):
        for r in sorted(result.rank_metrics):
            rows.append(result.rank_metrics[r][e].row())
        rows.append(glob.row())
    fields = list(rows[0]) if rows else ["epoch", "rank", "loss", "train_acc"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return len(rows)


# --- serial reference -------------------------------------------------------
# Deliberately shares nothing with the sharded path except tensor_core kernels.

@dataclass
class SerialModel:
    A: CsrMatrix
    At: CsrMatrix
    features: np.ndarray
    weights: list
    labels: np.ndarray
    mask: np.ndarray
    opt: AdamState | None = None


def serial_model(A: CsrMatrix, features, labels, mask, weights, cfg: TrainConfig) -> SerialModel:
    dtype = cfg.dtype
    A = A.astype(dtype)
    feats = np.array(features, dtype=dtype)
    ws = [np.array(w, dtype=dtype) for w in weights]
    model = SerialModel(A, csr_transpose(A), feats, ws, np.asarray(labels), np.asarray(mask, bool))
    model.opt = AdamState.for_params(ws + [feats], cfg.lr, cfg.betas, cfg.eps)
    return model


def serial_forward_backward(model: SerialModel):
    """Return (loss, correct, weight grads, feature grad, logits)."""
    F = model.features
    cache = []
    L = len(model.weights)
    for i, W in enumerate(model.weights):
        H = spmm(model.A, F)
        Q = gemm(H, W)
        cache.append((H, Q))
        F = Q if i == L - 1 else relu_forward(Q)
    loss, dF = softmax_cross_entropy(F, model.labels, model.mask)
    correct = count_correct(F, model.labels, model.mask)
    logits = F
    grads = [None] * L
    for i in reversed(range(L)):
        H, Q = cache[i]
        dQ = dF if i == L - 1 else relu_backward(Q, dF)
        grads[i] = gemm(H, dQ, transpose_a=True)
        dH = gemm(dQ, model.weights[i], transpose_b=True)
        dF = spmm(model.At, dH)
    return loss, correct, grads, dF, logits


def serial_reference_epoch(model: SerialModel, epoch: int = 0) -> EpochMetrics:
    t0 = time.perf_counter()
    loss, correct, grads, dF0, _ = serial_forward_backward(model)
    if not np.isfinite(loss):
        raise NonFiniteLossError(epoch, float(loss))
    adam_step(model.weights + [model.features], grads + [dF0], model.opt)
    count = int(model.mask.sum())
    return EpochMetrics(epoch, float(loss), correct / count, -1,
                        {"epoch": time.perf_counter() - t0})


def serial_train(g: PreparedGraph, cfg: TrainConfig, init_weights: list | None = None):
    """Serial oracle on the unpermuted graph; returns (metrics, model)."""
    A, feats, labels, mask = original_order(g)
    dims = cfg.layer_dims(g.num_features, g.num_classes)
    weights = init_weights if init_weights is not None else init_model(dims, cfg.seed, cfg.dtype)
    model = serial_model(A, feats, labels, mask, weights, cfg)
    return [serial_reference_epoch(model, e) for e in range(cfg.epochs)], model


def original_order(g: PreparedGraph):
    """(adjacency, features, labels, mask) in the dataset's own node order."""
    feats = g.features[g.perm.col]
    labels = g.labels_by_order["row"][g.perm.row]
    mask = g.mask_by_order["row"][g.perm.row]
    return g.adjacency, feats, labels, mask


def _grad_program(comm: Comm, data: RankData, weights: list, block_counts: list[int]):
    last = plan_layouts(len(weights))[-1]
    cnt = yield from comm.all_reduce(np.array([[data.mask.sum()]], np.float64), last.row)
    count = int(round(cnt[0, 0]))
    logits, caches = yield from forward_all(comm, data.adjacency, data.features, weights, block_counts)
    full = yield from comm.all_gather(logits, last.inner, dim=1)
    loss_part, dfull = softmax_cross_entropy(full, data.labels, data.mask, count=count)
    red = yield from comm.all_reduce(np.array([[loss_part]], np.float64), last.row)
    dlogits = np.ascontiguousarray(dfull[:, slice(*data.out_cols)])
    dF0, grads = yield from backward_all(comm, data.adjacency, dlogits, caches, weights)
    return float(red[0, 0]), grads, dF0


def distributed_gradients(g: PreparedGraph, grid: GridConfig, cfg: TrainConfig, weights: list):
    """Loss and gathered gradients for one forward/backward, no update.

    The feature gradient is returned in the dataset's own node order.
    """
    dtype = cfg.dtype
    n = g.num_nodes
    dims = cfg.layer_dims(g.num_features, g.num_classes)
    full = [np.asarray(w, dtype=dtype) for w in weights]
    stats = {r: CommStats() for r in range(grid.size)}
    programs, block_counts = {}, [cfg.block_count or 1] * cfg.layers
    for r in range(grid.size):
        data = rank_data_from_prepared(g, grid, r, dims, dtype)
        programs[r] = _grad_program(Comm(grid, r, stats[r]), data, shard_weights(full, grid, r, n),
                                    block_counts)
    out = make_scheduler(cfg.scheduler, cfg.deterministic, cfg.max_workers).run(grid, programs, stats)
    grads = gather_weights({r: out[r][1] for r in out}, grid, dims, n)
    dF0 = gather_features({r: out[r][2] for r in out}, grid, dims, n)
    return out[0][0], grads, dF0[g.perm.col]
