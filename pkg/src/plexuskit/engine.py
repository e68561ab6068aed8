"""3D tensor-parallel GCN layer.

Each layer's matrices are split by its :class:`~plexuskit.layout.LayerLayout`
``(inner, col, row)`` = ``(a, b, c)``:

* adjacency shard: rows by ``c``, columns by ``a``; replicated over ``b``
* input features: rows by ``a``, columns by ``b`` (layer 0 additionally
  splits rows over ``c``)
* weights: rows by ``b`` then ``c``, columns by ``a``
* output: rows by ``c``, columns by ``a``; replicated over ``b``

The forward and backward functions are generators to be driven by a grid
scheduler (see :mod:`plexuskit.grid`).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import Comm, GridConfig
from .layout import AXIS_NAMES, LayerLayout, chunk_bounds, layer_bounds, plan_layouts
from .tensor_core import (CsrMatrix, csr_block, csr_transpose, gemm, gemm_flops,
                          relu_backward, relu_forward, spmm, weight_grad)

MAX_BLOCK_ROWS = 16384

# tag names double as fault-injection keys
TAGS = ("fwd_gather_f", "fwd_reduce_h", "fwd_gather_w", "fwd_reduce_q", "bwd_scatter_dw",
        "bwd_gather_w", "bwd_reduce_dh", "bwd_reduce_df", "loss_gather_logits", "loss_reduce")


class LayoutError(ValueError):
    pass


def default_block_count(rows: int) -> int:
    return max(1, -(-rows // MAX_BLOCK_ROWS))


@dataclass
class AdjacencyShardSet:
    """Adjacency blocks one rank holds, keyed by (plane, parity)."""

    shards: dict = field(default_factory=dict)
    transposes: dict = field(default_factory=dict)
    _row_blocks: dict = field(default_factory=dict, repr=False)

    def for_layer(self, layout: LayerLayout) -> tuple[CsrMatrix, CsrMatrix]:
        key = (layout.plane, layout.parity)
        return self.shards[key], self.transposes[key]

    def row_blocks(self, layout: LayerLayout, count: int) -> list[CsrMatrix]:
        key = (layout.plane, layout.parity, count)
        if key not in self._row_blocks:
            A = self.shards[key[:2]]
            self._row_blocks[key] = [csr_block(A, *chunk_bounds(A.rows, count, k), 0, A.cols)
                                     for k in range(count)]
        return self._row_blocks[key]

    def __len__(self):
        return len(self.shards)

    def nnz(self) -> int:
        return sum(a.nnz for a in self.shards.values())


BlockFetch = Callable[[int, int, int, int, int], CsrMatrix]


def build_shard_set(fetch: BlockFetch, grid: GridConfig, rank: int, n: int,
                    num_layers: int) -> AdjacencyShardSet:
    """Collect this rank's block for every (plane, parity) the layers use.

    ``fetch(parity, r0, r1, c0, c1)`` returns that block of the even (0) or
    odd (1) permuted adjacency.
    """
    coords = grid.coords(rank)
    out = AdjacencyShardSet()
    for layout in plan_layouts(num_layers):
        key = (layout.plane, layout.parity)
        if key in out.shards:
            continue
        bd = layer_bounds(layout, grid.dims, coords, n, 1, 1)
        A = fetch(layout.parity, *bd.adj_rows, *bd.adj_cols)
        out.shards[key] = A
        out.transposes[key] = csr_transpose(A)
    return out


def build_adjacency_shards(a_even: CsrMatrix, a_odd: CsrMatrix, grid: GridConfig, rank: int,
                           num_layers: int) -> AdjacencyShardSet:
    if a_even.shape != a_odd.shape or a_even.rows != a_even.cols:
        raise LayoutError("adjacency variants must be square and equally shaped")
    mats = (a_even, a_odd)
    return build_shard_set(lambda par, r0, r1, c0, c1: csr_block(mats[par], r0, r1, c0, c1),
                           grid, rank, a_even.rows, num_layers)


@dataclass
class LayerCache:
    H: np.ndarray
    Q: np.ndarray


def _check(cond, layout, axis, msg):
    if not cond:
        raise LayoutError(f"{layout}: axis {AXIS_NAMES[axis]}: {msg}")


def forward_layer(comm: Comm, layout: LayerLayout, adj: AdjacencyShardSet, F_in: np.ndarray,
                  W: np.ndarray, block_count: int = 1, last: bool = False):
    """One layer's forward pass; returns ``(F_out, cache)``."""
    a, b, c = layout.inner, layout.col, layout.row
    st = comm.stats
    A, _ = adj.for_layer(layout)
    F = F_in
    if layout.layer == 0:
        F = yield from comm.all_gather(F_in, c, tag="fwd_gather_f")
    _check(F.shape[0] == A.cols, layout, a,
           f"feature shard has {F.shape[0]} rows, adjacency shard has {A.cols} columns")
    parts = []
    for blk in adj.row_blocks(layout, block_count):
        t0 = time.perf_counter()
        h = spmm(blk, F)
        st.times["forward_spmm"] += time.perf_counter() - t0
        st.add_flops("spmm", blk.spmm_flops(F.shape[1]))
        h = yield from comm.all_reduce(h, a, tag="fwd_reduce_h")
        parts.append(h)
    H = np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    W_full = yield from comm.all_gather(W, c, tag="fwd_gather_w")
    _check(W_full.shape[0] == H.shape[1], layout, b,
           f"weight shard has {W_full.shape[0]} rows, aggregation has {H.shape[1]} columns")
    t0 = time.perf_counter()
    Q = gemm(H, W_full)
    st.times["forward_gemm"] += time.perf_counter() - t0
    st.add_flops("gemm", gemm_flops(H, W_full))
    Q = yield from comm.all_reduce(Q, b, tag="fwd_reduce_q")
    F_out = Q if last else relu_forward(Q)
    return F_out, LayerCache(H, Q)


def backward_layer(comm: Comm, layout: LayerLayout, adj: AdjacencyShardSet, dF_out: np.ndarray,
                   cache: LayerCache | None, W: np.ndarray, last: bool = False):
    """One layer's backward pass; returns ``(dF_in, dW)`` as shards."""
    if cache is None:
        raise LayoutError(f"{layout}: backward called without a forward cache")
    a, c = layout.inner, layout.row
    st = comm.stats
    t0 = time.perf_counter()
    H, Q = cache.H, cache.Q
    dQ = dF_out if last else relu_backward(Q, dF_out)
    dW = weight_grad(H, dQ)
    st.add_flops("gemm", gemm_flops(dQ, H, transpose_a=True))
    st.times["backward"] += time.perf_counter() - t0
    dW = yield from comm.reduce_scatter(dW, c, tag="bwd_scatter_dw")
    W_full = yield from comm.all_gather(W, c, tag="bwd_gather_w")
    t0 = time.perf_counter()
    dH = gemm(dQ, W_full, transpose_b=True)
    st.add_flops("gemm", gemm_flops(dQ, W_full, transpose_b=True))
    st.times["backward"] += time.perf_counter() - t0
    dH = yield from comm.all_reduce(dH, a, tag="bwd_reduce_dh")
    _, At = adj.for_layer(layout)
    t0 = time.perf_counter()
    dF = spmm(At, dH)
    st.add_flops("spmm_bwd", At.spmm_flops(dH.shape[1]))
    st.times["backward"] += time.perf_counter() - t0
    if layout.layer == 0:
        dF = yield from comm.reduce_scatter(dF, c, tag="bwd_reduce_df")
    else:
        dF = yield from comm.all_reduce(dF, c, tag="bwd_reduce_df")
    return dF, dW


def forward_all(comm: Comm, adj: AdjacencyShardSet, F0: np.ndarray, weights: list,
                block_counts: list[int]):
    layouts = plan_layouts(len(weights))
    caches = []
    F = F0
    for layout, W, bc in zip(layouts, weights, block_counts):
        F, cache = yield from forward_layer(comm, layout, adj, F, W, bc,
                                            last=layout.layer == len(weights) - 1)
        caches.append(cache)
    return F, caches


def backward_all(comm: Comm, adj: AdjacencyShardSet, dlogits: np.ndarray, caches: list,
                 weights: list):
    layouts = plan_layouts(len(weights))
    grads = [None] * len(weights)
    dF = dlogits
    for layout in reversed(layouts):
        ell = layout.layer
        dF, grads[ell] = yield from backward_layer(comm, layout, adj, dF, caches[ell], weights[ell],
                                                   last=ell == len(weights) - 1)
        caches[ell] = None
    return dF, grads
