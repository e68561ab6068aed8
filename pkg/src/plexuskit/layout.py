"""Shard shape algebra shared by the parallel engine and the performance model.

Axes are integers 0, 1, 2 for X, Y, Z. A layer's layout names three roles:

* ``inner``  - shards the SpMM common dimension; aggregation all-reduce axis
* ``col``    - shards the input feature columns; combination all-reduce axis
* ``row``    - shards the output rows; the axis the weights and the layer-0
  features are additionally split over

Layer 0 is (X, Y, Z); every later layer rotates the previous one so its
input layout is exactly the previous layer's output layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

X, Y, Z = 0, 1, 2
AXIS_NAMES = "XYZ"


def axis_index(axis) -> int:
    if isinstance(axis, str):
        return AXIS_NAMES.index(axis.upper())
    if axis not in (X, Y, Z):
        raise ValueError(f"bad axis {axis!r}")
    return axis


def chunk_bounds(n: int, parts: int, idx: int) -> tuple[int, int]:
    """Ceil-split ``n`` into ``parts``; earlier chunks are never smaller."""
    size = -(-n // parts)
    lo = min(n, idx * size)
    return lo, min(n, lo + size)


def chunk_size(n: int, parts: int, idx: int) -> int:
    lo, hi = chunk_bounds(n, parts, idx)
    return hi - lo


def sub_bounds(n: int, parts: int, idx: int, subparts: int, subidx: int) -> tuple[int, int]:
    """Bounds of chunk ``subidx`` inside chunk ``idx`` of a two-level split."""
    lo, hi = chunk_bounds(n, parts, idx)
    slo, shi = chunk_bounds(hi - lo, subparts, subidx)
    return lo + slo, lo + shi


@dataclass(frozen=True)
class LayerLayout:
    layer: int
    inner: int
    col: int
    row: int

    @property
    def plane(self) -> str:
        """Grid plane the adjacency shard lives on (row axis then inner axis)."""
        return AXIS_NAMES[self.row] + AXIS_NAMES[self.inner]

    @property
    def parity(self) -> int:
        return self.layer % 2

    def __str__(self):
        return (f"L{self.layer}(inner={AXIS_NAMES[self.inner]}, col={AXIS_NAMES[self.col]}, "
                f"row={AXIS_NAMES[self.row]})")


def plan_layouts(num_layers: int) -> list[LayerLayout]:
    if num_layers < 1:
        raise ValueError("need at least one layer")
    out = []
    inner, col, row = X, Y, Z
    for layer in range(num_layers):
        out.append(LayerLayout(layer, inner, col, row))
        # output rows (row axis) become the next common dimension
        inner, col, row = row, inner, col
    return out


class LayerBounds(NamedTuple):
    adj_rows: tuple[int, int]
    adj_cols: tuple[int, int]
    f_in_rows: tuple[int, int]
    f_in_cols: tuple[int, int]
    f0_rows: tuple[int, int]
    w_rows: tuple[int, int]
    w_rows_full: tuple[int, int]
    w_cols: tuple[int, int]
    out_rows: tuple[int, int]
    out_cols: tuple[int, int]


def layer_bounds(layout: LayerLayout, dims, coords, n: int, d_in: int, d_out: int) -> LayerBounds:
    """Global index ranges of every shard one rank holds for one layer."""
    a, b, c = layout.inner, layout.col, layout.row
    ga, gb, gc = dims[a], dims[b], dims[c]
    ia, ib, ic = coords[a], coords[b], coords[c]
    return LayerBounds(
        adj_rows=chunk_bounds(n, gc, ic),
        adj_cols=chunk_bounds(n, ga, ia),
        f_in_rows=chunk_bounds(n, ga, ia),
        f_in_cols=chunk_bounds(d_in, gb, ib),
        f0_rows=sub_bounds(n, ga, ia, gc, ic),
        w_rows=sub_bounds(d_in, gb, ib, gc, ic),
        w_rows_full=chunk_bounds(d_in, gb, ib),
        w_cols=chunk_bounds(d_out, ga, ia),
        out_rows=chunk_bounds(n, gc, ic),
        out_cols=chunk_bounds(d_out, ga, ia),
    )


class CollectiveSpec(NamedTuple):
    layer: int
    phase: str
    kind: str  # all_gather | all_reduce | reduce_scatter
    axis: int
    rows: int
    cols: int

    def elements(self) -> int:
        return self.rows * self.cols


def layer_collectives(layout: LayerLayout, dims, n: int, d_in: int, d_out: int) -> list[CollectiveSpec]:
    """Collectives one layer issues, with full buffer shapes (M) seen by the
    rank at coordinate 0, in execution order (forward then backward).
    """
    zero = (0, 0, 0)
    bd = layer_bounds(layout, dims, zero, n, d_in, d_out)
    size = lambda r: r[1] - r[0]  # noqa: E731
    a, b, c = layout.inner, layout.col, layout.row
    first = layout.layer == 0
    f_in = (size(bd.f_in_rows), size(bd.f_in_cols))
    h = (size(bd.adj_rows), size(bd.f_in_cols))
    w = (size(bd.w_rows_full), size(bd.w_cols))
    q = (size(bd.out_rows), size(bd.out_cols))
    ell = layout.layer
    specs = []
    if first:
        specs.append(CollectiveSpec(ell, "fwd_gather_f", "all_gather", c, *f_in))
    specs += [
        CollectiveSpec(ell, "fwd_reduce_h", "all_reduce", a, *h),
        CollectiveSpec(ell, "fwd_gather_w", "all_gather", c, *w),
        CollectiveSpec(ell, "fwd_reduce_q", "all_reduce", b, *q),
        CollectiveSpec(ell, "bwd_scatter_dw", "reduce_scatter", c, *w),
        CollectiveSpec(ell, "bwd_gather_w", "all_gather", c, *w),
        CollectiveSpec(ell, "bwd_reduce_dh", "all_reduce", a, *h),
        CollectiveSpec(ell, "bwd_reduce_df", "reduce_scatter" if first else "all_reduce", c, *f_in),
    ]
    return specs
