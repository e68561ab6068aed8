"""Dataset ingestion, adjacency normalisation, permutation load balancing and
synthetic graph generation.

Permutations are stored as ``perm[old] = new``. Permuting a matrix by the
pair ``(row_perm, col_perm)`` moves entry ``(u, v)`` to
``(row_perm[u], col_perm[v])``, i.e. it computes ``P_r A P_c^T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import CsrMatrix, ContractError, csr_from_coo

log = logging.getLogger(__name__)

RNG_NAME = "philox"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class GraphDataset:
    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    name: str = "graph"
    directed: bool = False

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_mask = np.asarray(self.train_mask, dtype=bool)
        n = self.num_nodes
        if n < 1:
            raise ValueError("dataset needs at least one node")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge endpoint out of range")
        if self.features.shape[0] != n or self.labels.shape != (n,) or self.train_mask.shape != (n,):
            raise ValueError("features, labels and train_mask need one row per node")

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass
class PermutationPair:
    row: np.ndarray
    col: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        n = len(self.row)
        for p in (self.row, self.col):
            if len(p) != n or not np.array_equal(np.sort(p), np.arange(n)):
                raise ValueError("permutation is not a bijection on [0, N)")

    @classmethod
    def identity(cls, n: int) -> "PermutationPair":
        return cls(np.arange(n), np.arange(n), None)


def generate_permutation_pair(n: int, seed: int) -> PermutationPair:
    if n < 1:
        raise ValueError("N must be >= 1")
    rng = make_rng(seed)
    return PermutationPair(rng.permutation(n), rng.permutation(n), seed)


def invert(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def normalize_adjacency(dataset: GraphDataset, dtype=np.float64) -> CsrMatrix:
    """Add self-loops and scale each entry (u, v) by 1/sqrt(d_u d_v).

    Degrees are counted after self-loop insertion on the symmetrised edge
    set. Undirected graphs store every edge in both directions; directed
    graphs keep only ``src -> dst`` as row ``src``.
    """
    n = dataset.num_nodes
    e = dataset.edges
    e = e[e[:, 0] != e[:, 1]]
    sym = np.concatenate([e, e[:, ::-1]]) if len(e) else e
    sym_keys = np.unique(sym[:, 0] * n + sym[:, 1]) if len(sym) else np.zeros(0, np.int64)
    deg = np.bincount(sym_keys // n, minlength=n).astype(np.float64) + 1.0
    if dataset.directed:
        keys = np.unique(e[:, 0] * n + e[:, 1]) if len(e) else np.zeros(0, np.int64)
    else:
        keys = sym_keys
    loops = np.arange(n, dtype=np.int64) * (n + 1)
    keys = np.concatenate([keys, loops])
    rows, cols = keys // n, keys % n
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    return csr_from_coo(rows, cols, vals.astype(dtype), (n, n))


def permute_csr(A: CsrMatrix, row_perm: np.ndarray, col_perm: np.ndarray) -> CsrMatrix:
    return csr_from_coo(row_perm[A.row_indices()], col_perm[A.col_idx], A.values, A.shape)


def apply_double_permutation(A: CsrMatrix, perm: PermutationPair) -> tuple[CsrMatrix, CsrMatrix]:
    """Return (P_r A P_c^T, P_c A P_r^T) for even and odd layers."""
    if A.rows != A.cols:
        raise ContractError(f"double permutation needs a square matrix, got {A.shape}")
    return permute_csr(A, perm.row, perm.col), permute_csr(A, perm.col, perm.row)


def block_nnz(A: CsrMatrix, p: int, q: int) -> np.ndarray:
    """Non-zero counts of the p x q contiguous (ceil-split) blocks."""
    if p < 1 or q < 1:
        raise ValueError("p and q must be >= 1")
    rs, cs = -(-A.rows // p), -(-A.cols // q)
    bi = A.row_indices() // max(rs, 1)
    bj = A.col_idx // max(cs, 1)
    return np.bincount(bi * q + bj, minlength=p * q).reshape(p, q)


def balance_metric(A: CsrMatrix, p: int, q: int) -> float:
    """Max over mean block non-zeros for a p x q partition; 1.0 is perfect."""
    counts = block_nnz(A, p, q)
    total = counts.sum()
    if total == 0:
        raise ValueError("balance metric undefined for an empty matrix")
    return float(counts.max() / (total / counts.size))


def degree_labels(degrees: np.ndarray, num_classes: int) -> np.ndarray:
    """Equal-population degree quantile bins; ties broken by node index."""
    n = len(degrees)
    order = np.lexsort((np.arange(n), degrees))
    labels = np.empty(n, dtype=np.int64)
    labels[order] = (np.arange(n) * num_classes) // n
    return labels


def _sample_pairs(rng, n_rows, n_cols, p, upper_only):
    """Bernoulli(p) sample of an n_rows x n_cols block, as (i, j) arrays."""
    total = n_rows * n_cols
    if p <= 0 or total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if p >= 1:
        idx = np.arange(total, dtype=np.int64)
    else:
        k = rng.binomial(total, p)
        idx = np.sort(rng.choice(total, size=k, replace=False))
    i, j = idx // n_cols, idx % n_cols
    if upper_only:
        keep = i < j
        i, j = i[keep], j[keep]
    return i, j


def sbm_edges(rng, sizes, p_in, p_out):
    starts = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for a in range(len(sizes)):
        for b in range(a, len(sizes)):
            p = p_in if a == b else p_out
            i, j = _sample_pairs(rng, sizes[a], sizes[b], p, upper_only=(a == b))
            out.append(np.stack([i + starts[a], j + starts[b]], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 2), np.int64)


def rmat_edges(rng, scale, edge_factor, a=0.57, b=0.19, c=0.19):
    n = 1 << scale
    m = edge_factor * n
    quad = rng.choice(4, size=(m, scale), p=[a, b, c, 1.0 - a - b - c])
    bits = 1 << np.arange(scale - 1, -1, -1, dtype=np.int64)
    src = ((quad >> 1) * bits).sum(axis=1)
    dst = ((quad & 1) * bits).sum(axis=1)
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    keep = lo != hi
    keys = np.unique(lo[keep] * n + hi[keep])
    return n, np.stack([keys // n, keys % n], axis=1)


def synth_dataset(kind: str, params: dict | None = None, seed: int = 0) -> GraphDataset:
    """Deterministic synthetic dataset.

    kinds and their params (defaults in brackets):

    * ``sbm``: nodes [4096], communities [8], p_in [0.18], p_out [0.001]
    * ``rmat``: scale [12], edge_factor [16], a/b/c [0.57/0.19/0.19]
    * ``erdos``: nodes [1000], p [0.01]

    plus for all: features [128], classes [32], train_fraction [0.8].
    Features are uniform on [-1, 1); labels are degree-quantile bins.
    """
    params = dict(params or {})
    rng = make_rng(seed)
    if kind == "sbm":
        n = int(params.get("nodes", 4096))
        k = int(params.get("communities", 8))
        if n < 1 or k < 1:
            raise ValueError("sbm needs nodes >= 1 and communities >= 1")
        sizes = [len(c) for c in np.array_split(np.arange(n), k)]
        edges = sbm_edges(rng, sizes, float(params.get("p_in", 0.18)), float(params.get("p_out", 0.001)))
    elif kind == "rmat":
        scale = int(params.get("scale", 12))
        if scale < 1:
            raise ValueError("rmat needs scale >= 1")
        n, edges = rmat_edges(rng, scale, int(params.get("edge_factor", 16)),
                              float(params.get("a", 0.57)), float(params.get("b", 0.19)),
                              float(params.get("c", 0.19)))
    elif kind == "erdos":
        n = int(params.get("nodes", 1000))
        if n < 1:
            raise ValueError("erdos needs nodes >= 1")
        edges = sbm_edges(rng, [n], float(params.get("p", 0.01)), 0.0)
    else:
        raise ValueError(f"unknown generator {kind!r}")
    d = int(params.get("features", 128))
    c = int(params.get("classes", 32))
    if d < 1 or c < 1:
        raise ValueError("features and classes must be >= 1")
    features = rng.uniform(-1.0, 1.0, size=(n, d))
    deg = np.bincount(edges.ravel(), minlength=n) if len(edges) else np.zeros(n, np.int64)
    labels = degree_labels(deg, c)
    train = rng.random(n) < float(params.get("train_fraction", 0.8))
    if not train.any():
        train[0] = True
    return GraphDataset(n, edges, features, labels, train, name=f"{kind}-{n}")


def load_edge_list(path, num_nodes: int | None = None) -> tuple[int, np.ndarray]:
    """Read whitespace-separated ``src dst`` lines; '#' and '%' start comments."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].split("%", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'src dst'")
            rows.append((int(parts[0]), int(parts[1])))
    edges = np.array(rows, dtype=np.int64).reshape(-1, 2)
    n = num_nodes if num_nodes is not None else (int(edges.max()) + 1 if len(edges) else 1)
    return n, edges


def dataset_from_edges(num_nodes: int, edges: np.ndarray, features=None, labels=None,
                       num_features: int = 128, num_classes: int = 32, seed: int = 0,
                       train_fraction: float = 0.8, name: str = "graph",
                       directed: bool = False) -> GraphDataset:
    """Wrap an edge list; missing features/labels are synthesised as for
    synthetic graphs (uniform features, degree-quantile labels)."""
    rng = make_rng(seed)
    if features is None:
        features = rng.uniform(-1.0, 1.0, size=(num_nodes, num_features))
    if labels is None:
        deg = np.bincount(edges.ravel(), minlength=num_nodes) if len(edges) else np.zeros(num_nodes)
        labels = degree_labels(deg, num_classes)
    train = rng.random(num_nodes) < train_fraction
    if not train.any():
        train[0] = True
    return GraphDataset(num_nodes, edges, np.asarray(features), labels, train, name=name,
                        directed=directed)


@dataclass
class PreparedGraph:
    """Everything the parallel trainer needs, already in permuted order.

    ``features`` are in column-permutation order (P_c F). Layer outputs of
    even layers come out in row-permutation order and odd layers in
    column-permutation order, so labels/masks are kept in both orders.
    """

    name: str
    adjacency: CsrMatrix
    a_even: CsrMatrix
    a_odd: CsrMatrix
    perm: PermutationPair
    features: np.ndarray
    labels_by_order: dict = field(default_factory=dict)
    mask_by_order: dict = field(default_factory=dict)
    num_classes: int = 0

    @property
    def num_nodes(self) -> int:
        return self.adjacency.rows

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def train_count(self) -> int:
        return int(self.mask_by_order["row"].sum())

    def output_order(self, num_layers: int) -> str:
        return "row" if (num_layers - 1) % 2 == 0 else "col"

    def output_perm(self, num_layers: int) -> np.ndarray:
        return self.perm.row if self.output_order(num_layers) == "row" else self.perm.col


def prepare(dataset: GraphDataset, seed: int | None = 0, dtype=np.float64) -> PreparedGraph:
    """Normalise and double-permute. ``seed=None`` keeps the identity order."""
    A = normalize_adjacency(dataset, dtype)
    n = dataset.num_nodes
    perm = PermutationPair.identity(n) if seed is None else generate_permutation_pair(n, seed)
    a_even, a_odd = apply_double_permutation(A, perm)
    feats = np.empty_like(dataset.features, dtype=dtype)
    feats[perm.col] = dataset.features
    labels, masks = {}, {}
    for order, p in (("row", perm.row), ("col", perm.col)):
        lab = np.empty(n, np.int64)
        lab[p] = dataset.labels
        msk = np.empty(n, bool)
        msk[p] = dataset.train_mask
        labels[order], masks[order] = lab, msk
    return PreparedGraph(dataset.name, A, a_even, a_odd, perm, feats, labels, masks,
                         int(dataset.labels.max()) + 1)
