"""Dense and sparse kernels plus the pointwise GCN operators.

Dense matrices are plain 2D numpy arrays (row-major). Sparse matrices are
:class:`CsrMatrix`. Every kernel accumulates in the dtype of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DenseMatrix = np.ndarray

DTYPES = {"f32": np.float32, "f64": np.float64}


class ContractError(ValueError):
    """An operand violated a kernel's shape or value contract."""


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ContractError(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


@dataclass(eq=False)
class CsrMatrix:
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1]) if len(self.row_ptr) else 0

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def validate(self) -> None:
        """Raise ContractError unless every CSR invariant holds."""
        rp, ci = self.row_ptr, self.col_idx
        if self.rows < 0 or self.cols < 0:
            raise ContractError("negative dimension")
        if len(rp) != self.rows + 1 or rp[0] != 0:
            raise ContractError("row_ptr must have rows+1 entries starting at 0")
        if np.any(np.diff(rp) < 0):
            raise ContractError("row_ptr must be non-decreasing")
        if rp[-1] != len(ci) or len(ci) != len(self.values):
            raise ContractError("row_ptr[-1], col_idx and values disagree on nnz")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.cols):
            raise ContractError("column index out of range")
        if len(ci) > 1:
            step = np.diff(ci)
            starts = rp[1:-1]
            inside = np.ones(len(ci) - 1, dtype=bool)
            inside[starts[(starts > 0) & (starts < len(ci))] - 1] = False
            if np.any(step[inside] <= 0):
                raise ContractError("column indices must be strictly increasing within a row")

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.row_ptr))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=self.dtype)
        out[self.row_indices(), self.col_idx] = self.values
        return out

    def astype(self, dtype) -> "CsrMatrix":
        return CsrMatrix(self.rows, self.cols, self.row_ptr, self.col_idx,
                         self.values.astype(dtype))

    def spmm_flops(self, ncols: int) -> int:
        return 2 * self.nnz * int(ncols)

    def structurally_equal(self, other: "CsrMatrix") -> bool:
        return (self.shape == other.shape
                and np.array_equal(self.row_ptr, other.row_ptr)
                and np.array_equal(self.col_idx, other.col_idx)
                and np.array_equal(self.values, other.values))

    @classmethod
    def from_dense(cls, dense) -> "CsrMatrix":
        dense = np.asarray(dense)
        r, c = np.nonzero(dense)
        return csr_from_coo(r, c, dense[r, c], dense.shape)

    @classmethod
    def identity(cls, n: int, dtype=np.float64) -> "CsrMatrix":
        idx = np.arange(n)
        return cls(n, n, np.arange(n + 1), idx, np.ones(n, dtype=dtype))

    @classmethod
    def empty(cls, rows: int, cols: int, dtype=np.float64) -> "CsrMatrix":
        return cls(rows, cols, np.zeros(rows + 1), np.zeros(0), np.zeros(0, dtype=dtype))


def csr_from_coo(rows, cols, values, shape, sum_duplicates: bool = False) -> CsrMatrix:
    """Build a CSR matrix from coordinate triples.

    Duplicates raise unless ``sum_duplicates`` is set, in which case they are
    summed in input order.
    """
    nrows, ncols = int(shape[0]), int(shape[1])
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values)
    order = np.lexsort((cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]
    if len(rows) > 1:
        dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
        if dup.any():
            if not sum_duplicates:
                raise ContractError("duplicate coordinates in COO input")
            keep = np.concatenate(([True], ~dup))
            group = np.cumsum(keep) - 1
            summed = np.zeros(int(keep.sum()), dtype=values.dtype)
            np.add.at(summed, group, values)
            rows, cols, values = rows[keep], cols[keep], summed
    row_ptr = np.zeros(nrows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=nrows), out=row_ptr[1:])
    return CsrMatrix(nrows, ncols, row_ptr, cols, values)


def csr_block(A: CsrMatrix, r0: int, r1: int, c0: int, c1: int) -> CsrMatrix:
    """Extract rows [r0, r1) x cols [c0, c1) with local indices."""
    lo, hi = A.row_ptr[r0], A.row_ptr[r1]
    cols = A.col_idx[lo:hi]
    keep = (cols >= c0) & (cols < c1)
    local_rows = np.repeat(np.arange(r1 - r0, dtype=np.int64), np.diff(A.row_ptr[r0:r1 + 1]))
    row_ptr = np.zeros(r1 - r0 + 1, dtype=np.int64)
    np.cumsum(np.bincount(local_rows[keep], minlength=r1 - r0), out=row_ptr[1:])
    return CsrMatrix(r1 - r0, c1 - c0, row_ptr, cols[keep] - c0, A.values[lo:hi][keep])


def spmm(A: CsrMatrix, X: DenseMatrix) -> DenseMatrix:
    """Sparse-times-dense product ``A @ X``.

    FLOPs for the call are ``A.spmm_flops(X.shape[1])``.
    """
    if X.ndim != 2 or A.cols != X.shape[0]:
        raise ContractError(f"spmm: A is {A.shape}, X is {X.shape}")
    dtype = np.result_type(A.values, X)
    out = np.zeros((A.rows, X.shape[1]), dtype=dtype)
    if A.nnz == 0 or X.shape[1] == 0:
        return out
    prod = A.values[:, None].astype(dtype, copy=False) * X[A.col_idx]
    nonempty = np.flatnonzero(np.diff(A.row_ptr))
    out[nonempty] = np.add.reduceat(prod, A.row_ptr[nonempty], axis=0)
    return out


def gemm(A: DenseMatrix, B: DenseMatrix, transpose_a: bool = False,
         transpose_b: bool = False) -> DenseMatrix:
    a = A.T if transpose_a else A
    b = B.T if transpose_b else B
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(
            f"gemm: op(A) is {a.shape}, op(B) is {b.shape}")
    return a @ b


def gemm_flops(A: DenseMatrix, B: DenseMatrix, transpose_a: bool = False,
               transpose_b: bool = False) -> int:
    m, k = (A.shape[1], A.shape[0]) if transpose_a else A.shape
    n = B.shape[0] if transpose_b else B.shape[1]
    return 2 * m * n * k


def weight_grad(H: DenseMatrix, dQ: DenseMatrix) -> DenseMatrix:
    """``H^T dQ`` computed as ``(dQ^T H)^T`` so the transposed operand sits first."""
    return np.ascontiguousarray(gemm(dQ, H, transpose_a=True).T)


def csr_transpose(A: CsrMatrix) -> CsrMatrix:
    rows = A.row_indices()
    order = np.lexsort((rows, A.col_idx))
    row_ptr = np.zeros(A.cols + 1, dtype=np.int64)
    np.cumsum(np.bincount(A.col_idx, minlength=A.cols), out=row_ptr[1:])
    return CsrMatrix(A.cols, A.rows, row_ptr, rows[order], A.values[order])


def relu_forward(Q: DenseMatrix) -> DenseMatrix:
    return np.maximum(Q, 0)


def relu_backward(Q: DenseMatrix, dF: DenseMatrix) -> DenseMatrix:
    # subgradient at exactly 0 is 0
    if Q.shape != dF.shape:
        raise ContractError(f"relu_backward: Q is {Q.shape}, dF is {dF.shape}")
    return np.where(Q > 0, dF, np.zeros((), dtype=dF.dtype))


def softmax_cross_entropy(logits: DenseMatrix, labels, mask, count=None):
    """Masked mean cross-entropy and its gradient.

    ``count`` overrides the normaliser so that row shards of one global batch
    can each contribute ``sum / global_count``. Returns ``(loss, dlogits)``.
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    n, c = logits.shape
    if labels.shape != (n,) or mask.shape != (n,):
        raise ContractError("labels and mask must have one entry per logits row")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ContractError("class index out of range")
    if count is None:
        count = int(mask.sum())
    if count <= 0:
        raise ContractError("softmax_cross_entropy: no rows selected by mask")
    dtype = logits.dtype
    dlogits = np.zeros_like(logits)
    rows = np.flatnonzero(mask)
    if len(rows) == 0:
        return dtype.type(0), dlogits
    z = logits[rows]
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sum_ez = ez.sum(axis=1, keepdims=True)
    picked = z[np.arange(len(rows)), labels[rows]]
    loss = np.sum(np.log(sum_ez[:, 0]) - picked) / dtype.type(count)
    probs = ez / sum_ez
    probs[np.arange(len(rows)), labels[rows]] -= 1
    dlogits[rows] = probs / dtype.type(count)
    return dtype.type(loss), dlogits


def count_correct(logits: DenseMatrix, labels, mask) -> int:
    mask = np.asarray(mask, dtype=bool)
    pred = np.argmax(logits, axis=1)
    return int(np.sum((pred == np.asarray(labels)) & mask))
