"""Dense and CSR kernels with explicit backward passes.

Dense matrices are plain 2-D numpy arrays. ``SparseMatrix`` is a thin CSR
container; products are delegated to scipy's sequential CSR routines, which
accumulate each output row in CSR order and are therefore deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rp = np.asarray(self.row_ptr, dtype=np.int64)
        ci = np.asarray(self.col_idx, dtype=np.int64)
        vals = np.asarray(self.values)
        if rp.shape != (self.n_rows + 1,) or rp[0] != 0 or rp[-1] != ci.size:
            raise ShapeError("row_ptr does not describe col_idx")
        if np.any(np.diff(rp) < 0):
            raise ShapeError("row_ptr must be nondecreasing")
        if vals.shape != ci.shape:
            raise ShapeError("values and col_idx lengths differ")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ShapeError("col_idx out of range")
        object.__setattr__(self, "row_ptr", rp)
        object.__setattr__(self, "col_idx", ci)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    @cached_property
    def row_idx(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_ptr))

    def with_values(self, values: np.ndarray) -> "SparseMatrix":
        return SparseMatrix(self.n_rows, self.n_cols, self.row_ptr, self.col_idx, values)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        np.add.at(out, (self.row_idx, self.col_idx), self.values)
        return out

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseMatrix":
        dense = np.asarray(dense)
        rows, cols = np.nonzero(dense)
        row_ptr = np.zeros(dense.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=dense.shape[0]), out=row_ptr[1:])
        return cls(dense.shape[0], dense.shape[1], row_ptr, cols, dense[rows, cols])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def spmm(s: SparseMatrix, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or s.n_cols != x.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {s.shape} by {x.shape}")
    out = s.to_scipy() @ x
    return np.asarray(out, dtype=np.result_type(s.values, x))


def spmm_backward(s: SparseMatrix, x: np.ndarray, gout: np.ndarray):
    """Gradients of ``spmm(s, x)``.

    Returns ``(gvalues, gx)`` with ``gvalues[k] = <gout[row_k], x[col_k]>``
    (one entry per stored value) and ``gx = s.T @ gout``.
    """
    if x.ndim != 2 or s.n_cols != x.shape[0]:
        raise ShapeError(f"spmm_backward: {s.shape} incompatible with x {x.shape}")
    if gout.shape != (s.n_rows, x.shape[1]):
        raise ShapeError(f"spmm_backward: gout has shape {gout.shape}, "
                         f"expected {(s.n_rows, x.shape[1])}")
    gvalues = np.einsum("ij,ij->i", gout[s.row_idx], x[s.col_idx])
    gx = np.asarray(s.to_scipy().T @ gout, dtype=np.result_type(s.values, gout))
    return gvalues, gx


def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_bwd(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(x > 0, gout, 0.0).astype(gout.dtype, copy=False)


def dropout_fwd(x: np.ndarray, rate: float, rng: np.random.Generator):
    """Inverted dropout.

    The returned mask holds the per-entry scale (0 or ``1/(1-rate)``), so
    ``dropout_bwd`` needs nothing else. ``rate == 0`` draws no random numbers.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x.copy(), np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    scale = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * scale, scale


def dropout_bwd(keep_mask: np.ndarray, gout: np.ndarray) -> np.ndarray:
    return gout * keep_mask


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent(logits: np.ndarray, labels: np.ndarray, idx: np.ndarray):
    """Mean cross-entropy over the rows ``idx``; returns ``(loss, glogits)``."""
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("softmax_xent: empty index subset")
    sub = logits[idx]
    logp = log_softmax(sub)
    lab = np.asarray(labels)[idx]
    rows = np.arange(idx.size)
    loss = -logp[rows, lab].mean()
    g = np.exp(logp)
    g[rows, lab] -= 1.0
    g /= idx.size
    glogits = np.zeros_like(logits)
    glogits[idx] = g
    return float(loss), glogits
