"""Small CSR container whose entry order is part of the contract.

The solver kernels accumulate each row sequentially in stored order, so
two matrices with the same rows listed in the same order give
bit-identical products.  ``scipy.sparse`` constructors may reorder
entries, hence this thin wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True, eq=False)
class Csr:
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "indptr", np.ascontiguousarray(self.indptr, dtype=np.intp))
        object.__setattr__(self, "indices", np.ascontiguousarray(self.indices, dtype=np.intp))
        object.__setattr__(self, "data", np.ascontiguousarray(self.data, dtype=float))
        if self.indptr.shape != (self.shape[0] + 1,):
            raise ValueError("indptr length does not match row count")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.shape[1]):
            raise ValueError("column index out of range")

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @cached_property
    def sp(self) -> sp.csr_matrix:
        # Built without sorting or summing duplicates, so stored order survives.
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for r in range(self.shape[0]):
            for jj in range(self.indptr[r], self.indptr[r + 1]):
                out[r, self.indices[jj]] += self.data[jj]
        return out

    def row(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[r], self.indptr[r + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[tuple[int, float]]], ncols: int) -> "Csr":
        indptr = np.zeros(len(rows) + 1, dtype=np.intp)
        indices, data = [], []
        for r, entries in enumerate(rows):
            for c, v in entries:
                indices.append(c)
                data.append(v)
            indptr[r + 1] = len(indices)
        return cls(indptr, np.array(indices, dtype=np.intp), np.array(data, dtype=float), (len(rows), ncols))

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "Csr":
        a = np.asarray(a, dtype=float)
        rows = [[(int(c), float(a[r, c])) for c in np.flatnonzero(a[r])] for r in range(a.shape[0])]
        return cls.from_rows(rows, a.shape[1])


def block_diag(blocks: Sequence[Csr]) -> Csr:
    """Block-diagonal stack that keeps each block's entry order."""
    indptr = [np.zeros(1, dtype=np.intp)]
    indices, data = [], []
    nnz = row_off = col_off = 0
    for b in blocks:
        indptr.append(b.indptr[1:] + nnz)
        indices.append(b.indices + col_off)
        data.append(b.data)
        nnz += b.nnz
        row_off += b.shape[0]
        col_off += b.shape[1]
    return Csr(
        np.concatenate(indptr),
        np.concatenate(indices) if indices else np.zeros(0, dtype=np.intp),
        np.concatenate(data) if data else np.zeros(0),
        (row_off, col_off),
    )


def transpose(a: Csr) -> Csr:
    """Transpose; entries of each output row appear in ascending source row."""
    rows: list[list[tuple[int, float]]] = [[] for _ in range(a.shape[1])]
    for r in range(a.shape[0]):
        for jj in range(a.indptr[r], a.indptr[r + 1]):
            rows[a.indices[jj]].append((r, a.data[jj]))
    return Csr.from_rows(rows, a.shape[0])


@dataclass(frozen=True, eq=False)
class BlockCholesky:
    """Lower Cholesky factors of a block-diagonal SPD matrix.

    ``offsets[b]:offsets[b+1]`` is the coordinate range of block ``b``;
    ``packed`` stores the dense row-major factors back to back starting
    at ``starts[b]``.
    """

    factors: tuple[np.ndarray, ...]
    offsets: np.ndarray
    packed: np.ndarray
    starts: np.ndarray

    @classmethod
    def from_factors(cls, factors: Sequence[np.ndarray]) -> "BlockCholesky":
        factors = tuple(np.ascontiguousarray(f, dtype=float) for f in factors)
        sizes = [f.shape[0] for f in factors]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
        starts = np.concatenate([[0], np.cumsum([s * s for s in sizes])]).astype(np.intp)
        packed = np.concatenate([f.ravel() for f in factors]) if factors else np.zeros(0)
        return cls(factors, offsets, packed, starts)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])
