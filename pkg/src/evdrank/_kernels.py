"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with the same signature.  The numba path is used when numba imports
and ``EVDRANK_DISABLE_NUMBA`` is unset (or ``0``); otherwise the numpy path is
bound.  Both live in this module so tests and the benchmark can call each
one directly through :data:`NUMPY` and :data:`NUMBA`.

Kernels:

* ``contrastive_core(logits)`` - symmetric InfoNCE over an N x N logit matrix,
  returning both directional losses and their logit gradients.
* ``densify(indptr, indices, values, n_cols)`` - CSR rows to a dense matrix.
* ``csr_matvec(indptr, indices, values, theta)`` - one dot product per row.
* ``csr_scatter(out, indptr, indices, values, coeffs)`` - ``out += A.T @ coeffs``.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

ENV_FLAG = "EVDRANK_DISABLE_NUMBA"


# --------------------------------------------------------------------------
# numpy reference path


def _np_contrastive_core(logits: np.ndarray):
    n = logits.shape[0]
    row_max = logits.max(axis=1, keepdims=True)
    row_exp = np.exp(logits - row_max)
    row_sum = row_exp.sum(axis=1, keepdims=True)
    row_lse = (row_max + np.log(row_sum)).ravel()
    row_soft = row_exp / row_sum

    col_max = logits.max(axis=0, keepdims=True)
    col_exp = np.exp(logits - col_max)
    col_sum = col_exp.sum(axis=0, keepdims=True)
    col_lse = (col_max + np.log(col_sum)).ravel()
    col_soft = col_exp / col_sum

    diag = np.diagonal(logits)
    loss_i2t = float(np.mean(row_lse - diag))
    loss_t2i = float(np.mean(col_lse - diag))
    eye = np.eye(n)
    d_i2t = (row_soft - eye) / n
    d_t2i = (col_soft - eye) / n
    return loss_i2t, loss_t2i, d_i2t, d_t2i


def _np_densify(indptr: np.ndarray, indices: np.ndarray, values: np.ndarray, n_cols: int) -> np.ndarray:
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, n_cols))
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    np.add.at(out, (rows, indices), values)
    return out


def _np_csr_matvec(indptr: np.ndarray, indices: np.ndarray, values: np.ndarray, theta: np.ndarray) -> np.ndarray:
    n_rows = indptr.shape[0] - 1
    prod = values * theta[indices]
    out = np.zeros(n_rows)
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    np.add.at(out, rows, prod)
    return out


def _np_csr_scatter(out: np.ndarray, indptr: np.ndarray, indices: np.ndarray, values: np.ndarray,
                    coeffs: np.ndarray) -> None:
    n_rows = indptr.shape[0] - 1
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    np.add.at(out, indices, values * coeffs[rows])


NUMPY = SimpleNamespace(
    name="numpy",
    contrastive_core=_np_contrastive_core,
    densify=_np_densify,
    csr_matvec=_np_csr_matvec,
    csr_scatter=_np_csr_scatter,
)


# --------------------------------------------------------------------------
# numba path


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def contrastive_core_impl(logits):
        n = logits.shape[0]
        d_i2t = np.empty((n, n))
        d_t2i = np.empty((n, n))
        loss_i2t = 0.0
        loss_t2i = 0.0
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, n):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(n):
                e = np.exp(logits[i, j] - m)
                d_i2t[i, j] = e
                s += e
            loss_i2t += m + np.log(s) - logits[i, i]
            for j in range(n):
                d_i2t[i, j] = d_i2t[i, j] / s
            d_i2t[i, i] -= 1.0
        for j in range(n):
            m = logits[0, j]
            for i in range(1, n):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for i in range(n):
                e = np.exp(logits[i, j] - m)
                d_t2i[i, j] = e
                s += e
            loss_t2i += m + np.log(s) - logits[j, j]
            for i in range(n):
                d_t2i[i, j] = d_t2i[i, j] / s
            d_t2i[j, j] -= 1.0
        for i in range(n):
            for j in range(n):
                d_i2t[i, j] /= n
                d_t2i[i, j] /= n
        return loss_i2t / n, loss_t2i / n, d_i2t, d_t2i

    def contrastive_core(logits):
        a, b, c, d = contrastive_core_impl(np.ascontiguousarray(logits, dtype=np.float64))
        return float(a), float(b), c, d

    @njit(cache=True)
    def densify_impl(indptr, indices, values, n_cols):
        n_rows = indptr.shape[0] - 1
        out = np.zeros((n_rows, n_cols))
        for r in range(n_rows):
            for p in range(indptr[r], indptr[r + 1]):
                out[r, indices[p]] += values[p]
        return out

    def densify(indptr, indices, values, n_cols):
        return densify_impl(indptr, indices, values, n_cols)

    @njit(cache=True)
    def csr_matvec(indptr, indices, values, theta):
        n_rows = indptr.shape[0] - 1
        out = np.zeros(n_rows)
        for r in range(n_rows):
            acc = 0.0
            for p in range(indptr[r], indptr[r + 1]):
                acc += values[p] * theta[indices[p]]
            out[r] = acc
        return out

    @njit(cache=True)
    def csr_scatter(out, indptr, indices, values, coeffs):
        n_rows = indptr.shape[0] - 1
        for r in range(n_rows):
            c = coeffs[r]
            if c == 0.0:
                continue
            for p in range(indptr[r], indptr[r + 1]):
                out[indices[p]] += values[p] * c

    return SimpleNamespace(
        name="numba",
        contrastive_core=contrastive_core,
        densify=densify,
        csr_matvec=csr_matvec,
        csr_scatter=csr_scatter,
    )


def _numba_requested() -> bool:
    return os.environ.get(ENV_FLAG, "0").strip().lower() in ("", "0", "false", "no")


try:
    NUMBA = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA = None

ACTIVE = NUMBA if (NUMBA is not None and _numba_requested()) else NUMPY

contrastive_core = ACTIVE.contrastive_core
densify = ACTIVE.densify
csr_matvec = ACTIVE.csr_matvec
csr_scatter = ACTIVE.csr_scatter


def backend_name() -> str:
    return ACTIVE.name
