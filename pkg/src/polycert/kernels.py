"""Numeric hot loops, JIT-compiled with numba when available.

Two families live here:
  * batched evaluation of compiled polynomials (vector fields, bases,
    Lyapunov functions) over arrays of sample points;
  * the Schur-complement row assembly inside the interior-point SDP solver.

Every kernel has a pure-numpy twin.  Set POLYCERT_DISABLE_NUMBA=1 to force
the numpy path (or run on a machine without numba); `backend()` reports
which one is active.  The two paths compute the same quantities with the
same summation order per term, so results agree to rounding.

A "compiled" polynomial here is the triple (pows, coefs) produced by
`compile_polys`: an integer exponent matrix over a fixed variable column
layout plus a coefficient vector, termwise.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("POLYCERT_DISABLE_NUMBA", "") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("numba disabled by POLYCERT_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        # decorator stub so the jitted definitions below stay importable
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# compiled polynomial arrays


def compile_polys(polys, var_ids):
    """Pack polynomials into (ptr, pows, coefs) arrays over a column layout.

    var_ids fixes the column order: column j of a sample matrix holds the
    value of variable var_ids[j].  Returns
      ptr:   int64 (npoly+1,) term ranges per polynomial
      pows:  int64 (nterms_total, len(var_ids)) exponents
      coefs: float64 (nterms_total,)
    Term order within each polynomial is graded-lex, so evaluation order
    (and therefore rounding) is deterministic.
    """
    cols = {vid: j for j, vid in enumerate(var_ids)}
    ptr = [0]
    rows = []
    coefs = []
    for p in polys:
        for m, c in p.sorted_terms():
            row = [0] * len(var_ids)
            for vid, e in m.pairs:
                if vid not in cols:
                    raise ValueError(
                        f"polynomial uses variable id {vid} outside the layout")
                row[cols[vid]] = e
            rows.append(row)
            coefs.append(c)
        ptr.append(len(rows))
    if rows:
        pows = np.array(rows, dtype=np.int64)
    else:
        pows = np.zeros((0, len(var_ids)), dtype=np.int64)
    return (np.array(ptr, dtype=np.int64), pows,
            np.array(coefs, dtype=np.float64))


@njit(cache=True)
def _eval_many_jit(ptr, pows, coefs, X, out):
    npoly = ptr.shape[0] - 1
    n = X.shape[0]
    nv = pows.shape[1]
    for i in range(n):
        for p in range(npoly):
            for t in range(ptr[p], ptr[p + 1]):
                term = coefs[t]
                for j in range(nv):
                    e = pows[t, j]
                    if e:
                        x = X[i, j]
                        w = x
                        for _ in range(e - 1):
                            w *= x
                        term *= w
                out[i, p] += term


def _eval_many_numpy(ptr, pows, coefs, X, out):
    npoly = ptr.shape[0] - 1
    for p in range(npoly):
        acc = np.zeros(X.shape[0])
        for t in range(ptr[p], ptr[p + 1]):
            term = np.full(X.shape[0], coefs[t])
            for j in range(pows.shape[1]):
                e = pows[t, j]
                if e:
                    w = X[:, j].copy()
                    for _ in range(e - 1):
                        w *= X[:, j]
                    term *= w
            acc += term
        out[:, p] += acc


def eval_many(ptr, pows, coefs, X):
    """Evaluate a packed polynomial vector at a batch of points.

    X: float64 (N, nvars) in the layout used by compile_polys.
    Returns float64 (N, npoly).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    out = np.zeros((X.shape[0], ptr.shape[0] - 1))
    if HAS_NUMBA:
        _eval_many_jit(ptr, pows, coefs, X, out)
    else:
        _eval_many_numpy(ptr, pows, coefs, X, out)
    return out


# ---------------------------------------------------------------------------
# SDP Schur-complement assembly
#
# For constraint matrices A_j (sparse symmetric triplets, upper triangle)
# the solver needs W_j = X A_j Z^{-1} for a range of j.  Each triplet
# (r, c, v) contributes v * (X[:,r] Zi[c,:] + X[:,c] Zi[r,:]) (one term when
# r == c), so W_j is a short sum of rank-one outer products.


@njit(cache=True)
def _schur_rows_jit(cptr, rr, cc, vv, X, Zi, j0, j1, out):
    n = X.shape[0]
    for j in range(j0, j1):
        k = j - j0
        for t in range(cptr[j], cptr[j + 1]):
            r = rr[t]
            c = cc[t]
            v = vv[t]
            for a in range(n):
                xa = v * X[a, r]
                for b in range(n):
                    out[k, a, b] += xa * Zi[c, b]
            if r != c:
                for a in range(n):
                    xa = v * X[a, c]
                    for b in range(n):
                        out[k, a, b] += xa * Zi[r, b]


def _schur_rows_numpy(cptr, rr, cc, vv, X, Zi, j0, j1, out):
    for j in range(j0, j1):
        k = j - j0
        for t in range(cptr[j], cptr[j + 1]):
            r, c, v = rr[t], cc[t], vv[t]
            out[k] += v * np.outer(X[:, r], Zi[c, :])
            if r != c:
                out[k] += v * np.outer(X[:, c], Zi[r, :])


def schur_rows(cptr, rr, cc, vv, X, Zi, j0, j1):
    """W_j = X A_j Zi for j in [j0, j1); returns (j1-j0, n, n)."""
    n = X.shape[0]
    out = np.zeros((j1 - j0, n, n))
    if HAS_NUMBA:
        _schur_rows_jit(cptr, rr, cc, vv, X, Zi, j0, j1, out)
    else:
        _schur_rows_numpy(cptr, rr, cc, vv, X, Zi, j0, j1, out)
    return out
