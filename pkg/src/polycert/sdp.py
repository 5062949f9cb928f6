"""Desk-scale semidefinite programming.

Solves
    min  sum_b <C_b, X_b> + q'u
    s.t. sum_b <A_ib, X_b> + (B u)_i = b_i,   i = 1..m
         X_b >= 0 (PSD blocks),  u free,

by a primal-dual path-following interior-point method: the HKM search
direction with Mehrotra predictor-corrector, dense Schur complement, and a
fixed 0.98 fraction-to-boundary rule.  The dual is

    max  b'y   s.t.  Z_b = C_b - sum_i y_i A_ib >= 0,  B'y = q.

Free scalars are kept native: they enter the Schur system as an extra
symmetric-quasidefinite border (no positive/negative splitting), which the
SDPA export performs instead since that format has no free cone.

Cost per iteration is dominated by forming the m x m Schur complement
(sparse-constraint assembly, see kernels.schur_rows) and its dense Cholesky
factorization — O(m^3).  That is the documented design point: problems here
stay at a few thousand constraints.

Everything is deterministic: fixed block and constraint ordering, no
randomized pivoting, single-threaded apart from BLAS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import kernels

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITERS = "max-iters"
NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class SolverSettings:
    tol: float = 1e-8
    max_iters: int = 200
    step_frac: float = 0.98
    # dual objective magnitude that triggers a ray check, and the relative
    # residual under which the normalized ray counts as a certificate
    infeas_obj_threshold: float = 1e8
    infeas_ray_tol: float = 1e-7
    trace: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class _PsdBlockData:
    size: int
    # constraint triplets, upper triangle (r <= c), sorted by constraint id
    cptr: np.ndarray = None
    rr: np.ndarray = None
    cc: np.ndarray = None
    vv: np.ndarray = None
    S: sp.csr_matrix = None  # (m, n*n) full symmetric vec(A_i) rows
    C: np.ndarray = None


class SdpProblem:
    """Block-diagonal SDP in equality form; build through SdpProblemBuilder."""

    def __init__(self, blocks, psd_data, b, Bfree, q, nfree, dropped_rows=0):
        self.blocks = blocks          # list of ("psd", size) / ("free", size)
        self.psd_data = psd_data      # list of _PsdBlockData, one per psd block
        self.b = b
        self.Bfree = Bfree            # csr (m, nfree) or None
        self.q = q                    # (nfree,)
        self.nfree = nfree
        self.m = b.shape[0]
        self.dropped_rows = dropped_rows

    @property
    def psd_sizes(self):
        return [d.size for d in self.psd_data]


class SdpProblemBuilder:
    """Accumulates blocks, constraints and objective, then freezes arrays."""

    def __init__(self):
        self._blocks = []              # ("psd", n) or ("free", n)
        self._psd_entries = []         # per psd block: dict (con,r,c) -> v
        self._psd_obj = []             # per psd block: dict (r,c) -> v
        self._free_base = []           # starting offset of each free block
        self._nfree = 0
        self._free_entries = {}        # (con, col) -> v
        self._free_obj = {}            # col -> v
        self._rhs = []
        self._block_of_psd = []        # psd ordinal -> block index

    # -- structure ----------------------------------------------------------

    def add_psd_block(self, size: int) -> int:
        if size < 1:
            raise ValueError("block size must be >= 1")
        self._blocks.append(("psd", size))
        self._psd_entries.append({})
        self._psd_obj.append({})
        self._block_of_psd.append(len(self._blocks) - 1)
        return len(self._psd_entries) - 1

    def add_free_block(self, size: int) -> int:
        if size < 1:
            raise ValueError("block size must be >= 1")
        self._blocks.append(("free", size))
        base = self._nfree
        self._free_base.append(base)
        self._nfree += size
        return base

    def add_constraint(self, rhs: float) -> int:
        self._rhs.append(float(rhs))
        return len(self._rhs) - 1

    # -- data ---------------------------------------------------------------

    def add_psd_entry(self, con: int, blk: int, r: int, c: int, v: float):
        """Coefficient of X_blk[r,c] (== X_blk[c,r]) in constraint `con`."""
        if r > c:
            r, c = c, r
        key = (con, r, c)
        d = self._psd_entries[blk]
        d[key] = d.get(key, 0.0) + float(v)

    def add_free_entry(self, con: int, col: int, v: float):
        key = (con, col)
        self._free_entries[key] = self._free_entries.get(key, 0.0) + float(v)

    def add_psd_obj(self, blk: int, r: int, c: int, v: float):
        if r > c:
            r, c = c, r
        d = self._psd_obj[blk]
        d[(r, c)] = d.get((r, c), 0.0) + float(v)

    def add_free_obj(self, col: int, v: float):
        self._free_obj[col] = self._free_obj.get(col, 0.0) + float(v)

    # -- freeze -------------------------------------------------------------

    def build(self) -> SdpProblem:
        m = len(self._rhs)
        b = np.array(self._rhs, dtype=np.float64)
        psd_data = []
        for entries, obj, blk_idx in zip(self._psd_entries, self._psd_obj,
                                         self._block_of_psd):
            n = self._blocks[blk_idx][1]
            d = _PsdBlockData(n)
            items = sorted(entries.items())
            cons = np.array([k[0] for k, _ in items], dtype=np.int64)
            d.rr = np.array([k[1] for k, _ in items], dtype=np.int64)
            d.cc = np.array([k[2] for k, _ in items], dtype=np.int64)
            d.vv = np.array([v for _, v in items], dtype=np.float64)
            cptr = np.zeros(m + 1, dtype=np.int64)
            np.add.at(cptr, cons + 1, 1)
            d.cptr = np.cumsum(cptr)
            # full symmetric vec rows for the Schur product
            rows, cols, vals = [], [], []
            for (con, r, c), v in items:
                rows.append(con); cols.append(r * n + c); vals.append(v)
                if r != c:
                    rows.append(con); cols.append(c * n + r); vals.append(v)
            d.S = sp.csr_matrix((vals, (rows, cols)), shape=(m, n * n))
            C = np.zeros((n, n))
            for (r, c), v in obj.items():
                C[r, c] = v
                C[c, r] = v
            d.C = C
            psd_data.append(d)
        if self._nfree:
            rows = [k[0] for k in self._free_entries]
            cols = [k[1] for k in self._free_entries]
            vals = list(self._free_entries.values())
            Bfree = sp.csr_matrix((vals, (rows, cols)), shape=(m, self._nfree))
            q = np.zeros(self._nfree)
            for col, v in self._free_obj.items():
                q[col] = v
        else:
            Bfree, q = None, np.zeros(0)
        prob = SdpProblem(list(self._blocks), psd_data, b, Bfree, q, self._nfree)
        return _drop_dependent_rows(prob)


def _drop_dependent_rows(prob: SdpProblem) -> SdpProblem:
    """Remove numerically dependent constraint rows (consistent ones only).

    Uses pivoted Cholesky of the constraint Gram matrix with a tight relative
    threshold, so only effectively exact dependencies are removed.  An
    inconsistent dependency is left in place for the solver to flag as
    infeasible.
    """
    m = prob.m
    if m == 0:
        return prob
    G = np.zeros((m, m))
    for d in prob.psd_data:
        G += (d.S @ d.S.T).toarray()
    if prob.Bfree is not None:
        G += (prob.Bfree @ prob.Bfree.T).toarray()
    diag = np.diag(G).copy()
    scale = np.sqrt(np.maximum(diag, 1e-300))
    Gs = G / scale[:, None] / scale[None, :]
    # Forming G already floors residual pivots near machine epsilon, so the
    # threshold must sit above that floor; 1e-13 still keeps rows whose
    # relative difference exceeds ~3e-7.
    try:
        chol, piv, rank, _ = sla.lapack.dpstrf(Gs, tol=1e-13, lower=1)
    except Exception:
        return prob
    piv = piv - 1
    if rank == m:
        return prob
    keep = np.sort(piv[:rank])
    dropset = set(piv[rank:].tolist())
    # consistency: dependent row must have rhs implied by the kept rows
    Gkk = G[np.ix_(keep, keep)]
    for j in sorted(dropset):
        lam = np.linalg.lstsq(Gkk, G[keep, j], rcond=None)[0]
        implied = lam @ prob.b[keep]
        if abs(implied - prob.b[j]) > 1e-8 * (1 + abs(prob.b[j])):
            return prob  # inconsistent -> keep everything, solver will report
    keep_list = keep.tolist()
    remap = {old: new for new, old in enumerate(keep_list)}
    new_psd = []
    for d in prob.psd_data:
        nd = _PsdBlockData(d.size)
        mask = np.array([c in remap for c in _expand_cons(d.cptr)], dtype=bool)
        cons = np.array([remap[c] for c in _expand_cons(d.cptr)[mask]],
                        dtype=np.int64) if mask.any() else np.zeros(0, np.int64)
        nd.rr = d.rr[mask]
        nd.cc = d.cc[mask]
        nd.vv = d.vv[mask]
        order = np.argsort(cons, kind="stable")
        cons = cons[order]
        nd.rr, nd.cc, nd.vv = nd.rr[order], nd.cc[order], nd.vv[order]
        cptr = np.zeros(rank + 1, dtype=np.int64)
        np.add.at(cptr, cons + 1, 1)
        nd.cptr = np.cumsum(cptr)
        nd.S = d.S[keep_list]
        nd.C = d.C
        new_psd.append(nd)
    Bf = prob.Bfree[keep_list] if prob.Bfree is not None else None
    out = SdpProblem(prob.blocks, new_psd, prob.b[keep], Bf, prob.q,
                     prob.nfree, dropped_rows=m - rank)
    return out


def _expand_cons(cptr):
    out = np.zeros(cptr[-1], dtype=np.int64)
    for j in range(cptr.shape[0] - 1):
        out[cptr[j]:cptr[j + 1]] = j
    return out


@dataclass
class SdpSolution:
    status: str
    X: list = field(default_factory=list)   # psd block matrices
    u: np.ndarray = None                    # free variables
    y: np.ndarray = None
    Z: list = field(default_factory=list)
    obj_primal: float = math.nan
    obj_dual: float = math.nan
    res_primal: float = math.nan
    res_dual: float = math.nan
    rel_gap: float = math.nan
    iters: int = 0
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# solver internals


def _apply_A(prob, Xs, u):
    out = np.zeros(prob.m)
    for d, X in zip(prob.psd_data, Xs):
        out += d.S @ X.reshape(-1)
    if prob.nfree:
        out += prob.Bfree @ u
    return out


def _apply_AT(d, y):
    """sum_i y_i A_i for one psd block, dense symmetric.

    S rows hold the full symmetric pattern, so the reshape is already the
    assembled matrix; the symmetrization only scrubs rounding.
    """
    n = d.size
    M = (d.S.T @ y).reshape(n, n)
    return 0.5 * (M + M.T)


def _max_step(X, D, chol_X=None):
    """sup alpha with X + alpha D psd, via eigenvalues of L^-1 D L^-T."""
    n = X.shape[0]
    L = chol_X if chol_X is not None else np.linalg.cholesky(X)
    T = sla.solve_triangular(L, D, lower=True)
    T = sla.solve_triangular(L, T.T, lower=True)
    w = np.linalg.eigvalsh(0.5 * (T + T.T))
    wmin = w[0]
    if wmin >= -1e-16:
        return np.inf
    return -1.0 / wmin


def _schur_complement(prob, Xs, Zis, chunk=512):
    m = prob.m
    M = np.zeros((m, m))
    for d, X, Zi in zip(prob.psd_data, Xs, Zis):
        if d.vv.shape[0] == 0:
            continue
        for j0 in range(0, m, chunk):
            j1 = min(j0 + chunk, m)
            W = kernels.schur_rows(d.cptr, d.rr, d.cc, d.vv, X, Zi, j0, j1)
            M[:, j0:j1] += d.S @ W.reshape(j1 - j0, -1).T
    return 0.5 * (M + M.T)


def solve(prob: SdpProblem, settings: SolverSettings | None = None) -> SdpSolution:
    """Run the interior-point method; never raises on numerical breakdown."""
    st = settings or SolverSettings()
    if not prob.psd_sizes:
        raise ValueError("problem has no PSD blocks")
    if prob.nfree:
        return _solve_with_free(prob, st)
    return _solve_psd(prob, st)


def _solve_with_free(prob: SdpProblem, st: SolverSettings) -> SdpSolution:
    """Eliminate free variables, solve the pure PSD problem, lift back.

    Free variables make the interior-point normal equations rank deficient
    (any constraint row touching only free variables vanishes from the Schur
    complement), so instead of fighting that inside the iteration the problem
    is projected onto null(Bfree') first: the reduced constraints keep full
    row rank, and the lifted dual point satisfies Bfree' y = q exactly by
    construction.
    """
    B = prob.Bfree.toarray()
    m = prob.m
    U, sv, Vt = np.linalg.svd(B)
    r = int((sv > 1e-12 * sv[0]).sum()) if sv.size else 0
    N = U[:, r:]
    y0 = U[:, :r] @ ((Vt[:r] @ prob.q) / sv[:r]) if r else np.zeros(m)
    if np.abs(B.T @ y0 - prob.q).max(initial=0.0) > 1e-8 * (
            1.0 + np.abs(prob.q).max(initial=0.0)):
        # no dual point satisfies the free-variable equations: the objective
        # runs away along a feasible free direction
        return SdpSolution(status=UNBOUNDED)

    mred = N.shape[1]
    psd2 = []
    for d in prob.psd_data:
        n = d.size
        S2 = np.asarray(N.T @ d.S)
        if S2.size:
            S2[np.abs(S2) < 1e-15 * (1.0 + np.abs(S2).max())] = 0.0
        nd = _PsdBlockData(n)
        cons, rr, cc, vv = [], [], [], []
        for k in range(mred):
            Mk = S2[k].reshape(n, n)
            iu, ju = np.nonzero(np.triu(Mk))
            cons.append(np.full(iu.shape[0], k, dtype=np.int64))
            rr.append(iu)
            cc.append(ju)
            vv.append(Mk[iu, ju])
        cons = np.concatenate(cons) if cons else np.zeros(0, np.int64)
        nd.rr = np.concatenate(rr) if rr else np.zeros(0, np.int64)
        nd.cc = np.concatenate(cc) if cc else np.zeros(0, np.int64)
        nd.vv = np.concatenate(vv) if vv else np.zeros(0)
        cptr = np.zeros(mred + 1, dtype=np.int64)
        np.add.at(cptr, cons + 1, 1)
        nd.cptr = np.cumsum(cptr)
        nd.S = sp.csr_matrix(S2, shape=(mred, n * n))
        nd.C = d.C - _apply_AT(d, y0)
        psd2.append(nd)
    blocks2 = [bl for bl in prob.blocks if bl[0] == "psd"]
    prob2 = SdpProblem(blocks2, psd2, N.T @ prob.b, None, np.zeros(0), 0,
                       dropped_rows=prob.dropped_rows)

    sol = _solve_psd(prob2, st)

    yred = sol.y if sol.y is not None else np.zeros(mred)
    if sol.status == INFEASIBLE:
        # the reduced dual ray lifts without the particular point, keeping
        # b'y > 0 and Bfree'y = 0
        sol.y = N @ yred
        return sol
    sol.y = y0 + N @ yred
    if not sol.X:
        return sol
    # least squares recovery of the free variables, then original residuals
    resid = prob.b - _apply_A(prob, sol.X, np.zeros(prob.nfree))
    sol.u = Vt[:r].T @ ((U[:, :r].T @ resid) / sv[:r]) if r \
        else np.zeros(prob.nfree)
    rp = resid - B @ sol.u
    normb = 1.0 + np.linalg.norm(prob.b, np.inf)
    normC = 1.0 + max((np.abs(d.C).max() if d.C.size else 0.0)
                      for d in prob.psd_data)
    normC = max(normC, 1.0 + np.abs(prob.q).max(initial=0.0))
    res_d = max(np.linalg.norm(d.C - Z - _apply_AT(d, sol.y), np.inf)
                for d, Z in zip(prob.psd_data, sol.Z))
    res_d = max(res_d, np.abs(prob.q - B.T @ sol.y).max(initial=0.0))
    sol.res_primal = np.linalg.norm(rp, np.inf) / normb
    sol.res_dual = res_d / normC
    sol.obj_primal = sum(np.tensordot(d.C, X)
                         for d, X in zip(prob.psd_data, sol.X))
    sol.obj_primal += prob.q @ sol.u
    sol.obj_dual = prob.b @ sol.y
    sol.rel_gap = abs(sol.obj_primal - sol.obj_dual) / (
        1 + abs(sol.obj_primal) + abs(sol.obj_dual))
    return sol


def _solve_psd(prob: SdpProblem, st: SolverSettings) -> SdpSolution:
    m = prob.m
    sizes = prob.psd_sizes
    ntot = sum(sizes)

    normb = 1.0 + np.linalg.norm(prob.b, np.inf) if m else 1.0
    normC = 1.0 + max((np.abs(d.C).max() if d.C.size else 0.0)
                      for d in prob.psd_data)

    # initial point: scaled identity, sized from data norms
    anorms = np.zeros(m)
    for d in prob.psd_data:
        anorms += np.asarray(d.S.multiply(d.S).sum(axis=1)).ravel()
    anorms = np.sqrt(anorms)
    nmax = max(sizes)
    if m:
        xi_p = max(10.0, math.sqrt(nmax),
                   nmax * float(np.max((1 + np.abs(prob.b)) / (1 + anorms))))
    else:
        xi_p = max(10.0, math.sqrt(nmax))
    xi_d = max(10.0, math.sqrt(nmax), normC - 1.0,
               float(anorms.max(initial=0.0)))
    Xs = [xi_p * np.eye(n) for n in sizes]
    Zs = [xi_d * np.eye(n) for n in sizes]
    y = np.zeros(m)
    u = np.zeros(0)

    sol = SdpSolution(status=MAX_ITERS)
    if m == 0:
        # pure feasibility: the scaled identity is the certificate
        sol.status = OPTIMAL
        sol.X, sol.Z, sol.y, sol.u = Xs, Zs, y, u
        sol.obj_primal = sum(np.tensordot(d.C, X) for d, X in zip(prob.psd_data, Xs))
        sol.obj_dual = 0.0
        sol.res_primal = sol.res_dual = 0.0
        sol.rel_gap = 0.0
        return sol

    def finish(failure_status):
        # a wedged iterate with a converged dual can still yield the exact
        # primal through the optimal-face projection
        if sol.X and sol.res_dual <= st.tol:
            fix = _purify_primal(prob, sol.X, sol.Z, sol.y, st, normb, normC)
            if fix is not None:
                sol.X, sol.res_primal, sol.obj_primal, sol.rel_gap = fix
                sol.status = OPTIMAL
                return sol
        sol.status = failure_status
        return sol

    tau = st.step_frac
    for it in range(st.max_iters):
        # residuals
        rp = prob.b - _apply_A(prob, Xs, u)
        Rds = []
        for d, Z in zip(prob.psd_data, Zs):
            Rds.append(d.C - Z - _apply_AT(d, y))

        pobj = sum(np.tensordot(d.C, X) for d, X in zip(prob.psd_data, Xs))
        dobj = prob.b @ y
        gap_abs = abs(pobj - dobj)
        rel_gap = gap_abs / (1 + abs(pobj) + abs(dobj))
        res_p = np.linalg.norm(rp, np.inf) / normb
        res_d = max(np.linalg.norm(R, np.inf) for R in Rds) / normC

        mu = sum(np.tensordot(X, Z) for X, Z in zip(Xs, Zs)) / ntot
        if st.trace:
            sol.trace.append({"iter": it, "mu": mu, "res_primal": res_p,
                              "res_dual": res_d, "rel_gap": rel_gap,
                              "obj_primal": pobj, "obj_dual": dobj,
                              "sigma": math.nan, "alpha_p": math.nan,
                              "alpha_d": math.nan})

        sol.X, sol.Z, sol.y, sol.u = Xs, Zs, y, u
        sol.obj_primal, sol.obj_dual = pobj, dobj
        sol.res_primal, sol.res_dual, sol.rel_gap = res_p, res_d, rel_gap
        sol.iters = it

        if max(res_p, res_d, rel_gap) <= st.tol:
            sol.status = OPTIMAL
            return sol

        # infeasibility rays (checked only once the objective runs away)
        if dobj > st.infeas_obj_threshold * normb and res_d <= 1e-6:
            ray = _dual_ray_residual(prob, y)
            if ray <= st.infeas_ray_tol:
                sol.status = INFEASIBLE
                return sol
        if pobj < -st.infeas_obj_threshold * normC and res_p <= 1e-6:
            sol.status = UNBOUNDED
            return sol

        # factorizations
        try:
            Lzs = [np.linalg.cholesky(Z) for Z in Zs]
            Lxs = [np.linalg.cholesky(X) for X in Xs]
        except np.linalg.LinAlgError:
            return finish(NUMERICAL_FAILURE)
        Zis = []
        for Lz, n in zip(Lzs, sizes):
            Li = sla.solve_triangular(Lz, np.eye(n), lower=True)
            Zis.append(Li.T @ Li)

        M = _schur_complement(prob, Xs, Zis)
        try:
            cholM = sla.cho_factor(M, lower=True)

            def solveM(rhs):
                return sla.cho_solve(cholM, rhs)
        except np.linalg.LinAlgError:
            # cancellation while forming M can leave small negative
            # eigenvalues once mu is tiny; the exact matrix is psd, so
            # clip the spectrum instead of giving up
            w, Q = np.linalg.eigh(M)
            if w[-1] <= 0:
                return finish(NUMERICAL_FAILURE)
            winv = 1.0 / np.maximum(w, 1e-14 * w[-1])

            def solveM(rhs):
                return Q @ (winv * (Q.T @ rhs))

        def direction(Rcs):
            h1 = rp.copy()
            for d, Rc, Rd, X, Zi in zip(prob.psd_data, Rcs, Rds, Xs, Zis):
                T = (Rc - X @ Rd) @ Zi
                h1 -= d.S @ T.reshape(-1)
            dy = solveM(h1)
            dZs, dXs = [], []
            for d, Rc, Rd, X, Zi in zip(prob.psd_data, Rcs, Rds, Xs, Zis):
                dZ = Rd - _apply_AT(d, dy)
                dX = (Rc - X @ dZ) @ Zi
                dX = 0.5 * (dX + dX.T)
                dZs.append(dZ)
                dXs.append(dX)
            return dXs, dy, dZs

        try:
            # predictor (affine scaling)
            Rcs_aff = [-(X @ Z) for X, Z in zip(Xs, Zs)]
            dXa, dya, dZa = direction(Rcs_aff)
            ap = min((_max_step(X, dX, L) for X, dX, L in zip(Xs, dXa, Lxs)),
                     default=np.inf)
            ad = min((_max_step(Z, dZ, L) for Z, dZ, L in zip(Zs, dZa, Lzs)),
                     default=np.inf)
            ap = min(1.0, tau * ap)
            ad = min(1.0, tau * ad)
            mu_aff = sum(np.tensordot(X + ap * dX, Z + ad * dZ)
                         for X, dX, Z, dZ in zip(Xs, dXa, Zs, dZa)) / ntot
            sigma = min(1.0, max(0.0, (max(mu_aff, 0.0) / mu) ** 3))

            # corrector
            Rcs = [sigma * mu * np.eye(n) - (X @ Z) - (dX @ dZ)
                   for n, X, Z, dX, dZ in zip(sizes, Xs, Zs, dXa, dZa)]
            dXs, dy, dZs = direction(Rcs)
            ap = min((_max_step(X, dX, L) for X, dX, L in zip(Xs, dXs, Lxs)),
                     default=np.inf)
            ad = min((_max_step(Z, dZ, L) for Z, dZ, L in zip(Zs, dZs, Lzs)),
                     default=np.inf)
            ap = min(1.0, tau * ap)
            ad = min(1.0, tau * ad)
        except np.linalg.LinAlgError:
            return finish(NUMERICAL_FAILURE)
        if not (np.isfinite(ap) and np.isfinite(ad)) or ap <= 1e-14 or ad <= 1e-14:
            return finish(NUMERICAL_FAILURE)
        if st.trace:
            sol.trace[-1].update(sigma=sigma, alpha_p=ap, alpha_d=ad)

        Xs = [0.5 * ((X + ap * dX) + (X + ap * dX).T) for X, dX in zip(Xs, dXs)]
        Zs = [0.5 * ((Z + ad * dZ) + (Z + ad * dZ).T) for Z, dZ in zip(Zs, dZs)]
        y = y + ad * dy

    return finish(MAX_ITERS)


def _purify_primal(prob, Xs, Zs, y, st, normb, normC):
    """Project the primal onto the optimal face read off from Z.

    Near a degenerate optimum the iteration can wedge with the dual side
    converged while a primal block sits on the cone boundary and blocks
    every step.  With the gap closed, complementarity says the true X
    lives in the small-eigenvalue subspace of each Z block, so solve the
    feasibility least squares there.  A wedged iterate can freeze a Z
    eigenvalue partway through its descent to zero, so when the base face
    does not fit, the face is enlarged one eigen-direction at a time in
    order of ascending eigenvalue.  Every candidate passes the same gates
    (psd up to round-off, primal residual and duality gap within
    tolerance), so enlargement can only turn a rejection into a verified
    optimum.  Returns (Xs, res_p, obj, gap) or None.
    """
    eigs = [np.linalg.eigh(Z) for Z in Zs]
    # threshold against the dual scale across all blocks: a block whose Z
    # vanishes entirely leaves its X unrestricted
    zmax = max(w[-1] for w, _ in eigs)
    dims = [int((w <= 1e-6 * max(zmax, 1e-300)).sum()) for w, _ in eigs]
    ladder = sorted(
        (w[k], bi)
        for bi, (w, _) in enumerate(eigs)
        for k in range(dims[bi], w.shape[0])
    )[:8]
    for step in range(len(ladder) + 1):
        if step:
            dims[ladder[step - 1][1]] += 1
        out = _face_fit(prob, eigs, dims, y, st, normb)
        if out is not None:
            return out
    return None


def _face_fit(prob, eigs, dims, y, st, normb):
    faces = [Q[:, :k] for (_, Q), k in zip(eigs, dims)]
    cols = []
    colmap = []  # (block, p, q)
    for bi, (d, Vf) in enumerate(zip(prob.psd_data, faces)):
        f = Vf.shape[1]
        if f == 0:
            continue
        # rows of S applied to the face basis pairs
        SV = np.asarray(d.S @ np.kron(Vf, Vf))  # (m, f*f)
        for p in range(f):
            for q in range(p, f):
                col = SV[:, p * f + q]
                if p != q:
                    col = col + SV[:, q * f + p]
                cols.append(col)
                colmap.append((bi, p, q))
    if cols:
        G = np.column_stack(cols)
        wsol, *_ = np.linalg.lstsq(G, prob.b, rcond=None)
    else:
        wsol = np.zeros(0)
    Xn = []
    for bi, (d, Vf) in enumerate(zip(prob.psd_data, faces)):
        f = Vf.shape[1]
        W = np.zeros((f, f))
        for (bj, p, q), v in zip(colmap, wsol):
            if bj == bi:
                W[p, q] = W[q, p] = v
        if f:
            ew, Q = np.linalg.eigh(W)
            if ew.min() < -1e-7 * max(abs(ew).max(), 1.0):
                return None
            W = (Q * np.maximum(ew, 0.0)) @ Q.T
            Xn.append(Vf @ W @ Vf.T)
        else:
            Xn.append(np.zeros((d.size, d.size)))
    rp = prob.b - _apply_A(prob, Xn, np.zeros(0))
    res_p = np.linalg.norm(rp, np.inf) / normb
    if res_p > st.tol:
        return None
    pobj = sum(np.tensordot(d.C, X) for d, X in zip(prob.psd_data, Xn))
    dobj = prob.b @ y
    rel_gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
    # the dual objective carries an error of order |y| times the wedged
    # primal residual, so the gap cannot be certified tighter than that;
    # the gate only needs to reject fits on the wrong face, whose gaps
    # come out orders of magnitude larger
    if rel_gap > max(100.0 * st.tol, 1e-6):
        return None
    return Xn, res_p, pobj, rel_gap


def _dual_ray_residual(prob, y):
    """Residual of y as a primal-infeasibility certificate, scaled by b'y."""
    by = prob.b @ y
    if by <= 0:
        return np.inf
    yh = y / by
    worst = 0.0
    for d in prob.psd_data:
        Aty = _apply_AT(d, yh)
        w = np.linalg.eigvalsh(Aty)
        worst = max(worst, float(w[-1]))
    if prob.nfree:
        worst = max(worst, float(np.abs(prob.Bfree.T @ yh).max(initial=0.0)))
    return worst


TRACE_FIELDS = ["iter", "mu", "res_primal", "res_dual", "rel_gap",
                "sigma", "alpha_p", "alpha_d",
                "obj_primal", "obj_dual"]


def trace_csv(sol: SdpSolution) -> str:
    """Iteration trace as CSV (produced when settings.trace is set)."""
    lines = [",".join(TRACE_FIELDS)]
    for row in sol.trace:
        lines.append(",".join(repr(row[f]) if isinstance(row[f], float)
                              else str(row[f]) for f in TRACE_FIELDS))
    return "\n".join(lines) + "\n"


@dataclass
class InfeasibilityReport:
    b_dot_y: float
    max_eig_ATy: float       # lambda_max of sum y_i A_i per normalized ray
    free_residual: float     # |B'y| inf-norm, normalized
    ray: np.ndarray = None


def certify_infeasible(prob: SdpProblem, sol: SdpSolution) -> InfeasibilityReport:
    """Package the dual improving ray backing an infeasible status."""
    if sol.status != INFEASIBLE:
        raise ValueError(f"solution status is {sol.status!r}, not infeasible")
    y = sol.y
    by = prob.b @ y
    yh = y / by
    worst = 0.0
    for d in prob.psd_data:
        w = np.linalg.eigvalsh(_apply_AT(d, yh))
        worst = max(worst, float(w[-1]))
    fr = 0.0
    if prob.nfree:
        fr = float(np.abs(prob.Bfree.T @ yh).max(initial=0.0))
    return InfeasibilityReport(b_dot_y=by, max_eig_ATy=worst,
                               free_residual=fr, ray=yh)
