import numpy as np
import pytest

from polycert import sdp
from polycert.sdp import SdpProblemBuilder, SolverSettings, certify_infeasible, solve
from polycert.sdpa_io import read_sdpa, write_sdpa


# ---------------------------------------------------------------------------
# problem builders shared with the SDPA / external-solver checks


def prob_min_x_psd():
    # min x s.t. [[x,1],[1,x]] >= 0; optimum x* = 1
    bld = SdpProblemBuilder()
    blk = bld.add_psd_block(2)
    bld.add_free_block(1)
    c0 = bld.add_constraint(0.0)
    bld.add_psd_entry(c0, blk, 0, 0, 1.0)
    bld.add_free_entry(c0, 0, -1.0)
    c1 = bld.add_constraint(0.0)
    bld.add_psd_entry(c1, blk, 1, 1, 1.0)
    bld.add_free_entry(c1, 0, -1.0)
    c2 = bld.add_constraint(1.0)
    bld.add_psd_entry(c2, blk, 0, 1, 0.5)
    bld.add_free_obj(0, 1.0)
    return bld.build()


def prob_trace_simplex():
    # min <diag(2,5,-1), X> s.t. tr X = 1, X >= 0; optimum -1 at e3 e3'
    bld = SdpProblemBuilder()
    blk = bld.add_psd_block(3)
    c0 = bld.add_constraint(1.0)
    for i in range(3):
        bld.add_psd_entry(c0, blk, i, i, 1.0)
    for i, v in enumerate([2.0, 5.0, -1.0]):
        bld.add_psd_obj(blk, i, i, v)
    return bld.build()


def prob_random_feasible(seed=0, n=4, m=6, nfree=2):
    rng = np.random.default_rng(seed)
    bld = SdpProblemBuilder()
    blk = bld.add_psd_block(n)
    if nfree:
        bld.add_free_block(nfree)
    X0 = rng.normal(size=(n, n))
    X0 = X0 @ X0.T + 0.5 * np.eye(n)
    u0 = rng.normal(size=nfree)
    B = rng.normal(size=(m, nfree))
    rows = []
    for i in range(m):
        A = rng.normal(size=(n, n))
        A = 0.5 * (A + A.T)
        rhs = float(np.tensordot(A, X0)) + (B[i] @ u0 if nfree else 0.0)
        ci = bld.add_constraint(rhs)
        for r in range(n):
            for c in range(r, n):
                bld.add_psd_entry(ci, blk, r, c, A[r, c])
        for j in range(nfree):
            bld.add_free_entry(ci, j, B[i, j])
        rows.append(A)
    for i in range(n):
        bld.add_psd_obj(blk, i, i, 1.0)  # min trace keeps it bounded
    if nfree:
        # bounded in u because B has full column rank almost surely
        for j in range(nfree):
            bld.add_free_obj(j, 0.1 * (j + 1))
    return bld.build()


def prob_diag_lp():
    # min x1 + 2 x2 s.t. x1 + x2 = 1, x >= 0 (as a PSD block used diagonally)
    bld = SdpProblemBuilder()
    blk = bld.add_psd_block(2)
    c0 = bld.add_constraint(1.0)
    bld.add_psd_entry(c0, blk, 0, 0, 1.0)
    bld.add_psd_entry(c0, blk, 1, 1, 1.0)
    # pin off-diagonal so the LP reading is exact
    c1 = bld.add_constraint(0.0)
    bld.add_psd_entry(c1, blk, 0, 1, 0.5)
    bld.add_psd_obj(blk, 0, 0, 1.0)
    bld.add_psd_obj(blk, 1, 1, 2.0)
    return bld.build()


# ---------------------------------------------------------------------------
# basic solves


def test_min_x_psd():
    sol = solve(prob_min_x_psd())
    assert sol.status == sdp.OPTIMAL
    assert sol.u[0] == pytest.approx(1.0, abs=1e-6)


def test_trace_objective():
    sol = solve(prob_trace_simplex())
    assert sol.status == sdp.OPTIMAL
    assert sol.obj_primal == pytest.approx(-1.0, abs=1e-6)
    assert np.allclose(np.diag(sol.X[0]), [0, 0, 1], atol=1e-5)


def test_feasibility_no_constraints():
    bld = SdpProblemBuilder()
    bld.add_psd_block(3)
    sol = solve(bld.build())
    assert sol.status == sdp.OPTIMAL
    w = np.linalg.eigvalsh(sol.X[0])
    assert w[0] > 0


def test_optimal_residuals_meet_tol():
    st = SolverSettings(tol=1e-8)
    for prob in [prob_min_x_psd(), prob_trace_simplex(), prob_random_feasible()]:
        sol = solve(prob, st)
        assert sol.status == sdp.OPTIMAL
        assert max(sol.res_primal, sol.res_dual, sol.rel_gap) <= st.tol
        for X in sol.X:
            assert np.linalg.eigvalsh(X)[0] >= -st.tol


def test_infeasible_trace():
    bld = SdpProblemBuilder()
    blk = bld.add_psd_block(2)
    c0 = bld.add_constraint(-1.0)
    for i in range(2):
        bld.add_psd_entry(c0, blk, i, i, 1.0)
    prob = bld.build()
    sol = solve(prob)
    assert sol.status == sdp.INFEASIBLE
    rep = certify_infeasible(prob, sol)
    assert rep.b_dot_y > 0
    assert rep.max_eig_ATy <= 1e-6
    with pytest.raises(ValueError):
        certify_infeasible(prob, solve(prob_trace_simplex()))


def test_unbounded():
    # min -tr(X) with no constraints on scale
    bld = SdpProblemBuilder()
    blk = bld.add_psd_block(2)
    c0 = bld.add_constraint(0.0)
    bld.add_psd_entry(c0, blk, 0, 1, 0.5)
    bld.add_psd_obj(blk, 0, 0, -1.0)
    bld.add_psd_obj(blk, 1, 1, -1.0)
    sol = solve(bld.build())
    assert sol.status == sdp.UNBOUNDED


def test_determinism():
    st = SolverSettings(trace=True)
    a = solve(prob_random_feasible(3), st)
    b = solve(prob_random_feasible(3), st)
    assert a.status == b.status == sdp.OPTIMAL
    assert a.obj_primal == b.obj_primal
    assert len(a.trace) == len(b.trace)
    for ra, rb in zip(a.trace, b.trace):
        assert ra == rb
    assert np.array_equal(a.X[0], b.X[0])


def test_duplicate_rows_dropped():
    bld = SdpProblemBuilder()
    blk = bld.add_psd_block(3)
    for _ in range(2):  # identical trace row twice
        c = bld.add_constraint(1.0)
        for i in range(3):
            bld.add_psd_entry(c, blk, i, i, 1.0)
    for i, v in enumerate([2.0, 5.0, -1.0]):
        bld.add_psd_obj(blk, i, i, v)
    prob = bld.build()
    assert prob.m == 1
    assert prob.dropped_rows == 1
    sol = solve(prob)
    assert sol.status == sdp.OPTIMAL
    assert sol.obj_primal == pytest.approx(-1.0, abs=1e-6)


def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(tol=0.0)
    with pytest.raises(ValueError):
        SolverSettings(max_iters=0)


def test_trace_csv():
    sol = solve(prob_trace_simplex(), SolverSettings(trace=True))
    text = sdp.trace_csv(sol)
    lines = text.strip().splitlines()
    assert lines[0].startswith("iter,mu,")
    assert len(lines) == len(sol.trace) + 1


# ---------------------------------------------------------------------------
# SDPA export / import and external-solver agreement


def test_sdpa_round_trip():
    prob = prob_trace_simplex()
    text = write_sdpa(prob)
    back = read_sdpa(text)
    sol_a = solve(prob)
    sol_b = solve(back)
    assert sol_b.status == sdp.OPTIMAL
    assert sol_b.obj_primal == pytest.approx(sol_a.obj_primal, abs=1e-6)


def test_sdpa_round_trip_with_free_vars():
    prob = prob_min_x_psd()
    text = write_sdpa(prob)
    back = read_sdpa(text)
    sol_b = solve(back)
    assert sol_b.status == sdp.OPTIMAL
    # free split becomes a diagonal block; optimum is preserved
    assert sol_b.obj_primal == pytest.approx(1.0, abs=1e-5)


def cvxopt_solve_sdpa(text):
    """Independent external solve of exported SDPA text via cvxopt.

    Parses the text directly (no shared code with the writer) and returns
    the SDPA-primal optimum, which equals the negated native optimum.
    """
    cvxopt = pytest.importorskip("cvxopt")
    from cvxopt import matrix, solvers

    body = []
    for line in text.splitlines():
        s = line.strip()
        if not s or s[0] in '"*':
            continue
        body.append(s)
    toks = " ".join(body).split()
    k = 0

    def take(n):
        nonlocal k
        out = toks[k:k + n]
        k += n
        return out

    m = int(take(1)[0])
    nblocks = int(take(1)[0])
    sizes = [int(t) for t in take(nblocks)]
    c = [float(t) for t in take(m)]
    F = [[np.zeros((abs(s), abs(s))) for s in sizes] for _ in range(m + 1)]
    while k + 5 <= len(toks):
        mat, blk, i, j, v = take(5)
        mat, blk = int(mat), int(blk)
        i, j, v = int(i) - 1, int(j) - 1, float(v)
        F[mat][blk - 1][i, j] = v
        F[mat][blk - 1][j, i] = v

    Gs, hs = [], []
    Gl_rows, hl = [], []
    for bi, s in enumerate(sizes):
        n = abs(s)
        if s > 0:
            G = np.zeros((n * n, m))
            for i in range(m):
                G[:, i] = -F[i + 1][bi].reshape(-1)
            Gs.append(matrix(G))
            hs.append(matrix(-F[0][bi]))
        else:
            for r in range(n):
                Gl_rows.append([-F[i + 1][bi][r, r] for i in range(m)])
                hl.append(-F[0][bi][r, r])
    solvers.options.update({"show_progress": False, "abstol": 1e-9,
                            "reltol": 1e-9, "feastol": 1e-9})
    Gl = matrix(np.array(Gl_rows)) if Gl_rows else None
    hl_m = matrix(np.array(hl)) if hl else None
    sol = solvers.sdp(matrix(np.array(c)), Gl=Gl, hl=hl_m, Gs=Gs, hs=hs)
    assert sol["status"] == "optimal"
    return float(np.array(c) @ np.array(sol["x"]).ravel())


@pytest.mark.parametrize("maker", [prob_min_x_psd, prob_trace_simplex,
                                   prob_random_feasible, prob_diag_lp])
def test_external_solver_agreement(maker):
    prob = maker()
    mine = solve(prob)
    assert mine.status == sdp.OPTIMAL
    external = cvxopt_solve_sdpa(write_sdpa(prob))
    # the external solver sees the SDPA primal: the negated native optimum
    assert -external == pytest.approx(
        mine.obj_primal, rel=1e-6, abs=1e-6)
