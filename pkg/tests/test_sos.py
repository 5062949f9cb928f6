"""Tests for the SOS-to-SDP layer.

Reference values are worked out by hand before the assertions that use
them:

* min lam with x^4 - 2 x^2 + lam SOS.  Completing the square gives
  x^4 - 2 x^2 + lam = (x^2 - 1)^2 + (lam - 1), a sum of squares whenever
  lam >= 1; conversely SOS implies nonnegativity and the value at x = 1
  is lam - 1, so lam* = 1.
* (x + 1)^2 over the basis [1, x] has the unique Gram [[1, 1], [1, 1]]
  (matching: q00 = 1, 2 q01 = 2, q11 = 1).
* x^2 - 1 takes the value -1 at the origin, so it cannot be SOS.
* x' E x - |x|^2 SOS forces E - I PSD (quadratic-form Gram with zero
  first row), so min tr(E) = 2 attained at E = I.
* max rho with x^2 + 1 - rho SOS: the polynomial has minimum 1, so
  rho* = 1.
"""

import numpy as np
import pytest

from polycert import sdp
from polycert.polynomial import Polynomial, VarRegistry
from polycert.sdpa_io import read_sdpa
from polycert.sos import BilinearityError, SosError, SosProgram


def quartic_lambda_program(basis="monomial"):
    """min lam s.t. x^4 - 2 x^2 + lam is SOS; returns (compiled, lam expr)."""
    reg = VarRegistry()
    x = reg.var("x")
    prog = SosProgram(reg)
    lam = prog.new_scalar("lam")
    px = Polynomial.var(reg, x)
    p = px ** 4 - 2.0 * px ** 2
    prog.add_sos(prog.poly(p) + lam, name="quartic")
    prog.minimize(lam)
    return prog.compile(basis), lam


class TestSosOptimization:
    def test_quartic_lambda_star_is_one(self):
        compiled, lam = quartic_lambda_program()
        sol = compiled.solve()
        assert sol.status == sdp.OPTIMAL
        assert sol.scalar_value(lam) == pytest.approx(1.0, abs=1e-6)

    def test_quartic_lambda_chebyshev_basis_agrees(self):
        compiled, lam = quartic_lambda_program("chebyshev")
        sol = compiled.solve()
        assert sol.status == sdp.OPTIMAL
        assert sol.scalar_value(lam) == pytest.approx(1.0, abs=1e-6)

    def test_lambda_x_squared_minimum_is_zero(self):
        # lam * x^2 is SOS iff lam >= 0
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        lam = prog.new_scalar("lam")
        px = Polynomial.var(reg, x)
        prog.add_sos(prog.scaled(px * px, lam))
        prog.minimize(lam)
        sol = prog.compile().solve()
        assert sol.status == sdp.OPTIMAL
        assert sol.scalar_value(lam) == pytest.approx(0.0, abs=1e-6)

    def test_maximize_rho(self):
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        rho = prog.new_scalar("rho")
        px = Polynomial.var(reg, x)
        prog.add_sos(prog.poly(px * px + 1.0) - rho)
        prog.maximize(rho)
        sol = prog.compile().solve()
        assert sol.status == sdp.OPTIMAL
        assert sol.scalar_value(rho) == pytest.approx(1.0, abs=1e-6)
        # minimize(-rho) convention: primal objective is -rho*
        assert sol.objective == pytest.approx(-1.0, abs=1e-6)

    def test_matrix_var_trace_objective(self):
        reg = VarRegistry()
        x1, x2 = reg.vars("x1", "x2")
        prog = SosProgram(reg)
        E = prog.new_psd_matrix("E", 2)
        v = [Polynomial.var(reg, x1), Polynomial.var(reg, x2)]
        norm2 = v[0] * v[0] + v[1] * v[1]
        prog.add_sos(prog.quad_form(E, v) - prog.poly(norm2))
        prog.minimize(prog.trace_against(E, np.eye(2)))
        sol = prog.compile().solve()
        assert sol.status == sdp.OPTIMAL
        assert sol.objective == pytest.approx(2.0, abs=1e-6)
        M = sol.matrix_value(E)
        assert np.allclose(M, np.eye(2), atol=1e-5)


class TestFeasibility:
    def test_shifted_square_gram(self):
        # (x + 1)^2 admits exactly the Gram [[1, 1], [1, 1]] over [1, x]
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        px = Polynomial.var(reg, x)
        prog.add_sos((px + 1.0) * (px + 1.0))
        sol = prog.compile().solve()
        assert sol.status == sdp.OPTIMAL
        entries, Q = sol.witness_gram(0)
        assert len(entries) == 2
        assert np.allclose(Q, [[1.0, 1.0], [1.0, 1.0]], atol=1e-6)

    def test_negative_at_origin_infeasible(self):
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        px = Polynomial.var(reg, x)
        prog.add_sos(px * px - 1.0)
        compiled = prog.compile()
        sol = compiled.solve()
        assert sol.status == sdp.INFEASIBLE
        report = sdp.certify_infeasible(compiled.prob, sol.raw)
        assert report.b_dot_y > 0

    def test_linear_system_lyapunov(self):
        # dx/dt = -x admits V = q x^2; -dV/dt - eps x^2 remains SOS
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        V = prog.new_poly("V", [x], 2, "sos", drop_constant=True)
        px = Polynomial.var(reg, x)
        xdot = -1.0 * px
        vdot = V.expr().differentiate(x) * xdot
        prog.add_sos(-1.0 * vdot - prog.poly(1e-4 * px * px))
        sol = prog.compile().solve()
        assert sol.status == sdp.OPTIMAL
        Vp = sol.poly_value(V)
        assert Vp.evaluate({x: 0.0}) == 0.0
        assert Vp.evaluate({x: 1.0}) > 0
        dV = Vp.differentiate(x)
        assert dV.evaluate({x: 1.0}) * (-1.0) < 0

    def test_equality_constraint_pins_scalar(self):
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        lam = prog.new_scalar("lam")
        px = Polynomial.var(reg, x)
        prog.add_sos(prog.scaled(px * px, lam))
        prog.add_eq(lam - 3.0)
        sol = prog.compile().solve()
        assert sol.status == sdp.OPTIMAL
        assert sol.scalar_value(lam) == pytest.approx(3.0, abs=1e-7)

    def test_shifted_basis_entries_vanish_at_center(self):
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        px = Polynomial.var(reg, x)
        shifted = px - 1.0
        W = prog.new_poly_from_entries("W", [shifted, shifted * shifted], "sos")
        prog.add_sos(W.expr())    # trivially feasible
        sol = prog.compile().solve()
        assert sol.status == sdp.OPTIMAL
        Wp = sol.poly_value(W)
        assert Wp.evaluate({x: 1.0}) == pytest.approx(0.0, abs=1e-12)
        assert Wp.differentiate(x).evaluate({x: 1.0}) == pytest.approx(
            0.0, abs=1e-12)


class TestCompilation:
    def test_dimensions_single_constraint(self):
        # one SOS constraint of degree 2 in one variable: witness over
        # [1, x] and three matching rows (coefficients of 1, x, x^2)
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        px = Polynomial.var(reg, x)
        prog.add_sos((px + 1.0) * (px + 1.0))
        compiled = prog.compile()
        d = compiled.describe()
        assert d["psd_blocks"] == [2]
        assert d["rows"] == 3
        assert d["free_vars"] == 0

    def test_odd_degree_sos_poly_rejected(self):
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        with pytest.raises(SosError, match="odd"):
            prog.new_poly("L", [x], 3, "sos")

    def test_bilinear_product_rejected(self):
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        a = prog.new_poly("A", [x], 2, "free")
        b = prog.new_poly("B", [x], 2, "free")
        with pytest.raises(BilinearityError) as err:
            _ = a.expr() * b.expr()
        assert "A[" in str(err.value) and "B[" in str(err.value)

    def test_unconstrained_objective_scalar_unbounded(self):
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        lam = prog.new_scalar("lam")
        px = Polynomial.var(reg, x)
        prog.add_sos(prog.poly(px * px))
        prog.minimize(lam)
        sol = prog.compile().solve()
        assert sol.status == sdp.UNBOUNDED

    def test_free_poly_multiplier_rows(self):
        # free multiplier L(x) of degree 2 against a fixed polynomial: the
        # compiled problem carries 3 free columns
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        L = prog.new_poly("L", [x], 2, "free")
        px = Polynomial.var(reg, x)
        # x^2 + 2 + L(x) (x^2 - 1) SOS has solutions (e.g. L = 0)
        prog.add_sos(prog.poly(px * px + 2.0) + L.expr() * (px * px - 1.0))
        compiled = prog.compile()
        assert compiled.describe()["free_vars"] == 3
        sol = compiled.solve()
        assert sol.status == sdp.OPTIMAL


class TestCertificatePolicy:
    def test_residual_and_eigenvalue_gates(self):
        compiled, lam = quartic_lambda_program()
        sol = compiled.solve()
        assert sol.gram_residual(0) <= 1e-6
        assert sol.min_gram_eig(0) >= -1e-7
        assert sol.certificate_ok(tol_eig=1e-7, tol_res=1e-6)

    def test_soundness_bound_controls_sampled_values(self):
        compiled, lam = quartic_lambda_program()
        sol = compiled.solve()
        delta = sol.soundness_bound(0, 1.5)
        reg = compiled.prog.reg
        x = reg.var("x")
        meta = compiled.witnesses[0]
        p = sol.expr_value(meta.expr)
        xs = np.linspace(-1.5, 1.5, 101)
        vals = [p.evaluate({x: float(t)}) for t in xs]
        assert min(vals) >= -delta - 1e-12

    def test_extraction_refused_without_solution(self):
        reg = VarRegistry()
        x = reg.var("x")
        prog = SosProgram(reg)
        px = Polynomial.var(reg, x)
        prog.add_sos(px * px - 1.0)
        sol = prog.compile().solve()
        with pytest.raises(SosError, match="status"):
            sol.gram_residual(0)

    def test_chebyshev_witness_residual(self):
        compiled, lam = quartic_lambda_program("chebyshev")
        sol = compiled.solve()
        assert sol.gram_residual(0) <= 1e-6
        assert sol.min_gram_eig(0) >= -1e-7


class TestSdpaRoundTrip:
    def test_export_reimport_same_optimum(self):
        compiled, lam = quartic_lambda_program()
        native = compiled.solve()
        text = compiled.to_sdpa()
        reread = read_sdpa(text)
        again = sdp.solve(reread)
        assert again.status == sdp.OPTIMAL
        assert again.obj_primal == pytest.approx(native.raw.obj_primal, abs=1e-6)
