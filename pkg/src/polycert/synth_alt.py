"""Alternating SOS synthesis of certified output-feedback controllers.

Each iterate alternates two convex SDPs.  One holds the Lyapunov function
fixed, improves the controller, pushes the certified level rho upward by
bisection on SOS feasibility, and re-certifies the incoming ellipsoid
inside the new level set; the other holds the controller and the decrease
multiplier fixed and refits V together with the ellipsoid E inscribed in
the certified sublevel set.  Progress is the volume proxy log det(E^-1)
of {a : (a-a0)' E (a-a0) <= 1}, maximized through the linearized
objective tr(Ehat^-1 E); an accepted iterate can only grow the ellipsoid
up to solver tolerance, because the previous E stays feasible for the
refit.

Multiplier ownership is dictated by bilinearity: whatever multiplies a
decision quantity must itself be fixed, so each multiplier is searched in
the step where its partner (V, theta, or E) is frozen and handed to the
other step as a plain polynomial.  The containment certificate
rho - V + L_ell (abar' E abar - 1) >= 0 therefore searches L_ell in the
level-raising step, where E is the numeric incoming ellipsoid, and
freezes it in the refit, where E is a decision.  For explicit plants
theta is searched in the controller step; input-saturation multipliers
then first enter through the Lyapunov step, where theta is numeric.  For
implicit (mass-matrix) plants the derivative placeholders b keep theta
out of the derivative of V entirely, so the roles flip: the level step
freezes both theta and V and can search every multiplier at once, and
the refit step searches V, E, and theta against fixed multipliers.

Bounded observation error adds an S-procedure term on the noise ball and
an inner-shell exclusion: arbitrarily close to the goal the noise-driven
cross term defeats strict decrease, so the decrease certificate there is
only claimed outside a small fraction of the level set.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import sdp as sdp_mod
from .controller import AugmentedSystem
from .polynomial import Polynomial, monomial_exponents
from .sos import LinExpr, SosProgram
from .systems import circle_pairs


class SynthError(RuntimeError):
    """Synthesis could not produce or extend a certificate."""


def _even_floor(k: int) -> int:
    return k - (k % 2)


def _even_ceil(k: int) -> int:
    return k + (k % 2)


@dataclass
class AlternationConfig:
    """Degrees, region sizes, and solve policy for the alternation."""

    deg_V: int = 2
    r_init: float = 0.1
    max_iter: int = 8
    vol_tol: float = 1e-3
    eps_pd: float = 1e-6
    eps_bake: float = 1e-6
    basis: str = "chebyshev"
    deg_L: int | None = None
    deg_Lell: int = 2
    deg_Lb: int = 2
    deg_Lw: int | None = None
    deg_Lk: int = 2
    rho_bracket_factor: float = 4.0
    rho_expand_rounds: int = 6
    rho_bisect_iters: int = 12
    rho_rel_tol: float = 1e-3
    wbar: float | None = None
    robust_inner_frac: float = 0.02
    solver: sdp_mod.SolverSettings = field(
        default_factory=sdp_mod.SolverSettings)

    def __post_init__(self):
        if self.deg_V < 2 or self.deg_V % 2:
            raise ValueError("deg_V must be even and >= 2")
        if self.r_init <= 0:
            raise ValueError("r_init must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.vol_tol < 0:
            raise ValueError("vol_tol must be >= 0")
        if self.basis not in ("monomial", "chebyshev"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.rho_bracket_factor <= 1:
            raise ValueError("rho_bracket_factor must exceed 1")
        if self.rho_bisect_iters < 1 or self.rho_expand_rounds < 0:
            raise ValueError("bisection iteration counts out of range")
        if self.rho_rel_tol <= 0:
            raise ValueError("rho_rel_tol must be positive")
        if self.wbar is not None and self.wbar <= 0:
            raise ValueError("wbar must be positive when set")
        if not 0.0 < self.robust_inner_frac < 1.0:
            raise ValueError("robust_inner_frac must lie in (0, 1)")
        for name in ("deg_Lell", "deg_Lb", "deg_Lk"):
            v = getattr(self, name)
            if v < 0 or v % 2:
                raise ValueError(f"{name} must be even and >= 0")

    @property
    def deg_L_eff(self) -> int:
        if self.deg_L is not None:
            return self.deg_L
        return max(2, _even_floor(self.deg_V - 2))

    @property
    def deg_Lw_eff(self) -> int:
        return self.deg_L_eff if self.deg_Lw is None else self.deg_Lw


@dataclass
class IterationRecord:
    iteration: int
    rho: float
    logdet_e_inv: float
    wall: float
    status: str


@dataclass
class StepResult:
    feasible: bool
    rho: float | None = None
    theta_k: np.ndarray | None = None
    theta_l: np.ndarray | None = None
    E: np.ndarray | None = None
    V: Polynomial | None = None
    multipliers: dict | None = None
    status: str = ""
    n_solves: int = 0


@dataclass
class AlternationResult:
    V: Polynomial
    rho: float
    theta_k: np.ndarray
    theta_l: np.ndarray
    E: np.ndarray | None
    records: list
    converged: bool
    stalled: bool
    stall_reason: str | None
    limits_certified: bool
    n_solves: int


# ---------------------------------------------------------------------------
# shared symbolic pieces


class _Loop:
    """Substituted bases, shifted coordinates, and row builders for one
    closed loop.  Controller parameters enter either as numeric arrays or
    as per-entry scalar decisions of a program."""

    def __init__(self, aug: AugmentedSystem, cfg: AlternationConfig):
        plant, ctrl = aug.plant, aug.ctrl
        self.aug = aug
        self.plant = plant
        self.ctrl = ctrl
        self.cfg = cfg
        self.reg = plant.reg
        self.a_vars = list(aug.a_vars)
        self.n_a = len(self.a_vars)
        self.n_x = plant.n_x
        self.n_z = ctrl.n_z
        self.n_u = plant.n_u
        self.a0 = np.asarray(aug.a0, dtype=float)
        self.robust = cfg.wbar is not None

        if self.robust and not aug.with_noise:
            raise ValueError("robust synthesis needs a closed loop built "
                             "with observation error (with_noise=True)")
        if aug.with_noise and not self.robust:
            raise ValueError("closed loop carries noise variables but no "
                             "wbar was configured")

        self.abar = [Polynomial.var(self.reg, v) - float(self.a0[i])
                     for i, v in enumerate(self.a_vars)]
        ball = Polynomial.zero(self.reg)
        for p in self.abar:
            ball = ball + p * p
        self.ball = ball

        self.w_vars = list(aug.w_vars) if aug.with_noise else []
        if self.robust:
            wsq = Polynomial.zero(self.reg)
            for v in self.w_vars:
                pv = Polynomial.var(self.reg, v)
                wsq = wsq + pv * pv
            self.wgap = wsq - cfg.wbar ** 2
        else:
            self.wgap = None

        subs = {}
        for i, yv in enumerate(ctrl.y_vars):
            expr = plant.h_k[i] - float(ctrl.y0[i])
            if aug.with_noise:
                expr = expr + Polynomial.var(self.reg, aug.w_vars[i])
            subs[yv] = expr
        self.mk = [p.substitute(subs) for p in ctrl.basis_k.entries]
        self.ml = [p.substitute(subs) for p in ctrl.basis_l.entries]

        # circle identities are handled by quotient reduction inside the
        # programs; only constraints of some other shape stay around as
        # explicit free multipliers
        self.quot, self.trig = circle_pairs(plant)
        box = plant.input_box or []
        self.box = box
        self.limited = [j for j, (lo, hi) in enumerate(box)
                        if np.isfinite(lo) or np.isfinite(hi)]

        if plant.form == "implicit":
            _, b_all = aug.augmented_g_rows()
            self.b_all = b_all
            self.bpolys = [Polynomial.var(self.reg, v) for v in b_all]
        else:
            self.b_all = []
            self.bpolys = []

    # -- V ------------------------------------------------------------------

    def quad_num(self, E: np.ndarray) -> Polynomial:
        """abar' E abar as a plain polynomial for a numeric matrix."""
        q = Polynomial.zero(self.reg)
        for i in range(self.n_a):
            q = q + self.abar[i] * self.abar[i] * float(E[i, i])
            for j in range(i + 1, self.n_a):
                c = float(E[i, j] + E[j, i])
                if c != 0.0:
                    q = q + self.abar[i] * self.abar[j] * c
        return q

    def vanishing_basis(self, half, with_b=False, with_w=False):
        """Monomials of the shifted coordinates in degrees 1..half (no
        constant): a - a0 always, the derivative placeholders and the
        noise variables on request.  Everything in the span vanishes at
        the anchor (a0, b=0, w=0), so a Gram form over it vanishes there
        with zero gradient."""
        bases = list(self.abar)
        if with_b:
            bases += self.bpolys
        if with_w:
            bases += [Polynomial.var(self.reg, v) for v in self.w_vars]
        entries = []
        for exps in monomial_exponents(len(bases), half):
            if sum(exps) == 0:
                continue
            p = Polynomial.const(self.reg, 1.0)
            for base, e in zip(bases, exps):
                for _ in range(e):
                    p = p * base
            entries.append(p)
        return entries

    def shifted_entries(self):
        return self.vanishing_basis(self.cfg.deg_V // 2)

    def add_decrease(self, prog, expr, name, with_b=False):
        """Add a decrease-type SOS constraint over the vanishing witness
        basis.  Valid because these expressions are pinned to zero at the
        equilibrium anchor: V and its gradient vanish there by
        construction, and the S-procedure terms either vanish or are
        forced to balance.  Keeping the constant monomial out of the
        witness removes the zero Gram rows that stall the solver."""
        half = _even_ceil(expr.degree()) // 2
        prog.add_sos(expr, name,
                     basis_entries=self.vanishing_basis(
                         half, with_b=with_b, with_w=self.robust))

    def new_vanishing_sos(self, prog, name, degree, with_b=False,
                          with_w=False):
        """SOS decision polynomial whose Gram basis omits the constant,
        for multipliers structurally forced to vanish at the anchor."""
        return prog.new_poly_from_entries(
            name, self.vanishing_basis(degree // 2, with_b=with_b,
                                       with_w=with_w), "sos")

    def new_V(self, prog: SosProgram):
        """Decision V: Gram form over shifted monomials plus a baked eps
        ball, positive definite about a0 by construction."""
        dp = prog.new_poly_from_entries("V", self.shifted_entries(), "sos")
        bake = self.cfg.eps_bake * self.ball
        return dp, dp.expr() + prog.poly(bake), bake

    # -- controller parameters ---------------------------------------------

    def theta_syms(self, prog: SosProgram):
        tk = [[prog.new_scalar(f"tk{j}_{b}") for b in range(len(self.mk))]
              for j in range(self.n_u)]
        tl = [[prog.new_scalar(f"tl{i}_{b}") for b in range(len(self.ml))]
              for i in range(self.n_z)]
        return tk, tl

    def u_num(self, theta_k, j) -> Polynomial:
        out = Polynomial.zero(self.reg)
        for b, mb in enumerate(self.mk):
            c = float(theta_k[j, b])
            if c:
                out = out + c * mb
        return out

    def u_sym(self, prog, tk, j):
        acc = None
        for b, mb in enumerate(self.mk):
            t = prog.scaled(mb, tk[j][b])
            acc = t if acc is None else acc + t
        return acc if acc is not None else prog.poly(
            Polynomial.zero(self.reg))

    def lrate_num(self, theta_l, i) -> Polynomial:
        out = Polynomial.zero(self.reg)
        for b, mb in enumerate(self.ml):
            c = float(theta_l[i, b])
            if c:
                out = out + c * mb
        return out

    def lrate_sym(self, prog, tl, i):
        acc = None
        for b, mb in enumerate(self.ml):
            t = prog.scaled(mb, tl[i][b])
            acc = t if acc is None else acc + t
        return acc if acc is not None else prog.poly(
            Polynomial.zero(self.reg))

    # -- closed-loop rows (explicit plants) ---------------------------------

    def rows_num(self, theta_k, theta_l, sat=None) -> list[Polynomial]:
        """Augmented drift rows at numeric parameters; sat maps an input
        index to the constant it is pinned at."""
        plant = self.plant
        out = []
        for i in range(self.n_x):
            row = plant.f1[i]
            for j in range(self.n_u):
                f2ij = plant.f2[i][j]
                if f2ij.is_zero():
                    continue
                if sat and j in sat:
                    row = row + float(sat[j]) * f2ij
                else:
                    row = row + f2ij * self.u_num(theta_k, j)
            out.append(row)
        for i in range(self.n_z):
            out.append(self.lrate_num(theta_l, i))
        return out

    def rows_sym(self, prog, tk, tl, sat=None):
        plant = self.plant
        out = []
        for i in range(self.n_x):
            acc = prog.poly(plant.f1[i])
            for j in range(self.n_u):
                f2ij = plant.f2[i][j]
                if f2ij.is_zero():
                    continue
                if sat and j in sat:
                    acc = acc + float(sat[j]) * f2ij
                else:
                    acc = acc + self.u_sym(prog, tk, j) * f2ij
            out.append(acc)
        for i in range(self.n_z):
            out.append(self.lrate_sym(prog, tl, i))
        return out

    def vdot(self, prog, V, rows):
        """sum_i dV/da_i row_i; V and the rows may each be numeric or
        carry decisions, as long as the two sides never both do."""
        if isinstance(V, Polynomial):
            V = prog.poly(V)
        acc = None
        for v, row in zip(self.a_vars, rows):
            dv = V.differentiate(v)
            if not dv.terms:
                continue
            term = dv * row
            acc = term if acc is None else acc + term
        if acc is None:
            acc = prog.poly(Polynomial.zero(self.reg))
        return acc

    # -- implicit plants -----------------------------------------------------

    def implicit_adot(self):
        """Derivative stand-ins for the chain rule: kinematic rows where
        the plant is explicit, placeholders b for the implicit
        accelerations and bz for the latent rates."""
        plant = self.plant
        rows = []
        pos = 0
        for i in range(self.n_x):
            if i in plant.implicit_idx:
                rows.append(self.bpolys[pos])
                pos += 1
            else:
                rows.append(plant.kinematic[i])
        k = len(plant.implicit_idx)
        for i in range(self.n_z):
            rows.append(self.bpolys[k + i])
        return rows

    def vdot_implicit(self, prog, V):
        return self.vdot(prog, V, self.implicit_adot())

    def g_num(self, theta_k, theta_l, sat=None) -> list[Polynomial]:
        """Residual rows mass b - rhs(u) and bz - l at numeric parameters;
        identically zero along closed-loop trajectories."""
        plant = self.plant
        k = len(plant.implicit_idx)
        out = []
        for i in range(k):
            row = -plant.rhs1[i]
            for j in range(k):
                row = row + plant.mass[i][j] * self.bpolys[j]
            for j in range(self.n_u):
                rij = plant.rhs2[i][j]
                if rij.is_zero():
                    continue
                if sat and j in sat:
                    row = row - float(sat[j]) * rij
                else:
                    row = row - rij * self.u_num(theta_k, j)
            out.append(row)
        for i in range(self.n_z):
            out.append(self.bpolys[k + i] - self.lrate_num(theta_l, i))
        return out

    def g_sym(self, prog, tk, tl, sat=None):
        plant = self.plant
        k = len(plant.implicit_idx)
        out = []
        for i in range(k):
            acc = prog.poly(-plant.rhs1[i])
            for j in range(k):
                acc = acc + plant.mass[i][j] * self.bpolys[j]
            for j in range(self.n_u):
                rij = plant.rhs2[i][j]
                if rij.is_zero():
                    continue
                if sat and j in sat:
                    acc = acc - float(sat[j]) * rij
                else:
                    acc = acc - self.u_sym(prog, tk, j) * rij
            out.append(acc)
        for i in range(self.n_z):
            acc = prog.poly(self.bpolys[k + i]) - self.lrate_sym(prog, tl, i)
            out.append(acc)
        return out


def _free_vars_for(loop, p_vars, expr):
    over = sorted(set(p_vars) | set(expr.var_ids()))
    allv = loop.reg.all_vars
    return [allv[vid] for vid in over]


def _add_free_terms(prog, loop, expr, polys, tag):
    """expr + sum L_i p_i with fresh free multipliers degree-matched so
    each product stays within the expression's even degree ceiling."""
    target = _even_ceil(expr.degree())
    for i, p in enumerate(polys):
        degL = max(target - p.degree(), 0)
        variables = _free_vars_for(loop, p.var_ids(), expr)
        L = prog.new_poly(f"{tag}{i}", variables, degL, "free")
        expr = expr + L.expr() * p
    return expr


def _add_named_free_terms(prog, loop, expr, polys, tag):
    """Like _add_free_terms but returns the handles, for multipliers that
    the partner step needs as fixed polynomials."""
    target = _even_ceil(expr.degree())
    handles = []
    for i, p in enumerate(polys):
        degL = max(target - p.degree(), 0)
        variables = _free_vars_for(loop, p.var_ids(), expr)
        L = prog.new_poly(f"{tag}{i}", variables, degL, "free")
        handles.append(L)
        expr = expr + L.expr() * p
    return expr, handles


def _feasible(sol) -> bool:
    return sol.status == sdp_mod.OPTIMAL


def _extract_theta(sol, tk, tl, loop):
    theta_k = np.array([[sol.scalar_value(e) for e in row] for row in tk],
                       dtype=float).reshape(loop.n_u, len(loop.mk))
    theta_l = np.array([[sol.scalar_value(e) for e in row] for row in tl],
                       dtype=float).reshape(loop.n_z, len(loop.ml))
    return theta_k, theta_l


# ---------------------------------------------------------------------------
# initialization


def init_lyapunov(aug: AugmentedSystem, cfg: AlternationConfig) -> Polynomial:
    """Find V decreasing along the current closed loop on the ball
    |a - a0|^2 <= r_init; positive definite by construction."""
    loop = _Loop(aug, cfg)
    prog = SosProgram(loop.reg, quotient=loop.quot)
    Vdp, Vexpr, bake = loop.new_V(prog)
    theta_k, theta_l = aug.ctrl.theta_k, aug.ctrl.theta_l

    # the certificate is scale free here (no level set has been chosen
    # yet), so pin tr(Gram V) = 1 to remove the ray
    trace = LinExpr({Vdp.gram_ids[(i, i)]: 1.0
                     for i in range(len(Vdp.entries))})
    prog.add_eq(trace, 1.0)

    if loop.plant.form == "explicit":
        vd = loop.vdot(prog, Vexpr, loop.rows_num(theta_k, theta_l))
    else:
        vd = loop.vdot_implicit(prog, Vexpr)

    expr = -vd - cfg.eps_pd * prog.poly(loop.ball)
    L = loop.new_vanishing_sos(prog, "L_dec", cfg.deg_L_eff)
    expr = expr + L.expr() * (loop.ball - cfg.r_init)
    if loop.robust:
        Lw = prog.new_poly("L_w", loop.a_vars + loop.w_vars,
                           cfg.deg_Lw_eff, "sos")
        expr = expr + Lw.expr() * loop.wgap
        Lin = prog.new_poly("L_in", loop.a_vars, cfg.deg_Lb, "sos")
        expr = expr + Lin.expr() * (cfg.robust_inner_frac * cfg.r_init
                                    - loop.ball)
    free = list(loop.trig)
    implicit = loop.plant.form == "implicit"
    if implicit:
        free = free + loop.g_num(theta_k, theta_l)
    expr = _add_free_terms(prog, loop, expr, free, "Lf")
    loop.add_decrease(prog, expr, "decrease", with_b=implicit)

    sol = prog.compile(cfg.basis).solve(cfg.solver)
    if not _feasible(sol):
        raise SynthError(
            "no Lyapunov certificate for the initial controller on the "
            f"r_init = {cfg.r_init} ball (solver: {sol.status}); shrink "
            "r_init or improve the initial parameters (e.g. pre-train)")
    return sol.poly_value(Vdp) + bake


def init_rho(aug: AugmentedSystem, V: Polynomial,
             cfg: AlternationConfig) -> float:
    """Largest rho with {V <= rho} inside the r_init ball.  One SDP: rho
    enters the certificate linearly, so no bisection is needed."""
    loop = _Loop(aug, cfg)
    prog = SosProgram(loop.reg, quotient=loop.quot)
    rho = prog.new_scalar("rho")
    Lb = prog.new_poly("L_ball", loop.a_vars, cfg.deg_Lb, "sos")
    expr = prog.poly(V) - rho + Lb.expr() * (cfg.r_init - loop.ball)
    expr = _add_free_terms(prog, loop, expr, loop.trig, "Lt")
    prog.add_sos(expr, "containment")
    prog.maximize(rho)
    sol = prog.compile(cfg.basis).solve(cfg.solver)
    if not _feasible(sol):
        raise SynthError(f"no initial level found (solver: {sol.status})")
    val = sol.scalar_value(rho)
    if val <= 0:
        raise SynthError("initial level collapsed to zero")
    return val


# ---------------------------------------------------------------------------
# rho search


def bisect_max_feasible(feasible, lo, factor, expand_rounds, iters, rel_tol):
    """Largest feasible level by outward bracketing then bisection.

    feasible(rho) -> bool is assumed monotone (smaller rho easier).
    Returns (best, ceiling): the largest level found feasible and the
    smallest probed infeasible one.  ceiling is None when every expansion
    succeeded; best is None when even lo fails.
    """
    if not feasible(lo):
        return None, lo
    best = lo
    hi = lo * factor
    for _ in range(expand_rounds + 1):
        if not feasible(hi):
            break
        best = hi
        hi *= 2.0
    else:
        return best, None
    for _ in range(iters):
        if (hi - best) <= rel_tol * max(best, 1e-30):
            break
        mid = 0.5 * (best + hi)
        if feasible(mid):
            best = mid
        else:
            hi = mid
    return best, hi


def _rho_bisect(build, rho_in, cfg, counter):
    """Bisection on SOS feasibility probes.  Returns the best feasible
    level together with its solution and handles (the multipliers there
    are the ones handed to the next step), or Nones when even rho_in is
    infeasible."""
    cache = {}

    def probe(rho):
        counter["n"] += 1
        prog, handles = build(rho)
        sol = prog.compile(cfg.basis).solve(cfg.solver)
        if _feasible(sol):
            cache["rho"], cache["sol"], cache["handles"] = rho, sol, handles
            return True
        return False

    best, _ = bisect_max_feasible(
        probe, rho_in, cfg.rho_bracket_factor, cfg.rho_expand_rounds,
        cfg.rho_bisect_iters, cfg.rho_rel_tol)
    if best is None:
        return None, None, None
    return cache["rho"], cache["sol"], cache["handles"]


def seed_ellipsoid(aug: AugmentedSystem, V, rho: float,
                   margin: float = 0.05) -> np.ndarray:
    """Ellipsoid matrix E0 with {abar' E0 abar <= 1} inside {V <= rho}.

    Built from the Hessian of V at the goal (exact shape for quadratic V)
    and inflated by margin so the first containment certificate holds
    with slack rather than touching the level set.
    """
    a_vars = list(aug.a_vars)
    a0 = np.asarray(aug.a0, dtype=float)
    point = {v: float(a0[i]) for i, v in enumerate(a_vars)}
    n = len(a_vars)
    H = np.empty((n, n))
    for i, vi in enumerate(a_vars):
        dV = V.differentiate(vi)
        for j in range(i, n):
            H[i, j] = H[j, i] = dV.differentiate(a_vars[j]).evaluate(point)
    E0 = H * ((1.0 + margin) / (2.0 * rho))
    return E0 + 1e-9 * np.eye(n)


# ---------------------------------------------------------------------------
# explicit-plant steps


def controller_step(aug, V, rho_in, E_in, cfg, fixed_limits=None):
    """Improve theta at fixed V (explicit plants): maximize the certified
    level by bisection, re-certifying the incoming ellipsoid E_in inside
    each probed level (its containment multiplier is refreshed here and
    frozen in the following Lyapunov step, where E becomes a decision).

    fixed_limits carries the saturation multipliers found by the previous
    Lyapunov step; None (first iteration) omits the input-limit terms.
    """
    loop = _Loop(aug, cfg)
    counter = {"n": 0}
    quad_in = loop.quad_num(E_in) - 1.0

    def build(rho):
        prog = SosProgram(loop.reg, quotient=loop.quot)
        tk, tl = loop.theta_syms(prog)
        L = loop.new_vanishing_sos(prog, "L_dec", cfg.deg_L_eff)
        Lell = prog.new_poly("L_ell", loop.a_vars, cfg.deg_Lell, "sos")
        handles = {"tk": tk, "tl": tl, "L": L, "Lell": Lell,
                   "Lsat": {}, "Lin": None}
        u_raws = [loop.u_sym(prog, tk, j) for j in range(loop.n_u)]

        vd = loop.vdot(prog, V, loop.rows_sym(prog, tk, tl))
        expr = -vd - cfg.eps_pd * prog.poly(loop.ball)
        expr = expr + L.expr() * (V - rho)
        if loop.robust:
            Lw = prog.new_poly("L_w", loop.a_vars + loop.w_vars,
                               cfg.deg_Lw_eff, "sos")
            expr = expr + Lw.expr() * loop.wgap
            Lin = prog.new_poly("L_in", loop.a_vars, cfg.deg_Lb, "sos")
            expr = expr + Lin.expr() * (cfg.robust_inner_frac * rho - V)
            handles["Lin"] = Lin
        if fixed_limits is not None:
            for j in loop.limited:
                lo, hi = loop.box[j]
                La, Lb_ = fixed_limits["interior"].get(j, (None, None))
                if np.isfinite(hi) and La is not None:
                    expr = expr + prog.poly(La) * (u_raws[j] - hi)
                if np.isfinite(lo) and Lb_ is not None:
                    expr = expr + prog.poly(Lb_) * (lo - u_raws[j])
        expr = _add_free_terms(prog, loop, expr, loop.trig, "Lf")
        loop.add_decrease(prog, expr, "decrease")

        if fixed_limits is not None:
            for j in loop.limited:
                lo, hi = loop.box[j]
                for side, bound in (("hi", hi), ("lo", lo)):
                    if not np.isfinite(bound):
                        continue
                    Lk = fixed_limits["sat"].get((j, side))
                    if Lk is None:
                        continue
                    Ls = prog.new_poly(f"L_sat_{j}_{side}", loop.a_vars,
                                       cfg.deg_L_eff, "sos")
                    handles["Lsat"][(j, side)] = Ls
                    vds = loop.vdot(prog, V,
                                    loop.rows_sym(prog, tk, tl,
                                                  sat={j: bound}))
                    es = -vds - cfg.eps_pd * prog.poly(loop.ball)
                    es = es + Ls.expr() * (V - rho)
                    gap = (bound - u_raws[j] if side == "hi"
                           else u_raws[j] - bound)
                    es = es + prog.poly(Lk) * gap
                    if loop.robust:
                        Lws = prog.new_poly(f"L_w_{j}_{side}",
                                            loop.a_vars + loop.w_vars,
                                            cfg.deg_Lw_eff, "sos")
                        es = es + Lws.expr() * loop.wgap
                    es = _add_free_terms(prog, loop, es, loop.trig,
                                         f"Lfs{j}{side}")
                    prog.add_sos(es, f"decrease-sat-{j}-{side}")

        cexpr = Lell.expr() * quad_in + (rho - V)
        cexpr = _add_free_terms(prog, loop, cexpr, loop.trig, "Lc")
        prog.add_sos(cexpr, "containment")
        return prog, handles

    rho, sol, handles = _rho_bisect(build, rho_in, cfg, counter)
    if rho is None:
        return StepResult(feasible=False, status="ctrl-stall",
                          n_solves=counter["n"])

    theta_k, theta_l = _extract_theta(sol, handles["tk"], handles["tl"],
                                      loop)
    mults = {
        "L": sol.poly_value(handles["L"]),
        "Lell": sol.poly_value(handles["Lell"]),
        "Lsat": {k: sol.poly_value(v) for k, v in handles["Lsat"].items()},
        "Lin": (sol.poly_value(handles["Lin"])
                if handles["Lin"] is not None else None),
    }
    return StepResult(feasible=True, rho=rho, theta_k=theta_k,
                      theta_l=theta_l, multipliers=mults, status="ok",
                      n_solves=counter["n"])


def lyapunov_step(aug, theta_k, theta_l, rho, Ehat_inv, cfg, fixed,
                  with_limits):
    """Refit V and E at fixed controller and fixed decrease multipliers
    (explicit plants).  theta is numeric here, so the input-limit
    multipliers are searchable; their values are handed to the next
    controller step.  A saturated branch reuses the controller step's
    dedicated (V - rho) multiplier when one exists and the main decrease
    multiplier on first introduction."""
    loop = _Loop(aug, cfg)
    prog = SosProgram(loop.reg, quotient=loop.quot)
    Vdp, Vexpr, bake = loop.new_V(prog)
    E = prog.new_psd_matrix("E", loop.n_a)
    L_fixed = fixed["L"]
    Lell_fixed = fixed["Lell"]

    vd = loop.vdot(prog, Vexpr, loop.rows_num(theta_k, theta_l))
    expr = -vd - cfg.eps_pd * prog.poly(loop.ball)
    expr = expr + prog.poly(L_fixed) * (Vexpr - rho)
    if loop.robust:
        Lw = prog.new_poly("L_w", loop.a_vars + loop.w_vars,
                           cfg.deg_Lw_eff, "sos")
        expr = expr + Lw.expr() * loop.wgap
        Lin_f = fixed.get("Lin")
        if Lin_f is not None:
            expr = expr + prog.poly(Lin_f) * (
                -Vexpr + cfg.robust_inner_frac * rho)

    u_raw_num = [loop.u_num(theta_k, j) for j in range(loop.n_u)]
    interior = {}
    sat_handles = {}
    if with_limits:
        for j in loop.limited:
            lo, hi = loop.box[j]
            La = Lb_ = None
            if np.isfinite(hi):
                La = loop.new_vanishing_sos(prog, f"L_int_hi_{j}",
                                            cfg.deg_Lk)
                expr = expr + La.expr() * (u_raw_num[j] - hi)
            if np.isfinite(lo):
                Lb_ = loop.new_vanishing_sos(prog, f"L_int_lo_{j}",
                                             cfg.deg_Lk)
                expr = expr + Lb_.expr() * (lo - u_raw_num[j])
            interior[j] = (La, Lb_)
    expr = _add_free_terms(prog, loop, expr, loop.trig, "Lf")
    loop.add_decrease(prog, expr, "decrease")

    if with_limits:
        for j in loop.limited:
            lo, hi = loop.box[j]
            for side, bound in (("hi", hi), ("lo", lo)):
                if not np.isfinite(bound):
                    continue
                Lsf = fixed.get("Lsat", {}).get((j, side))
                if Lsf is None:
                    Lsf = L_fixed
                Lk = prog.new_poly(f"L_k_{j}_{side}", loop.a_vars,
                                   cfg.deg_Lk, "sos")
                sat_handles[(j, side)] = Lk
                vds = loop.vdot(prog, Vexpr,
                                loop.rows_num(theta_k, theta_l,
                                              sat={j: bound}))
                es = -vds - cfg.eps_pd * prog.poly(loop.ball)
                es = es + prog.poly(Lsf) * (Vexpr - rho)
                gap = (bound - u_raw_num[j] if side == "hi"
                       else u_raw_num[j] - bound)
                es = es + Lk.expr() * gap
                if loop.robust:
                    Lws = prog.new_poly(f"L_w_{j}_{side}",
                                        loop.a_vars + loop.w_vars,
                                        cfg.deg_Lw_eff, "sos")
                    es = es + Lws.expr() * loop.wgap
                es = _add_free_terms(prog, loop, es, loop.trig,
                                     f"Lfs{j}{side}")
                prog.add_sos(es, f"decrease-sat-{j}-{side}")

    cexpr = (prog.quad_form(E, loop.abar) - 1.0) * Lell_fixed
    cexpr = cexpr + (rho - Vexpr)
    cexpr = _add_free_terms(prog, loop, cexpr, loop.trig, "Lc")
    prog.add_sos(cexpr, "containment")

    prog.minimize(prog.trace_against(E, Ehat_inv))
    sol = prog.compile(cfg.basis).solve(cfg.solver)
    if not _feasible(sol):
        return StepResult(feasible=False, status="lyap-stall", n_solves=1)

    mults = {
        "interior": {j: tuple(sol.poly_value(h) if h is not None else None
                              for h in hs)
                     for j, hs in interior.items()},
        "sat": {k: sol.poly_value(v) for k, v in sat_handles.items()},
    }
    return StepResult(feasible=True, rho=rho,
                      V=sol.poly_value(Vdp) + bake,
                      E=sol.matrix_value(E), multipliers=mults,
                      status="ok", n_solves=1)


# ---------------------------------------------------------------------------
# implicit-plant steps


def level_step(aug, V, theta_k, theta_l, rho_in, E_in, cfg):
    """Implicit-plant counterpart of the controller step: theta and V are
    both fixed, so every multiplier (decrease, containment, residual,
    input-limit, noise) is searchable in one solve; only the level moves,
    by bisection, with the incoming ellipsoid E_in re-certified inside
    each probed level.  The found multipliers parameterize the refit."""
    loop = _Loop(aug, cfg)
    counter = {"n": 0}
    quad_in = loop.quad_num(E_in) - 1.0

    def build(rho):
        prog = SosProgram(loop.reg, quotient=loop.quot)
        L = loop.new_vanishing_sos(prog, "L_dec", cfg.deg_L_eff)
        Lell = prog.new_poly("L_ell", loop.a_vars, cfg.deg_Lell, "sos")
        handles = {"L": L, "Lell": Lell, "Lg": None, "Lin": None,
                   "interior": {}, "sat": {}, "sat_slack": {}, "sat_g": {}}

        vd = loop.vdot_implicit(prog, V)
        expr = -vd - cfg.eps_pd * prog.poly(loop.ball)
        expr = expr + L.expr() * (V - rho)
        if loop.robust:
            Lw = prog.new_poly("L_w", loop.a_vars + loop.w_vars,
                               cfg.deg_Lw_eff, "sos")
            expr = expr + Lw.expr() * loop.wgap
            Lin = prog.new_poly("L_in", loop.a_vars, cfg.deg_Lb, "sos")
            expr = expr + Lin.expr() * (cfg.robust_inner_frac * rho - V)
            handles["Lin"] = Lin
        u_raw_num = [loop.u_num(theta_k, j) for j in range(loop.n_u)]
        for j in loop.limited:
            lo, hi = loop.box[j]
            La = Lb_ = None
            if np.isfinite(hi):
                La = loop.new_vanishing_sos(prog, f"L_int_hi_{j}",
                                            cfg.deg_Lk)
                expr = expr + La.expr() * (u_raw_num[j] - hi)
            if np.isfinite(lo):
                Lb_ = loop.new_vanishing_sos(prog, f"L_int_lo_{j}",
                                             cfg.deg_Lk)
                expr = expr + Lb_.expr() * (lo - u_raw_num[j])
            handles["interior"][j] = (La, Lb_)
        expr = _add_free_terms(prog, loop, expr, loop.trig, "Lf")
        expr, Lg = _add_named_free_terms(prog, loop, expr,
                                         loop.g_num(theta_k, theta_l),
                                         "Lg")
        handles["Lg"] = Lg
        loop.add_decrease(prog, expr, "decrease", with_b=True)

        for j in loop.limited:
            lo, hi = loop.box[j]
            for side, bound in (("hi", hi), ("lo", lo)):
                if not np.isfinite(bound):
                    continue
                Ls = prog.new_poly(f"L_sat_{j}_{side}", loop.a_vars,
                                   cfg.deg_L_eff, "sos")
                Lk = prog.new_poly(f"L_k_{j}_{side}", loop.a_vars,
                                   cfg.deg_Lk, "sos")
                handles["sat_slack"][(j, side)] = Ls
                handles["sat"][(j, side)] = Lk
                vds = loop.vdot_implicit(prog, V)
                es = -vds - cfg.eps_pd * prog.poly(loop.ball)
                es = es + Ls.expr() * (V - rho)
                gap = (bound - u_raw_num[j] if side == "hi"
                       else u_raw_num[j] - bound)
                es = es + Lk.expr() * gap
                if loop.robust:
                    Lws = prog.new_poly(f"L_w_{j}_{side}",
                                        loop.a_vars + loop.w_vars,
                                        cfg.deg_Lw_eff, "sos")
                    es = es + Lws.expr() * loop.wgap
                es = _add_free_terms(prog, loop, es, loop.trig,
                                     f"Lfs{j}{side}")
                es, Lgs = _add_named_free_terms(
                    prog, loop, es,
                    loop.g_num(theta_k, theta_l, sat={j: bound}),
                    f"Lgs{j}{side}")
                handles["sat_g"][(j, side)] = Lgs
                prog.add_sos(es, f"decrease-sat-{j}-{side}")

        cexpr = Lell.expr() * quad_in + (rho - V)
        cexpr = _add_free_terms(prog, loop, cexpr, loop.trig, "Lc")
        prog.add_sos(cexpr, "containment")
        return prog, handles

    rho, sol, handles = _rho_bisect(build, rho_in, cfg, counter)
    if rho is None:
        return StepResult(feasible=False, status="ctrl-stall",
                          n_solves=counter["n"])

    mults = {
        "L": sol.poly_value(handles["L"]),
        "Lell": sol.poly_value(handles["Lell"]),
        "Lg": [sol.poly_value(h) for h in handles["Lg"]],
        "Lin": (sol.poly_value(handles["Lin"])
                if handles["Lin"] is not None else None),
        "interior": {j: tuple(sol.poly_value(h) if h is not None else None
                              for h in hs)
                     for j, hs in handles["interior"].items()},
        "sat": {k: sol.poly_value(v) for k, v in handles["sat"].items()},
        "sat_slack": {k: sol.poly_value(v)
                      for k, v in handles["sat_slack"].items()},
        "sat_g": {k: [sol.poly_value(h) for h in hs]
                  for k, hs in handles["sat_g"].items()},
    }
    return StepResult(feasible=True, rho=rho, multipliers=mults,
                      status="ok", n_solves=counter["n"])


def refit_step(aug, rho, Ehat_inv, cfg, fixed, with_limits):
    """Implicit-plant counterpart of the Lyapunov step: V, E, and theta
    are all decisions while every multiplier is fixed from the level
    step.  The derivative placeholders keep dV and theta from ever
    multiplying each other."""
    loop = _Loop(aug, cfg)
    prog = SosProgram(loop.reg, quotient=loop.quot)
    Vdp, Vexpr, bake = loop.new_V(prog)
    E = prog.new_psd_matrix("E", loop.n_a)
    tk, tl = loop.theta_syms(prog)
    u_raws = [loop.u_sym(prog, tk, j) for j in range(loop.n_u)]

    vd = loop.vdot_implicit(prog, Vexpr)
    expr = -vd - cfg.eps_pd * prog.poly(loop.ball)
    expr = expr + prog.poly(fixed["L"]) * (Vexpr - rho)
    if loop.robust:
        Lw = prog.new_poly("L_w", loop.a_vars + loop.w_vars,
                           cfg.deg_Lw_eff, "sos")
        expr = expr + Lw.expr() * loop.wgap
        if fixed.get("Lin") is not None:
            expr = expr + prog.poly(fixed["Lin"]) * (
                -Vexpr + cfg.robust_inner_frac * rho)
    if with_limits:
        for j in loop.limited:
            lo, hi = loop.box[j]
            La, Lb_ = fixed["interior"].get(j, (None, None))
            if np.isfinite(hi) and La is not None:
                expr = expr + prog.poly(La) * (u_raws[j] - hi)
            if np.isfinite(lo) and Lb_ is not None:
                expr = expr + prog.poly(Lb_) * (lo - u_raws[j])
    expr = _add_free_terms(prog, loop, expr, loop.trig, "Lf")
    for Lg, g in zip(fixed["Lg"], loop.g_sym(prog, tk, tl)):
        expr = expr + prog.poly(Lg) * g
    loop.add_decrease(prog, expr, "decrease", with_b=True)

    if with_limits:
        for j in loop.limited:
            lo, hi = loop.box[j]
            for side, bound in (("hi", hi), ("lo", lo)):
                if not np.isfinite(bound):
                    continue
                Lk = fixed["sat"].get((j, side))
                Ls = fixed["sat_slack"].get((j, side))
                if Lk is None or Ls is None:
                    continue
                vds = loop.vdot_implicit(prog, Vexpr)
                es = -vds - cfg.eps_pd * prog.poly(loop.ball)
                es = es + prog.poly(Ls) * (Vexpr - rho)
                gap = (bound - u_raws[j] if side == "hi"
                       else u_raws[j] - bound)
                es = es + prog.poly(Lk) * gap
                if loop.robust:
                    Lws = prog.new_poly(f"L_w_{j}_{side}",
                                        loop.a_vars + loop.w_vars,
                                        cfg.deg_Lw_eff, "sos")
                    es = es + Lws.expr() * loop.wgap
                es = _add_free_terms(prog, loop, es, loop.trig,
                                     f"Lfs{j}{side}")
                for Lg, g in zip(fixed["sat_g"][(j, side)],
                                 loop.g_sym(prog, tk, tl, sat={j: bound})):
                    es = es + prog.poly(Lg) * g
                prog.add_sos(es, f"decrease-sat-{j}-{side}")

    cexpr = (prog.quad_form(E, loop.abar) - 1.0) * fixed["Lell"]
    cexpr = cexpr + (rho - Vexpr)
    cexpr = _add_free_terms(prog, loop, cexpr, loop.trig, "Lc")
    prog.add_sos(cexpr, "containment")

    prog.minimize(prog.trace_against(E, Ehat_inv))
    sol = prog.compile(cfg.basis).solve(cfg.solver)
    if not _feasible(sol):
        return StepResult(feasible=False, status="lyap-stall", n_solves=1)

    theta_k, theta_l = _extract_theta(sol, tk, tl, loop)
    return StepResult(feasible=True, rho=rho, theta_k=theta_k,
                      theta_l=theta_l, V=sol.poly_value(Vdp) + bake,
                      E=sol.matrix_value(E), multipliers={},
                      status="ok", n_solves=1)


# ---------------------------------------------------------------------------
# driver


def run_alternations(aug: AugmentedSystem,
                     cfg: AlternationConfig | None = None
                     ) -> AlternationResult:
    """Full alternation starting from the parameters in aug.ctrl.

    Terminates on max_iter, on relative volume-proxy improvement below
    vol_tol, or on the first stalled step; the best accepted state is
    returned either way, and the final parameters are written back into
    aug.ctrl (rebuild the closed loop before using its baked polynomials).
    """
    cfg = cfg or AlternationConfig()
    loop = _Loop(aug, cfg)
    implicit = loop.plant.form == "implicit"
    has_limits = bool(loop.limited)

    V = init_lyapunov(aug, cfg)
    rho = init_rho(aug, V, cfg)
    theta_k = aug.ctrl.theta_k.copy()
    theta_l = aug.ctrl.theta_l.copy()
    E = None
    Ehat = seed_ellipsoid(aug, V, rho)
    records = []
    n_solves = 2
    stall_reason = None
    converged = False
    limits_ok = False
    fixed_limits = None
    prev_logdet = None

    for it in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        Ehat_inv = np.linalg.inv(Ehat + 1e-9 * np.eye(loop.n_a))

        if implicit:
            cres = level_step(aug, V, theta_k, theta_l, rho, Ehat, cfg)
        else:
            cres = controller_step(aug, V, rho, Ehat, cfg,
                                   fixed_limits=fixed_limits)
        n_solves += cres.n_solves
        if not cres.feasible:
            stall_reason = ("level step infeasible at the incoming rho"
                            if implicit else
                            "controller step infeasible at the incoming rho")
            records.append(IterationRecord(it, rho, _logdet_inv(E),
                                           time.perf_counter() - t0,
                                           "ctrl-stall"))
            break
        rho = cres.rho
        if cres.theta_k is not None:
            theta_k, theta_l = cres.theta_k, cres.theta_l
            aug.ctrl.theta_k[...] = theta_k
            aug.ctrl.theta_l[...] = theta_l

        want_limits = has_limits
        if implicit:
            lres = refit_step(aug, rho, Ehat_inv, cfg, cres.multipliers,
                              with_limits=want_limits)
        else:
            lres = lyapunov_step(aug, theta_k, theta_l, rho, Ehat_inv,
                                 cfg, cres.multipliers,
                                 with_limits=want_limits)
        n_solves += lres.n_solves
        status = lres.status
        if not lres.feasible and want_limits and not limits_ok:
            # first introduction of the saturation constraints can fail;
            # keep alternating without them and retry next iteration
            if implicit:
                lres = refit_step(aug, rho, Ehat_inv, cfg,
                                  cres.multipliers, with_limits=False)
            else:
                lres = lyapunov_step(aug, theta_k, theta_l, rho, Ehat_inv,
                                     cfg, cres.multipliers,
                                     with_limits=False)
            n_solves += lres.n_solves
            status = "lyap-nolimits" if lres.feasible else lres.status
        if not lres.feasible:
            stall_reason = "Lyapunov-side step infeasible"
            records.append(IterationRecord(it, rho, _logdet_inv(E),
                                           time.perf_counter() - t0,
                                           "lyap-stall"))
            break

        V, E = lres.V, lres.E
        if lres.theta_k is not None:
            theta_k, theta_l = lres.theta_k, lres.theta_l
            aug.ctrl.theta_k[...] = theta_k
            aug.ctrl.theta_l[...] = theta_l
        if want_limits and status != "lyap-nolimits":
            limits_ok = True
            if not implicit:
                fixed_limits = lres.multipliers
        elif status == "lyap-nolimits":
            limits_ok = False
            fixed_limits = None
        Ehat = E.copy()
        ld = _logdet_inv(E)
        records.append(IterationRecord(it, rho, ld,
                                       time.perf_counter() - t0, status))
        if prev_logdet is not None and cfg.vol_tol > 0 and \
                abs(ld - prev_logdet) < cfg.vol_tol * max(1.0,
                                                          abs(prev_logdet)):
            converged = True
            break
        prev_logdet = ld

    aug.ctrl.theta_k[...] = theta_k
    aug.ctrl.theta_l[...] = theta_l
    return AlternationResult(
        V=V, rho=rho, theta_k=theta_k, theta_l=theta_l, E=E,
        records=records, converged=converged,
        stalled=stall_reason is not None, stall_reason=stall_reason,
        limits_certified=limits_ok or not has_limits,
        n_solves=n_solves)


def _logdet_inv(E) -> float:
    if E is None:
        return float("nan")
    sign, ld = np.linalg.slogdet(E)
    if sign <= 0:
        return float("nan")
    return -ld


def write_alternation_log(path, records, include_wall=False):
    """Iteration CSV; wall times are off by default so identical runs
    produce identical bytes."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = ["iteration", "rho", "logdet_e_inv", "status"]
        if include_wall:
            header.insert(3, "wall_s")
        w.writerow(header)
        for r in records:
            ld = ("nan" if math.isnan(r.logdet_e_inv)
                  else repr(float(r.logdet_e_inv)))
            row = [r.iteration, repr(float(r.rho)), ld, r.status]
            if include_wall:
                row.insert(3, f"{r.wall:.3f}")
            w.writerow(row)
