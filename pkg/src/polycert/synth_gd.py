"""Gradient-based synthesis of dynamic output-feedback controllers.

Training rolls the closed loop forward with explicit Euler steps and a C1
soft input clamp, accumulates a quadratic tracking cost over the augmented
state and control, and backpropagates through the step recurrence by hand:
reverse accumulation with precompiled plant, observation, and basis
Jacobians.  The gradient is exact for the discretized loss, so central
finite differences agree to roughly solver precision.

Evaluation rollouts integrate the same closed loop with RK4 and the hard
clamp instead; `rollout` is that surface.

Implicit-form plants never build their rational explicit dynamics: the
forward pass solves mass(x) acc = rhs(x, u) pointwise and the backward
pass uses the implicit-function derivative
d acc = mass^{-1} (d rhs - d mass acc).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .controller import AugmentedSystem
from .polynomial import Polynomial
from .systems import NoiseModel

LOSS_CAP = 1e6


class GdError(RuntimeError):
    """Rollout or gradient failure during training."""


@dataclass
class GdConfig:
    """Horizon, cost weights, and optimizer knobs for trajectory training.

    The IC region defaults to a small box around the goal in raw
    coordinates (angles, not sin/cos pairs); `ic_box` overrides it and
    `ic_levelset` = (V, rho, raw box) switches to rejection sampling from
    a sublevel set.  `beta_t` defaults to 10 * alpha_a.
    """

    horizon: int = 40
    dt: float = 0.1
    n_samp: int = 20
    ic_box: list | None = None
    ic_levelset: tuple | None = None
    alpha_a: float = 1.0
    alpha_u: float = 1e-3
    beta_t: float | None = None
    lr: float = 0.05
    decay: float = 0.995
    clip_norm: float = 1.0
    iterations: int = 150
    seed: int = 0
    theta_scale: float = 0.01
    blowup: float = 1e6
    clamp_layer_frac: float = 0.1
    integrator: str = "rk4"
    adaptive: bool = False
    resample_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_samp < 1:
            raise ValueError("n_samp must be >= 1")
        for name in ("alpha_a", "alpha_u"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.beta_t is not None and self.beta_t < 0:
            raise ValueError("beta_t must be nonnegative")
        if not 0.0 <= self.clamp_layer_frac < 0.5:
            raise ValueError("clamp_layer_frac must be in [0, 0.5)")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def terminal_weight(self) -> float:
        return 10.0 * self.alpha_a if self.beta_t is None else self.beta_t

    def fingerprint(self) -> str:
        """Hash of everything a resumed run must agree on.  The iteration
        budget and checkpoint cadence are bookkeeping, not trajectory
        physics, so continuing a run with a larger budget is allowed."""
        skip = ("ic_levelset", "iterations", "checkpoint_every")
        payload = {k: v for k, v in vars(self).items() if k not in skip}
        if self.ic_levelset is not None:
            V, rho, box = self.ic_levelset
            payload["ic_levelset"] = [repr(V), rho, [list(b) for b in box]]
        blob = json.dumps(payload, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Trajectory:
    """Discrete closed-loop rollout: states at t=0..T, inputs at t=0..T-1.

    `inputs[t]` is the control applied over [times[t], times[t+1]); a
    diverged rollout is truncated at the last finite state.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    goal: np.ndarray
    diverged: bool = False

    def __len__(self):
        return self.states.shape[0] - 1


def _traj_cost(traj: Trajectory, cfg: GdConfig) -> float:
    if traj.diverged:
        return LOSS_CAP
    T = len(traj)
    d = traj.states - traj.goal
    run = 0.0
    for t in range(1, T):
        run += cfg.alpha_a * float(d[t] @ d[t])
        run += cfg.alpha_u * float(traj.inputs[t] @ traj.inputs[t])
    run += cfg.terminal_weight * float(d[T] @ d[T])
    return min(run, LOSS_CAP)


def loss(trajectories, cfg: GdConfig) -> float:
    """Mean trajectory cost; diverged rollouts contribute the 1e6 cap."""
    if not trajectories:
        raise ValueError("loss needs a nonempty batch of trajectories")
    return float(np.mean([_traj_cost(tr, cfg) for tr in trajectories]))


# ---------------------------------------------------------------------------
# clamping


def _clamp_layers(box, frac):
    """Per-input (lo, hi, kappa) with kappa = 0 meaning no smoothing."""
    out = []
    for lo, hi in box:
        lo, hi = float(lo), float(hi)
        kappa = frac * (hi - lo) if np.isfinite(hi - lo) else 0.0
        out.append((lo, hi, kappa))
    return out


def soft_clamp(v, lo, hi, kappa):
    """C1 piecewise-quadratic clamp; returns (value, derivative).

    Exact outside the layer [bound - kappa, bound + kappa]; the largest
    deviation from the hard clamp is kappa / 4, attained at the bound.
    """
    v = np.asarray(v, dtype=float)
    if kappa <= 0.0:
        return hard_clamp(v, lo, hi), ((v > lo) & (v < hi)).astype(float)
    out = v.copy()
    der = np.ones_like(v)
    mid = (v > hi - kappa) & (v < hi + kappa)
    out = np.where(mid, hi - (v - hi - kappa) ** 2 / (4.0 * kappa), out)
    der = np.where(mid, (hi + kappa - v) / (2.0 * kappa), der)
    sat = v >= hi + kappa
    out = np.where(sat, hi, out)
    der = np.where(sat, 0.0, der)
    mid = (v < lo + kappa) & (v > lo - kappa)
    out = np.where(mid, lo + (v - lo + kappa) ** 2 / (4.0 * kappa), out)
    der = np.where(mid, (v - lo + kappa) / (2.0 * kappa), der)
    sat = v <= lo - kappa
    out = np.where(sat, lo, out)
    der = np.where(sat, 0.0, der)
    return out, der


def hard_clamp(v, lo, hi):
    return np.minimum(np.maximum(np.asarray(v, dtype=float), lo), hi)


# ---------------------------------------------------------------------------
# compiled rollout engine


class RolloutEngine:
    """Batched forward/backward rollout machinery for one closed loop.

    Controller parameters are read per call, so a single engine serves a
    whole training run while theta changes; the augmented system only
    supplies structure (its baked closed-loop polynomials are not used).
    """

    def __init__(self, aug: AugmentedSystem):
        plant, ctrl = aug.plant, aug.ctrl
        self.aug = aug
        self.plant = plant
        self.ctrl = ctrl
        self.n_x = plant.n_x
        self.n_u = plant.n_u
        self.n_k = plant.n_k
        self.n_z = ctrl.n_z
        self.n_a = self.n_x + self.n_z
        self.a0 = np.concatenate([plant.x0, np.zeros(self.n_z)])
        self.y0 = np.asarray(ctrl.y0, dtype=float)
        reg = plant.reg

        x_ids = [v.id for v in plant.state_vars]
        xu_ids = x_ids + [v.id for v in plant.input_vars]
        zy_vars = list(ctrl.z_vars) + list(ctrl.y_vars)
        zy_ids = [v.id for v in zy_vars]

        obs = list(plant.h_k)
        for p in plant.h_k:
            obs.extend(p.differentiate(v) for v in plant.state_vars)
        self._obs = kernels.compile_polys(obs, x_ids)

        self.nbk = len(ctrl.basis_k)
        self.nbl = len(ctrl.basis_l)
        bas = list(ctrl.basis_k.entries)
        for p in ctrl.basis_k.entries:
            bas.extend(p.differentiate(v) for v in zy_vars)
        bas.extend(ctrl.basis_l.entries)
        for p in ctrl.basis_l.entries:
            bas.extend(p.differentiate(v) for v in zy_vars)
        self._bas = kernels.compile_polys(bas, zy_ids)

        if plant.form == "explicit":
            self._impl = []
            rows = []
            for i in range(self.n_x):
                row = plant.f1[i]
                for j, uv in enumerate(plant.input_vars):
                    row = row + plant.f2[i][j] * Polynomial.var(reg, uv)
                rows.append(row)
            grad_rows = list(rows)
            for row in rows:
                grad_rows.extend(row.differentiate(v)
                                 for v in plant.state_vars + plant.input_vars)
            self._dyn_plain = kernels.compile_polys(rows, xu_ids)
            self._dyn_grad = kernels.compile_polys(grad_rows, xu_ids)
        else:
            self._impl = list(plant.implicit_idx)
            k = len(self._impl)
            zero = Polynomial.zero(reg)
            kin = [plant.kinematic.get(i, zero) for i in range(self.n_x)]
            kin_grad = list(kin)
            for row in kin:
                kin_grad.extend(row.differentiate(v) for v in plant.state_vars)
            self._kin_plain = kernels.compile_polys(kin, x_ids)
            self._kin_grad = kernels.compile_polys(kin_grad, x_ids)
            mass = [plant.mass[i][j] for i in range(k) for j in range(k)]
            mass_grad = list(mass)
            for p in mass:
                mass_grad.extend(p.differentiate(v) for v in plant.state_vars)
            self._mass_plain = kernels.compile_polys(mass, x_ids)
            self._mass_grad = kernels.compile_polys(mass_grad, x_ids)
            rhs = []
            for i in range(k):
                row = plant.rhs1[i]
                for j, uv in enumerate(plant.input_vars):
                    row = row + plant.rhs2[i][j] * Polynomial.var(reg, uv)
                rhs.append(row)
            rhs_grad = list(rhs)
            for row in rhs:
                rhs_grad.extend(row.differentiate(v)
                                for v in plant.state_vars + plant.input_vars)
            self._rhs_plain = kernels.compile_polys(rhs, xu_ids)
            self._rhs_grad = kernels.compile_polys(rhs_grad, xu_ids)

        box = plant.input_box or [(-np.inf, np.inf)] * self.n_u

        self._box = [(float(lo), float(hi)) for lo, hi in box]
        self._layers = None  # set per call from cfg

    @property
    def n_params(self) -> int:
        return self.n_u * self.nbk + self.n_z * self.nbl

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters")
        nk = self.n_u * self.nbk
        return (theta[:nk].reshape(self.n_u, self.nbk),
                theta[nk:].reshape(self.n_z, self.nbl))

    # -- pointwise evaluation ------------------------------------------------

    def _observe(self, X, need_grad):
        vals = kernels.eval_many(*self._obs, X)
        h = vals[:, :self.n_k]
        if not need_grad:
            return h, None
        Hx = vals[:, self.n_k:].reshape(-1, self.n_k, self.n_x)
        return h, Hx

    def _bases(self, Z, Y):
        ZY = np.concatenate([Z, Y], axis=1)
        vals = kernels.eval_many(*self._bas, ZY)
        nv = self.n_z + self.n_k
        i = 0
        mk = vals[:, i:i + self.nbk]; i += self.nbk
        Jk = vals[:, i:i + self.nbk * nv].reshape(-1, self.nbk, nv)
        i += self.nbk * nv
        ml = vals[:, i:i + self.nbl]; i += self.nbl
        Jl = vals[:, i:i + self.nbl * nv].reshape(-1, self.nbl, nv)
        return mk, Jk, ml, Jl

    def _dyn(self, X, U, need_grad):
        """F(x, u) with optional Jacobians; returns (F, Fx, Fu, bad mask)."""
        N = X.shape[0]
        bad = np.zeros(N, dtype=bool)
        if not self._impl:
            XU = np.concatenate([X, U], axis=1)
            pack = self._dyn_grad if need_grad else self._dyn_plain
            vals = kernels.eval_many(*pack, XU)
            F = vals[:, :self.n_x]
            if not need_grad:
                return F, None, None, bad
            J = vals[:, self.n_x:].reshape(N, self.n_x, self.n_x + self.n_u)
            return F, J[:, :, :self.n_x], J[:, :, self.n_x:], bad

        k = len(self._impl)
        XU = np.concatenate([X, U], axis=1)
        if need_grad:
            kin = kernels.eval_many(*self._kin_grad, X)
            mass = kernels.eval_many(*self._mass_grad, X)
            rhs = kernels.eval_many(*self._rhs_grad, XU)
        else:
            kin = kernels.eval_many(*self._kin_plain, X)
            mass = kernels.eval_many(*self._mass_plain, X)
            rhs = kernels.eval_many(*self._rhs_plain, XU)
        M = mass[:, :k * k].reshape(N, k, k)
        r = rhs[:, :k]
        det = np.linalg.det(M)
        bad = ~np.isfinite(det) | (np.abs(det) < 1e-12)
        if bad.any():
            M = M.copy()
            M[bad] = np.eye(k)
        acc = np.linalg.solve(M, r[:, :, None])[:, :, 0]
        F = kin[:, :self.n_x].copy()
        F[:, self._impl] = acc
        if not need_grad:
            return F, None, None, bad
        Kx = kin[:, self.n_x:].reshape(N, self.n_x, self.n_x)
        dM = mass[:, k * k:].reshape(N, k, k, self.n_x)
        dr = rhs[:, k:].reshape(N, k, self.n_x + self.n_u)
        rb = dr.copy()
        rb[:, :, :self.n_x] -= np.einsum("nijv,nj->niv", dM, acc)
        dacc = np.linalg.solve(M, rb)
        Fx = Kx.copy()
        Fx[:, self._impl, :] = dacc[:, :, :self.n_x]
        Fu = np.zeros((N, self.n_x, self.n_u))
        Fu[:, self._impl, :] = dacc[:, :, self.n_x:]
        return F, Fx, Fu, bad

    # -- training forward / backward ----------------------------------------

    def _training_forward(self, tk, tl, x0s, z0s, w_seq, cfg):
        T, dt = cfg.horizon, cfg.dt
        N = x0s.shape[0]
        layers = _clamp_layers(self._box, cfg.clamp_layer_frac)
        X = np.zeros((T + 1, N, self.n_x))
        Z = np.zeros((T + 1, N, self.n_z))
        X[0], Z[0] = x0s, z0s
        tape = {
            "Hx": np.zeros((T, N, self.n_k, self.n_x)),
            "mk": np.zeros((T, N, self.nbk)),
            "Jk": np.zeros((T, N, self.nbk, self.n_z + self.n_k)),
            "ml": np.zeros((T, N, self.nbl)),
            "Jl": np.zeros((T, N, self.nbl, self.n_z + self.n_k)),
            "U": np.zeros((T, N, self.n_u)),
            "Dc": np.zeros((T, N, self.n_u)),
            "Fx": np.zeros((T, N, self.n_x, self.n_x)),
            "Fu": np.zeros((T, N, self.n_x, self.n_u)),
        }
        dead = np.zeros(N, dtype=bool)
        for t in range(T):
            h, Hx = self._observe(X[t], True)
            Y = h - self.y0
            if w_seq is not None:
                Y = Y + w_seq[t]
            mk, Jk, ml, Jl = self._bases(Z[t], Y)
            u_raw = mk @ tk.T
            U = np.empty_like(u_raw)
            Dc = np.empty_like(u_raw)
            for j, (lo, hi, kap) in enumerate(layers):
                U[:, j], Dc[:, j] = soft_clamp(u_raw[:, j], lo, hi, kap)
            F, Fx, Fu, bad = self._dyn(X[t], U, True)
            zdot = ml @ tl.T
            tape["Hx"][t], tape["mk"][t], tape["Jk"][t] = Hx, mk, Jk
            tape["ml"][t], tape["Jl"][t] = ml, Jl
            tape["U"][t], tape["Dc"][t] = U, Dc
            tape["Fx"][t], tape["Fu"][t] = Fx, Fu
            xn = X[t] + dt * F
            zn = Z[t] + dt * zdot
            nrm = np.sqrt(np.sum(xn * xn, axis=1) + np.sum(zn * zn, axis=1))
            newly = bad | ~np.isfinite(nrm) | (nrm > cfg.blowup)
            dead = dead | newly
            X[t + 1] = np.where(dead[:, None], X[t], xn)
            Z[t + 1] = np.where(dead[:, None], Z[t], zn)
        tape["X"], tape["Z"], tape["dead"] = X, Z, dead
        return tape

    def _costs(self, tape, cfg):
        T = cfg.horizon
        X, Z, dead = tape["X"], tape["Z"], tape["dead"]
        dx = X - self.plant.x0
        run = np.zeros(X.shape[1])
        for t in range(1, T):
            run += cfg.alpha_a * (np.sum(dx[t] ** 2, axis=1)
                                  + np.sum(Z[t] ** 2, axis=1))
            run += cfg.alpha_u * np.sum(tape["U"][t] ** 2, axis=1)
        run += cfg.terminal_weight * (np.sum(dx[T] ** 2, axis=1)
                                      + np.sum(Z[T] ** 2, axis=1))
        return np.where(dead | ~np.isfinite(run), LOSS_CAP,
                        np.minimum(run, LOSS_CAP))

    def _backward(self, tape, tk, tl, cfg, live):
        T, dt = cfg.horizon, cfg.dt
        X, Z = tape["X"], tape["Z"]
        N = X.shape[1]
        m = live.astype(float)[:, None]
        bt = cfg.terminal_weight
        lam_x = 2.0 * bt * (X[T] - self.plant.x0) * m
        lam_z = 2.0 * bt * Z[T] * m
        gk = np.zeros((self.n_u, self.nbk))
        gl = np.zeros((self.n_z, self.nbl))
        for t in range(T - 1, -1, -1):
            pu = dt * np.einsum("nij,ni->nj", tape["Fu"][t], lam_x)
            if 1 <= t <= T - 1:
                pu = pu + 2.0 * cfg.alpha_u * tape["U"][t] * m
            pr = pu * tape["Dc"][t]
            gk += np.einsum("nj,nb->jb", pr, tape["mk"][t])
            plz = dt * lam_z
            gl += np.einsum("nz,nb->zb", plz, tape["ml"][t])
            pmk = pr @ tk
            pml = plz @ tl
            pzy = (np.einsum("nb,nbv->nv", pmk, tape["Jk"][t])
                   + np.einsum("nb,nbv->nv", pml, tape["Jl"][t]))
            pz = pzy[:, :self.n_z]
            py = pzy[:, self.n_z:]
            px = np.einsum("nk,nkx->nx", py, tape["Hx"][t])
            lam_x = (lam_x + dt * np.einsum("nij,ni->nj", tape["Fx"][t], lam_x)
                     + px)
            lam_z = lam_z + pz
            if 1 <= t <= T - 1:
                lam_x = lam_x + 2.0 * cfg.alpha_a * (X[t] - self.plant.x0) * m
                lam_z = lam_z + 2.0 * cfg.alpha_a * Z[t] * m
        return np.concatenate([gk.ravel(), gl.ravel()]) / N

    def _batch(self, x0s, z0s):
        x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
        if x0s.ndim != 2 or x0s.shape[1] != self.n_x or x0s.shape[0] == 0:
            raise ValueError(f"IC batch must be (N, {self.n_x}) with N >= 1")
        if z0s is None:
            return x0s, np.zeros((x0s.shape[0], self.n_z))
        z0s = np.atleast_2d(np.asarray(z0s, dtype=float))
        if z0s.shape != (x0s.shape[0], self.n_z):
            raise ValueError(f"latent batch must be (N, {self.n_z})")
        return x0s, z0s

    def loss_and_grad(self, theta, x0s, z0s, cfg, w_seq=None):
        """Mean capped cost of the soft-clamped Euler batch and its exact
        gradient; capped or diverged samples contribute zero gradient."""
        tk, tl = self.split(theta)
        x0s, z0s = self._batch(x0s, z0s)
        tape = self._training_forward(tk, tl, x0s, z0s, w_seq, cfg)
        costs = self._costs(tape, cfg)
        live = ~tape["dead"] & (costs < LOSS_CAP)
        g = self._backward(tape, tk, tl, cfg, live)
        if not np.all(np.isfinite(g)):
            idx = self._find_bad_sample(theta, x0s, z0s, cfg, w_seq)
            raise GdError(f"nonfinite gradient from trajectory {idx}")
        return float(np.mean(costs)), g

    def training_loss(self, theta, x0s, z0s, cfg, w_seq=None):
        """Loss alone, through the identical forward pass (for difference
        checks against the returned gradient)."""
        tk, tl = self.split(theta)
        x0s, z0s = self._batch(x0s, z0s)
        tape = self._training_forward(tk, tl, x0s, z0s, w_seq, cfg)
        return float(np.mean(self._costs(tape, cfg)))

    def _find_bad_sample(self, theta, x0s, z0s, cfg, w_seq):
        for i in range(x0s.shape[0]):
            w = None if w_seq is None else w_seq[:, i:i + 1]
            tk, tl = self.split(theta)
            tape = self._training_forward(tk, tl, x0s[i:i + 1], z0s[i:i + 1],
                                          w, cfg)
            costs = self._costs(tape, cfg)
            live = ~tape["dead"] & (costs < LOSS_CAP)
            g = self._backward(tape, tk, tl, cfg, live)
            if not np.all(np.isfinite(g)):
                return i
        return -1

    # -- evaluation rollout --------------------------------------------------

    def _closed_loop_rate(self, x, z, w, tk, tl):
        h, _ = self._observe(x, False)
        Y = h - self.y0 + w
        mk, _, ml, _ = self._bases(z, Y)
        u = np.empty((x.shape[0], self.n_u))
        raw = mk @ tk.T
        for j, (lo, hi) in enumerate(self._box):
            u[:, j] = hard_clamp(raw[:, j], lo, hi)
        F, _, _, bad = self._dyn(x, u, False)
        return F, ml @ tl.T, u, bad

    def eval_rollout(self, theta, x0, z0, cfg, noise: NoiseModel | None = None,
                     check_ic: bool = True) -> Trajectory:
        """Hard-clamped rollout from one IC; RK4 (default) or Euler steps.

        Noise is redrawn each step and held across the step's stages.  A
        state norm beyond cfg.blowup truncates the trajectory and flags it
        diverged.
        """
        tk, tl = self.split(theta)
        x = np.asarray(x0, dtype=float).reshape(1, self.n_x)
        z = np.asarray(z0, dtype=float).reshape(1, self.n_z)
        if check_ic:
            self.plant.check_state(x[0])
        T, dt = cfg.horizon, cfg.dt
        states = np.zeros((T + 1, self.n_a))
        inputs = np.zeros((T, self.n_u))
        states[0] = np.concatenate([x[0], z[0]])
        diverged = False
        steps = 0
        for t in range(T):
            w = np.zeros((1, self.n_k))
            if noise is not None:
                w[0] = noise.draw(self.n_k)
            F1, G1, u, bad = self._closed_loop_rate(x, z, w, tk, tl)
            inputs[t] = u[0]
            if cfg.integrator == "euler":
                xn, zn = x + dt * F1, z + dt * G1
            else:
                F2, G2, _, b2 = self._closed_loop_rate(
                    x + 0.5 * dt * F1, z + 0.5 * dt * G1, w, tk, tl)
                F3, G3, _, b3 = self._closed_loop_rate(
                    x + 0.5 * dt * F2, z + 0.5 * dt * G2, w, tk, tl)
                F4, G4, _, b4 = self._closed_loop_rate(
                    x + dt * F3, z + dt * G3, w, tk, tl)
                bad = bad | b2 | b3 | b4
                xn = x + (dt / 6.0) * (F1 + 2 * F2 + 2 * F3 + F4)
                zn = z + (dt / 6.0) * (G1 + 2 * G2 + 2 * G3 + G4)
            nrm = float(np.linalg.norm(xn)) + float(np.linalg.norm(zn))
            if bad[0] or not np.isfinite(nrm) or nrm > cfg.blowup:
                diverged = True
                break
            x, z = xn, zn
            states[t + 1] = np.concatenate([x[0], z[0]])
            steps = t + 1
        times = dt * np.arange(steps + 1)
        return Trajectory(times=times, states=states[:steps + 1],
                          inputs=inputs[:steps], goal=self.a0.copy(),
                          diverged=diverged)


# ---------------------------------------------------------------------------
# public operations


def rollout(aug: AugmentedSystem, x0, z0, cfg: GdConfig,
            noise: NoiseModel | None = None) -> Trajectory:
    """Evaluation rollout of the closed loop from (x0, z0)."""
    eng = RolloutEngine(aug)
    theta = np.concatenate([aug.ctrl.theta_k.ravel(),
                            aug.ctrl.theta_l.ravel()])
    return eng.eval_rollout(theta, x0, z0, cfg, noise)


def grad(aug: AugmentedSystem, theta, x0s, cfg: GdConfig,
         z0s=None) -> np.ndarray:
    """Exact gradient of the training loss at theta over the given batch."""
    eng = RolloutEngine(aug)
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if z0s is None:
        z0s = np.zeros((x0s.shape[0], eng.n_z))
    return eng.loss_and_grad(theta, x0s, z0s, cfg)[1]


def sample_ics(plant, cfg: GdConfig, rng) -> np.ndarray:
    """Initial-condition batch in lifted coordinates, on the manifold."""
    raw0 = plant.unlift_state(plant.x0)
    nd = plant.raw_dim
    if cfg.ic_levelset is not None:
        V, rho, box = cfg.ic_levelset
        if len(box) != nd:
            raise ValueError(f"ic_levelset box needs {nd} coordinate ranges")
        lo = np.array([b[0] for b in box])
        hi = np.array([b[1] for b in box])
        out = []
        attempts = 0
        avars = None
        while len(out) < cfg.n_samp:
            attempts += 1
            if attempts > 10000 * cfg.n_samp:
                raise GdError("level-set IC sampler rejected >99.99% of draws")
            raw = rng.uniform(lo, hi)
            x = plant.lift_state(raw)
            if avars is None:
                avars = V.variables()
            env = {}
            for v in avars:
                if v in plant.state_vars:
                    env[v] = float(x[plant.state_vars.index(v)])
                else:
                    env[v] = 0.0
            if V.evaluate(env) <= rho:
                out.append(x)
        return np.array(out)
    if cfg.ic_box is not None:
        if len(cfg.ic_box) != nd:
            raise ValueError(f"ic_box needs {nd} coordinate ranges")
        lo = np.array([b[0] for b in cfg.ic_box], dtype=float)
        hi = np.array([b[1] for b in cfg.ic_box], dtype=float)
    else:
        lo, hi = raw0 - 0.1, raw0 + 0.1
    raws = rng.uniform(lo, hi, size=(cfg.n_samp, nd))
    return np.array([plant.lift_state(r) for r in raws])


@dataclass
class TrainResult:
    theta: np.ndarray
    best_loss: float
    history: list = field(default_factory=list)   # (iter, loss, grad_norm)
    diverged: bool = False


CHECKPOINT_SCHEMA = "polycert-gd-checkpoint"


def _write_checkpoint(path, state):
    with open(path, "w") as f:
        json.dump(state, f, sort_keys=True, indent=1)


def train(aug: AugmentedSystem, cfg: GdConfig, log_path=None,
          checkpoint_path=None, resume_from=None) -> TrainResult:
    """Plain gradient descent with step decay and global-norm clipping.

    Returns the best-loss parameters (also written into aug's controller;
    rebuild the closed loop before any symbolic use).  The training batch
    is sampled once up front unless cfg.resample_every is set.  History
    rows are (iteration, loss, gradient norm) with the loss evaluated at
    the pre-update theta, one row per iteration; the parameters left by
    the final update are only evaluated if the run is resumed.
    """
    eng = RolloutEngine(aug)
    rng = np.random.default_rng(cfg.seed)
    theta = rng.uniform(-cfg.theta_scale, cfg.theta_scale, eng.n_params)
    x0s = sample_ics(aug.plant, cfg, rng)
    z0s = np.zeros((cfg.n_samp, eng.n_z))
    history = []
    best_loss = np.inf
    best = theta.copy()
    adapt = np.zeros(eng.n_params) if cfg.adaptive else None
    start = 0

    if resume_from is not None:
        if cfg.resample_every:
            raise ValueError("resume with batch resampling is not supported "
                             "(the generator state is not checkpointed)")
        with open(resume_from) as f:
            ck = json.load(f)
        if ck.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError("not a training checkpoint file")
        if ck["config_fp"] != cfg.fingerprint():
            raise ValueError("checkpoint was written under a different config")
        start = int(ck["iteration"])
        theta = np.array(ck["theta"], dtype=float)
        best = np.array(ck["best_theta"], dtype=float)
        best_loss = float(ck["best_loss"])
        history = [tuple(row) for row in ck["log"]]
        x0s = np.array(ck["batch_x"], dtype=float)
        z0s = np.array(ck["batch_z"], dtype=float)
        if cfg.adaptive:
            adapt = np.array(ck["adapt"], dtype=float)

    def save_checkpoint(iteration):
        if checkpoint_path is None:
            return
        state = {
            "schema": CHECKPOINT_SCHEMA, "version": 1,
            "config_fp": cfg.fingerprint(), "iteration": iteration,
            "theta": list(theta), "best_theta": list(best),
            "best_loss": best_loss, "log": [list(r) for r in history],
            "batch_x": [list(r) for r in x0s],
            "batch_z": [list(r) for r in z0s],
        }
        if cfg.adaptive:
            state["adapt"] = list(adapt)
        _write_checkpoint(checkpoint_path, state)

    for it in range(start, cfg.iterations):
        if cfg.resample_every and it > 0 and it % cfg.resample_every == 0:
            x0s = sample_ics(aug.plant, cfg, rng)
        lossv, g = eng.loss_and_grad(theta, x0s, z0s, cfg)
        gn = float(np.linalg.norm(g))
        history.append((it, lossv, gn))
        if lossv < best_loss:
            best_loss, best = lossv, theta.copy()
        if gn > cfg.clip_norm > 0:
            g = g * (cfg.clip_norm / gn)
        if cfg.adaptive:
            adapt += g * g
            step = cfg.lr * (cfg.decay ** it) / np.sqrt(adapt + 1e-12)
        else:
            step = cfg.lr * (cfg.decay ** it)
        theta = theta - step * g
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(it + 1)

    save_checkpoint(cfg.iterations)

    aug.ctrl.unpack(best)
    if log_path is not None:
        write_training_log(log_path, history)
    return TrainResult(theta=best, best_loss=best_loss, history=history,
                       diverged=bool(best_loss >= LOSS_CAP))


def write_training_log(path, history):
    """CSV of (iter, loss, grad_norm) rows; floats use shortest repr so
    identical runs produce identical bytes."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "loss", "grad_norm"])
        for it, lossv, gn in history:
            w.writerow([it, repr(float(lossv)), repr(float(gn))])
