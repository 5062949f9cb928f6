"""Dynamic output-feedback polynomial controllers and closed-loop assembly.

A controller carries a latent state z in R^{n_z} and two polynomial maps
over (z, y): the control law u = theta_k m_k(z, y) and the latent update
zdot = theta_l m_l(z, y), where m_k, m_l are monomial basis vectors of
degrees d_k, d_l (constant term included) and the theta matrices are the
only parameters.  The observation fed to those maps is the keypoint vector,
by default shifted by its goal value so the maps see zero at the goal.

close_loop substitutes y = h_k(x) - y0 (+ w under observation error) to
produce the augmented vector field over a = [x; z]; implicit plants keep
their mass-matrix acceleration rows with placeholders b, everything else
stays explicit.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .polynomial import Polynomial, basis_vector
from .systems import PlantModel

CONTROLLER_SCHEMA = "polycert-controller"
CONTROLLER_SCHEMA_VERSION = 1


class DynamicController:
    """Polynomial maps u = theta_k m_k(z, y), zdot = theta_l m_l(z, y).

    Basis variables are ordered (z_1..z_{n_z}, y_1..y_{n_k}); entries follow
    graded-lex order, so the theta column layout is deterministic.  theta
    arrays are mutable in place (gradient methods update them); everything
    else is fixed at construction.
    """

    def __init__(self, plant: PlantModel, n_z: int, d_k: int, d_l: int,
                 shift_obs: bool = True):
        if n_z < 0:
            raise ValueError("latent dimension must be >= 0")
        if d_k < 0 or d_l < 0:
            raise ValueError("degrees must be >= 0")
        self.plant = plant
        self.n_z = n_z
        self.d_k = d_k
        self.d_l = d_l
        self.shift_obs = bool(shift_obs)
        reg = plant.reg
        self.z_vars = [reg.var(f"z{i+1}") for i in range(n_z)]
        self.y_vars = [reg.var(f"y{i+1}") for i in range(plant.n_k)]
        self.basis_k = basis_vector(reg, self.z_vars + self.y_vars, d_k)
        self.basis_l = basis_vector(reg, self.z_vars + self.y_vars, d_l)
        self.theta_k = np.zeros((plant.n_u, len(self.basis_k)))
        self.theta_l = np.zeros((n_z, len(self.basis_l)))
        self.y0 = (plant.keypoints(plant.x0) if shift_obs
                   else np.zeros(plant.n_k))

    # -- parameter vector ---------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.theta_k.size + self.theta_l.size

    def pack(self) -> np.ndarray:
        return np.concatenate([self.theta_k.ravel(), self.theta_l.ravel()])

    def unpack(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters")
        nk = self.theta_k.size
        self.theta_k[...] = vec[:nk].reshape(self.theta_k.shape)
        self.theta_l[...] = vec[nk:].reshape(self.theta_l.shape)

    # -- symbolic maps ------------------------------------------------------

    def u_polys(self) -> list[Polynomial]:
        """Control components as polynomials in (z, y)."""
        return [self._combo(self.theta_k[j], self.basis_k)
                for j in range(self.theta_k.shape[0])]

    def l_polys(self) -> list[Polynomial]:
        """Latent update components as polynomials in (z, y)."""
        return [self._combo(self.theta_l[j], self.basis_l)
                for j in range(self.n_z)]

    def _combo(self, coeffs, basis) -> Polynomial:
        out = Polynomial.zero(self.plant.reg)
        for c, entry in zip(coeffs, basis.entries):
            if c != 0.0:
                out = out + float(c) * entry
        return out

    # -- numeric evaluation -------------------------------------------------

    def _env(self, z, y):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        y = np.asarray(y, dtype=float)
        if z.shape != (self.n_z,):
            raise ValueError(f"latent state must have length {self.n_z}")
        if y.shape != (len(self.y_vars),):
            raise ValueError(f"observation must have length {len(self.y_vars)}")
        env = {v: float(zi) for v, zi in zip(self.z_vars, z)}
        env.update({v: float(yi - y0i)
                    for v, yi, y0i in zip(self.y_vars, y, self.y0)})
        return env

    def eval_control(self, z, y) -> np.ndarray:
        env = self._env(z, y)
        return np.array([p.evaluate(env) for p in self.u_polys()])

    def eval_latent(self, z, y) -> np.ndarray:
        env = self._env(z, y)
        return np.array([p.evaluate(env) for p in self.l_polys()])


def controller_hash(ctrl: DynamicController) -> str:
    """sha256 over the canonical JSON serialization."""
    blob = json.dumps(controller_to_obj(ctrl), sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def controller_to_obj(ctrl: DynamicController) -> dict:
    return {
        "schema": CONTROLLER_SCHEMA,
        "version": CONTROLLER_SCHEMA_VERSION,
        "plant": {"name": ctrl.plant.name,
                  "fingerprint": ctrl.plant.fingerprint()},
        "n_z": ctrl.n_z,
        "d_k": ctrl.d_k,
        "d_l": ctrl.d_l,
        "shift_obs": ctrl.shift_obs,
        "y0": list(ctrl.y0),
        "theta_k": [list(row) for row in ctrl.theta_k],
        "theta_l": [list(row) for row in ctrl.theta_l],
    }


def controller_to_json(ctrl: DynamicController) -> str:
    return json.dumps(controller_to_obj(ctrl), indent=2, sort_keys=True)


def controller_from_obj(obj: dict, plant: PlantModel,
                        allow_mismatch: bool = False) -> DynamicController:
    if obj.get("schema") != CONTROLLER_SCHEMA:
        raise ValueError(f"not a controller object: {obj.get('schema')!r}")
    if obj.get("version") != CONTROLLER_SCHEMA_VERSION:
        raise ValueError(f"unsupported controller schema version "
                         f"{obj.get('version')!r}")
    fp = obj["plant"]["fingerprint"]
    if fp != plant.fingerprint() and not allow_mismatch:
        raise ValueError(
            f"controller was built for plant {obj['plant']['name']} "
            f"fingerprint {fp[:12]}..., which does not match this plant; "
            "pass allow_mismatch=True to load anyway")
    ctrl = DynamicController(plant, obj["n_z"], obj["d_k"], obj["d_l"],
                             shift_obs=obj["shift_obs"])
    tk = np.array(obj["theta_k"], dtype=float).reshape(ctrl.theta_k.shape)
    tl = np.array(obj["theta_l"], dtype=float).reshape(ctrl.theta_l.shape)
    ctrl.theta_k[...] = tk
    ctrl.theta_l[...] = tl
    ctrl.y0 = np.array(obj["y0"], dtype=float)
    return ctrl


def controller_from_json(text: str, plant: PlantModel,
                         allow_mismatch: bool = False) -> DynamicController:
    return controller_from_obj(json.loads(text), plant, allow_mismatch)


class AugmentedSystem:
    """Closed loop over the augmented state a = [x; z] (and noise w).

    rows[i] is the explicit polynomial for da_i/dt, or None where the plant
    defines that derivative implicitly; the implicit rows live in g_rows
    (mass(x) b = rhs with the closed-loop input substituted).
    """

    def __init__(self, plant: PlantModel, ctrl: DynamicController,
                 with_noise: bool = False):
        if ctrl.plant is not plant:
            raise ValueError("controller was built for a different plant")
        self.plant = plant
        self.ctrl = ctrl
        self.with_noise = bool(with_noise)
        reg = plant.reg
        self.a_vars = list(plant.state_vars) + list(ctrl.z_vars)
        self.w_vars = ([reg.var(f"w{i+1}") for i in range(plant.n_k)]
                       if with_noise else [])
        self.a0 = np.concatenate([plant.x0, np.zeros(ctrl.n_z)])

        # y_i -> h_k_i(x) - y0_i (+ w_i)
        subs = {}
        for i, yv in enumerate(ctrl.y_vars):
            expr = plant.h_k[i] - float(ctrl.y0[i])
            if with_noise:
                expr = expr + Polynomial.var(reg, self.w_vars[i])
            subs[yv] = expr
        self.u_polys = [p.substitute(subs) for p in ctrl.u_polys()]
        l_closed = [p.substitute(subs) for p in ctrl.l_polys()]

        n_x = plant.n_x
        self.rows: list[Polynomial | None] = [None] * (n_x + ctrl.n_z)
        if plant.form == "explicit":
            self.implicit_idx = []
            self.g_rows = []
            self.b_vars = []
            for i in range(n_x):
                row = plant.f1[i]
                for j in range(plant.n_u):
                    row = row + plant.f2[i][j] * self.u_polys[j]
                self.rows[i] = row
        else:
            self.implicit_idx = list(plant.implicit_idx)
            self.b_vars = list(plant.b_vars)
            for i, p in plant.kinematic.items():
                self.rows[i] = p
            k = len(plant.implicit_idx)
            self.g_rows = []
            for i in range(k):
                row = Polynomial.zero(reg)
                for j in range(k):
                    row = row + plant.mass[i][j] * Polynomial.var(
                        reg, plant.b_vars[j])
                row = row - plant.rhs1[i]
                for j in range(plant.n_u):
                    row = row - plant.rhs2[i][j] * self.u_polys[j]
                self.g_rows.append(row)
        for i in range(ctrl.n_z):
            self.rows[n_x + i] = l_closed[i]
        self.eq_residual = float(np.max(np.abs(self.adot(self.a0))))

    @property
    def n_a(self) -> int:
        return len(self.a_vars)

    def _env(self, a, w=None):
        a = np.asarray(a, dtype=float)
        env = {v: float(ai) for v, ai in zip(self.a_vars, a)}
        if self.with_noise:
            if w is None:
                w = np.zeros(len(self.w_vars))
            env.update({v: float(wi) for v, wi in zip(self.w_vars, w)})
        return env

    def eval_u(self, a, w=None) -> np.ndarray:
        env = self._env(a, w)
        return np.array([p.evaluate(env) for p in self.u_polys])

    def adot(self, a, w=None) -> np.ndarray:
        env = self._env(a, w)
        out = np.zeros(self.n_a)
        for i, row in enumerate(self.rows):
            if row is not None:
                out[i] = row.evaluate(env)
        if self.implicit_idx:
            plant = self.plant
            k = len(self.implicit_idx)
            M = np.array([[plant.mass[i][j].evaluate(env) for j in range(k)]
                          for i in range(k)])
            r = np.array([plant.rhs1[i].evaluate(env) for i in range(k)])
            u = self.eval_u(a, w)
            for i in range(k):
                for j in range(plant.n_u):
                    r[i] += plant.rhs2[i][j].evaluate(env) * u[j]
            acc = np.linalg.solve(M, r)
            for pos, i in enumerate(self.implicit_idx):
                out[i] = acc[pos]
        return out

    def augmented_g_rows(self):
        """Full implicit residual: plant g rows plus b_z - l for the latent
        states, over placeholders for every implicitly-defined derivative."""
        if not self.implicit_idx:
            raise ValueError("explicit closed loop has no implicit residual")
        reg = self.plant.reg
        rows = list(self.g_rows)
        bz = [reg.var(f"bz{i+1}") for i in range(self.ctrl.n_z)]
        n_x = self.plant.n_x
        for i, v in enumerate(bz):
            rows.append(Polynomial.var(reg, v) - self.rows[n_x + i])
        return rows, list(self.b_vars) + bz

    def degree_bound(self) -> int:
        """Structural bound on the degree of the explicit rows."""
        plant, ctrl = self.plant, self.ctrl
        h_deg = max((p.degree() for p in plant.h_k), default=1)
        if self.with_noise:
            h_deg = max(h_deg, 1)
        ctrl_deg = max(ctrl.d_k, ctrl.d_l) * max(1, h_deg)
        if plant.form == "explicit":
            f1d = max(p.degree() for p in plant.f1)
            f2d = max((p.degree() for row in plant.f2 for p in row), default=0)
            return max(f1d, f2d + ctrl.d_k * max(1, h_deg),
                       ctrl.d_l * max(1, h_deg))
        kin = max((p.degree() for p in plant.kinematic.values()), default=0)
        return max(kin, ctrl_deg)


def close_loop(plant: PlantModel, ctrl: DynamicController,
               with_noise: bool = False) -> AugmentedSystem:
    """Substitute the observation map and control law into the dynamics."""
    return AugmentedSystem(plant, ctrl, with_noise)
