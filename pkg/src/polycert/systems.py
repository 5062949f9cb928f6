"""Benchmark plant library.

Each builder returns an immutable PlantModel: polynomial control-affine
dynamics (explicit f1 + f2 u, or an implicit mass-matrix form that avoids
rational terms), algebraic state constraints from trig/quaternion lifting,
input boxes, an equilibrium pair (x0, u0), and a polynomial keypoint
observation map.  Angles never appear as raw states; sin/cos pairs (s, c)
with s^2 + c^2 = 1, and unit quaternions with |q|^2 = 1, keep everything
polynomial.  The lift/unlift helpers convert between raw coordinates
(angles) and the constrained polynomial state.

Physical parameters not pinned down elsewhere default to the unit-order
values in system_defaults.json; pass explicit keyword values to override.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .polynomial import Polynomial, VarRegistry, Variable

_DEFAULTS = None


def load_defaults() -> dict:
    global _DEFAULTS
    if _DEFAULTS is None:
        text = resources.files("polycert").joinpath(
            "system_defaults.json").read_text()
        _DEFAULTS = json.loads(text)
    return _DEFAULTS


class ConstraintError(ValueError):
    """State violates the plant's algebraic constraints."""


def _require_positive(**params):
    for name, v in params.items():
        if not v > 0:
            raise ValueError(f"parameter {name} must be positive, got {v}")


@dataclass
class NoiseModel:
    """Bounded observation error |w|_2 <= wbar.

    mode "zero" returns no noise, "uniform-ball" draws uniformly from the
    wbar-ball with a seeded generator, "worst-case" scales a caller-supplied
    unit direction to the boundary.
    """

    wbar: float = 0.0
    mode: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.wbar < 0:
            raise ValueError("noise bound must be nonnegative")
        if self.mode not in ("zero", "uniform-ball", "worst-case"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        self._rng = np.random.default_rng(self.seed)

    def reset(self):
        """Restore the generator to its seeded initial state."""
        self._rng = np.random.default_rng(self.seed)

    def draw(self, dim: int, direction: np.ndarray | None = None) -> np.ndarray:
        if self.mode == "zero" or self.wbar == 0.0:
            return np.zeros(dim)
        if self.mode == "worst-case":
            if direction is None:
                raise ValueError("worst-case mode needs a direction")
            d = np.asarray(direction, dtype=float)
            nrm = float(np.linalg.norm(d))
            if nrm == 0.0:
                return np.zeros(dim)
            return (self.wbar / nrm) * d
        # uniform draw from the ball: normalized gaussian scaled by U^(1/dim)
        g = self._rng.standard_normal(dim)
        nrm = float(np.linalg.norm(g))
        if nrm == 0.0:
            return np.zeros(dim)
        radius = self.wbar * self._rng.uniform() ** (1.0 / dim)
        return (radius / nrm) * g


class PlantModel:
    """Immutable plant description; build through the module-level builders.

    Explicit form: xdot = f1(x) + f2(x) u.
    Implicit form: kinematic rows stay explicit while acceleration rows are
    defined by mass(x) b_acc = rhs1(x) + rhs2(x) u, with b placeholder
    variables standing in for the implicit derivatives.
    """

    def __init__(self, *, name, reg, state_vars, input_vars, form,
                 f1=None, f2=None,
                 kinematic=None, implicit_idx=None, mass=None,
                 rhs1=None, rhs2=None, b_vars=None,
                 constraints, norm_groups, input_box, h_k, x0, u0,
                 lift, params):
        self.name = name
        self.reg = reg
        self.state_vars = list(state_vars)
        self.input_vars = list(input_vars)
        self.form = form
        self.f1 = f1
        self.f2 = f2
        self.kinematic = kinematic
        self.implicit_idx = implicit_idx
        self.mass = mass
        self.rhs1 = rhs1
        self.rhs2 = rhs2
        self.b_vars = b_vars
        self.constraints = list(constraints)
        self.norm_groups = list(norm_groups)
        self.input_box = input_box
        self.h_k = list(h_k)
        self.x0 = np.asarray(x0, dtype=float)
        self.u0 = np.asarray(u0, dtype=float)
        self.lift = list(lift)
        self.params = dict(params)

    # -- dimensions ---------------------------------------------------------

    @property
    def n_x(self) -> int:
        return len(self.state_vars)

    @property
    def n_u(self) -> int:
        return len(self.input_vars)

    @property
    def n_k(self) -> int:
        return len(self.h_k)

    @property
    def raw_dim(self) -> int:
        return sum(1 if e[0] != "quat" else 3 for e in self.lift)

    # -- evaluation ---------------------------------------------------------

    def _assign(self, x, u=None, b=None):
        env = {v: float(xi) for v, xi in zip(self.state_vars, x)}
        if u is not None:
            env.update({v: float(ui) for v, ui in zip(self.input_vars, u)})
        if b is not None:
            env.update({v: float(bi) for v, bi in zip(self.b_vars, b)})
        return env

    def xdot(self, x, u) -> np.ndarray:
        """Numeric state derivative; implicit plants solve the mass system."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        env = self._assign(x, u)
        if self.form == "explicit":
            out = np.array([p.evaluate(env) for p in self.f1])
            for i, row in enumerate(self.f2):
                for j, p in enumerate(row):
                    out[i] += p.evaluate(env) * u[j]
            return out
        out = np.zeros(self.n_x)
        for i, p in self.kinematic.items():
            out[i] = p.evaluate(env)
        k = len(self.implicit_idx)
        M = np.array([[self.mass[i][j].evaluate(env) for j in range(k)]
                      for i in range(k)])
        r = np.array([self.rhs1[i].evaluate(env) for i in range(k)])
        for i in range(k):
            for j in range(self.n_u):
                r[i] += self.rhs2[i][j].evaluate(env) * u[j]
        acc = np.linalg.solve(M, r)
        for pos, i in enumerate(self.implicit_idx):
            out[i] = acc[pos]
        return out

    def g_rows(self) -> list[Polynomial]:
        """Implicit residual polynomials mass(x) b - rhs(x, u), zero iff
        b equals the implicit derivatives."""
        if self.form != "implicit":
            raise ValueError(f"{self.name} has no implicit form")
        rows = []
        k = len(self.implicit_idx)
        for i in range(k):
            row = Polynomial.zero(self.reg)
            for j in range(k):
                row = row + self.mass[i][j] * Polynomial.var(
                    self.reg, self.b_vars[j])
            row = row - self.rhs1[i]
            for j in range(self.n_u):
                row = row - self.rhs2[i][j] * Polynomial.var(
                    self.reg, self.input_vars[j])
            rows.append(row)
        return rows

    def keypoints(self, x) -> np.ndarray:
        env = self._assign(np.asarray(x, dtype=float))
        return np.array([p.evaluate(env) for p in self.h_k])

    def constraint_residual(self, x) -> float:
        env = self._assign(np.asarray(x, dtype=float))
        return max((abs(p.evaluate(env)) for p in self.constraints),
                   default=0.0)

    def check_state(self, x, tol: float = 1e-8):
        r = self.constraint_residual(x)
        if r > tol:
            raise ConstraintError(
                f"{self.name}: algebraic constraint residual {r:.3e} "
                f"exceeds {tol:.1e}")

    def project(self, x) -> np.ndarray:
        """Renormalize (s, c) pairs and quaternions onto their manifolds."""
        x = np.array(x, dtype=float)
        for kind, idxs in self.norm_groups:
            v = x[list(idxs)]
            nrm = float(np.linalg.norm(v))
            if nrm > 0:
                x[list(idxs)] = v / nrm
        return x

    def equilibrium_residual(self) -> float:
        if self.form == "explicit":
            return float(np.max(np.abs(self.xdot(self.x0, self.u0))))
        env = self._assign(self.x0, self.u0, np.zeros(len(self.b_vars)))
        res = [abs(g.evaluate(env)) for g in self.g_rows()]
        for i, p in self.kinematic.items():
            res.append(abs(p.evaluate(env)))
        return max(res)

    # -- raw-coordinate lifting --------------------------------------------

    def lift_state(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        x = np.zeros(self.n_x)
        r = 0
        for entry in self.lift:
            if entry[0] == "copy":
                x[entry[1]] = raw[r]
                r += 1
            elif entry[0] == "angle":
                _, si, ci = entry
                x[si] = math.sin(raw[r])
                x[ci] = math.cos(raw[r])
                r += 1
            elif entry[0] == "quat":
                _, qidx = entry
                x[list(qidx)] = _rpy_to_quat(raw[r], raw[r + 1], raw[r + 2])
                r += 3
            else:
                raise ValueError(entry[0])
        return x

    def unlift_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = []
        for entry in self.lift:
            if entry[0] == "copy":
                out.append(x[entry[1]])
            elif entry[0] == "angle":
                _, si, ci = entry
                out.append(math.atan2(x[si], x[ci]))
            elif entry[0] == "quat":
                _, qidx = entry
                out.extend(_quat_to_rpy(x[list(qidx)]))
        return np.array(out)

    # -- identity -----------------------------------------------------------

    def fingerprint(self) -> str:
        payload = {
            "name": self.name,
            "params": {k: self.params[k] for k in sorted(self.params)},
            "x0": list(self.x0),
            "u0": list(self.u0),
            "defaults_version": load_defaults()["version"],
        }
        blob = json.dumps(payload, sort_keys=True,
                          separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _rpy_to_quat(roll, pitch, yaw):
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    return np.array([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ])


def _quat_to_rpy(q):
    qw, qx, qy, qz = q
    roll = math.atan2(2 * (qw * qx + qy * qz), 1 - 2 * (qx * qx + qy * qy))
    pitch = math.asin(max(-1.0, min(1.0, 2 * (qw * qy - qz * qx))))
    yaw = math.atan2(2 * (qw * qz + qx * qy), 1 - 2 * (qy * qy + qz * qz))
    return roll, pitch, yaw


def observe(plant: PlantModel, x, noise: NoiseModel,
            direction: np.ndarray | None = None) -> np.ndarray:
    """Keypoint observation h_k(x) + w with |w|_2 <= wbar."""
    plant.check_state(x)
    return plant.keypoints(x) + noise.draw(plant.n_k, direction)


def circle_pairs(plant: PlantModel):
    """Split the algebraic constraints into circle identities and the rest.

    A circle identity is exactly s^2 + c^2 - 1 in two state variables.  Each
    one becomes a pair (drop_vid, keep_vid): squares of the dropped variable
    can be rewritten through the identity, so polynomial certificates can be
    matched on canonical representatives instead of carrying the identity as
    an explicit multiplier.  The dropped variable is the one sitting at zero
    in the equilibrium (the sine), which keeps representatives centered where
    the analysis happens.  Anything not of that shape is returned unparsed in
    the leftover list.
    """
    idx_of = {v: i for i, v in enumerate(plant.state_vars)}
    pairs, leftover = [], []
    for p in plant.constraints:
        sq: dict[int, float] = {}
        const = 0.0
        plain = True
        for m, cval in p.terms.items():
            if not m.pairs:
                const = cval
            elif len(m.pairs) == 1 and m.pairs[0][1] == 2:
                sq[m.pairs[0][0]] = cval
            else:
                plain = False
                break
        if (plain and len(sq) == 2 and abs(const + 1.0) <= 1e-12
                and all(abs(cv - 1.0) <= 1e-12 for cv in sq.values())):
            a, b = sorted(sq)
            xa = abs(float(plant.x0[idx_of[a]])) if a in idx_of else 1.0
            xb = abs(float(plant.x0[idx_of[b]])) if b in idx_of else 1.0
            pairs.append((a, b) if xa <= xb else (b, a))
        else:
            leftover.append(p)
    return pairs, leftover


# ---------------------------------------------------------------------------
# builders


def _merged(system: str, overrides: dict) -> dict:
    d = load_defaults()
    params = dict(d[system])
    params["g"] = d["gravity"]
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in params:
            raise ValueError(f"{system} has no parameter {k!r}")
        params[k] = float(v)
    return params


def build_pendulum(m=None, l=None, u_max=None, damping=None,
                   g=None) -> PlantModel:
    """Torque-limited pendulum about its upright equilibrium.

    State [s, c, phid] where (s, c) is the sine/cosine pair of the angular
    deviation from upright; gravity is destabilizing.  The single keypoint
    sits at the tip, [-l s, l c].
    """
    p = _merged("pendulum", dict(m=m, l=l, u_max=u_max, damping=damping, g=g))
    _require_positive(m=p["m"], l=p["l"], u_max=p["u_max"])
    if p["damping"] < 0:
        raise ValueError("damping must be nonnegative")
    reg = VarRegistry()
    s, c, phid = reg.vars("s", "c", "phid")
    u1 = reg.var("u1")
    ps, pc, pd = (Polynomial.var(reg, v) for v in (s, c, phid))
    ml2 = p["m"] * p["l"] ** 2
    f1 = [
        pc * pd,
        -1.0 * ps * pd,
        (p["g"] / p["l"]) * ps - (p["damping"] / ml2) * pd,
    ]
    zero = Polynomial.zero(reg)
    f2 = [[zero], [zero], [Polynomial.const(reg, 1.0 / ml2)]]
    return PlantModel(
        name="pendulum", reg=reg, state_vars=[s, c, phid], input_vars=[u1],
        form="explicit", f1=f1, f2=f2,
        constraints=[ps * ps + pc * pc - 1.0],
        norm_groups=[("circle", (0, 1))],
        input_box=[(-p["u_max"], p["u_max"])],
        h_k=[-p["l"] * ps, p["l"] * pc],
        x0=[0.0, 1.0, 0.0], u0=[0.0],
        lift=[("angle", 0, 1), ("copy", 2)],
        params=p)


def build_pendulum_implicit(m=None, l=None, u_max=None, damping=None,
                            g=None) -> PlantModel:
    """The same pendulum kept in implicit mass-matrix form.

    m l^2 phidd = m g l s - damping phid + u, with the sine/cosine rows as
    kinematics.  Exists so the explicit and implicit certification routes
    can be compared on identical physics.
    """
    p = _merged("pendulum", dict(m=m, l=l, u_max=u_max, damping=damping, g=g))
    _require_positive(m=p["m"], l=p["l"], u_max=p["u_max"])
    if p["damping"] < 0:
        raise ValueError("damping must be nonnegative")
    reg = VarRegistry()
    s, c, phid = reg.vars("s", "c", "phid")
    u1 = reg.var("u1")
    b3 = reg.var("b3")
    ps, pc, pd = (Polynomial.var(reg, v) for v in (s, c, phid))
    one = Polynomial.const(reg, 1.0)
    return PlantModel(
        name="pendulum_implicit", reg=reg, state_vars=[s, c, phid],
        input_vars=[u1], form="implicit",
        kinematic={0: pc * pd, 1: -1.0 * ps * pd}, implicit_idx=[2],
        mass=[[p["m"] * p["l"] ** 2 * one]],
        rhs1=[p["m"] * p["g"] * p["l"] * ps - p["damping"] * pd],
        rhs2=[[one]],
        b_vars=[b3],
        constraints=[ps * ps + pc * pc - 1.0],
        norm_groups=[("circle", (0, 1))],
        input_box=[(-p["u_max"], p["u_max"])],
        h_k=[-p["l"] * ps, p["l"] * pc],
        x0=[0.0, 1.0, 0.0], u0=[0.0],
        lift=[("angle", 0, 1), ("copy", 2)],
        params=p)


def build_cartpole(mc=None, mp=None, l=None, u_max=None, g=None) -> PlantModel:
    """Cart-pole in implicit mass-matrix form, upright equilibrium.

    State [px, s, c, pxd, phid]; the pole angle is measured from upright so
    the tip sits at (px - l s, l c).  Acceleration rows are kept as
    mass(x) b = rhs(x, u) to avoid the rational explicit form; xdot solves
    the 2x2 system numerically.
    """
    p = _merged("cartpole", dict(mc=mc, mp=mp, l=l, u_max=u_max, g=g))
    _require_positive(mc=p["mc"], mp=p["mp"], l=p["l"], u_max=p["u_max"])
    reg = VarRegistry()
    px, s, c, pxd, phid = reg.vars("px", "s", "c", "pxd", "phid")
    u1 = reg.var("u1")
    b4, b5 = reg.vars("b4", "b5")
    Ppx, Ps, Pc, Ppxd, Pphid = (Polynomial.var(reg, v)
                                for v in (px, s, c, pxd, phid))
    one = Polynomial.const(reg, 1.0)
    zero = Polynomial.zero(reg)
    mc_, mp_, l_, g_ = p["mc"], p["mp"], p["l"], p["g"]
    kinematic = {0: Ppxd, 1: Pc * Pphid, 2: -1.0 * Ps * Pphid}
    mass = [[(mc_ + mp_) * one, -mp_ * l_ * Pc],
            [-1.0 * Pc, l_ * one]]
    rhs1 = [-mp_ * l_ * Ps * Pphid * Pphid, g_ * Ps]
    rhs2 = [[one], [zero]]
    return PlantModel(
        name="cartpole", reg=reg,
        state_vars=[px, s, c, pxd, phid], input_vars=[u1],
        form="implicit", kinematic=kinematic, implicit_idx=[3, 4],
        mass=mass, rhs1=rhs1, rhs2=rhs2, b_vars=[b4, b5],
        constraints=[Ps * Ps + Pc * Pc - 1.0],
        norm_groups=[("circle", (1, 2))],
        input_box=[(-p["u_max"], p["u_max"])],
        h_k=[Ppx, zero, Ppx - l_ * Ps, l_ * Pc],
        x0=[0.0, 0.0, 1.0, 0.0, 0.0], u0=[0.0],
        lift=[("copy", 0), ("angle", 1, 2), ("copy", 3), ("copy", 4)],
        params=p)


def build_planar_quadrotor(m=None, l=None, inertia=None, g=None) -> PlantModel:
    """Planar quadrotor with two thrust inputs in [0, 2mg].

    State [px, py, s, c, pxd, pyd, phid]; hover at the origin with both
    rotors at mg/2.  Keypoints: body center and the right rotor tip.
    """
    p = _merged("planar_quadrotor", dict(m=m, l=l, inertia=inertia, g=g))
    _require_positive(m=p["m"], l=p["l"], inertia=p["inertia"])
    reg = VarRegistry()
    sv = reg.vars("px", "py", "s", "c", "pxd", "pyd", "phid")
    px, py, s, c, pxd, pyd, phid = sv
    u1, u2 = reg.vars("u1", "u2")
    Ppx, Ppy, Ps, Pc, Ppxd, Ppyd, Pphid = (Polynomial.var(reg, v) for v in sv)
    zero = Polynomial.zero(reg)
    m_, l_, I_, g_ = p["m"], p["l"], p["inertia"], p["g"]
    f1 = [Ppxd, Ppyd, Pc * Pphid, -1.0 * Ps * Pphid,
          zero, Polynomial.const(reg, -g_), zero]
    sn = (-1.0 / m_) * Ps
    cn = (1.0 / m_) * Pc
    f2 = [[zero, zero], [zero, zero], [zero, zero], [zero, zero],
          [sn, sn], [cn, cn],
          [Polynomial.const(reg, l_ / I_), Polynomial.const(reg, -l_ / I_)]]
    hover = m_ * g_ / 2.0
    return PlantModel(
        name="planar_quadrotor", reg=reg, state_vars=sv,
        input_vars=[u1, u2], form="explicit", f1=f1, f2=f2,
        constraints=[Ps * Ps + Pc * Pc - 1.0],
        norm_groups=[("circle", (2, 3))],
        input_box=[(0.0, 2.0 * m_ * g_), (0.0, 2.0 * m_ * g_)],
        h_k=[Ppx, Ppy, Ppx + l_ * Pc, Ppy + l_ * Ps],
        x0=[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        u0=[hover, hover],
        lift=[("copy", 0), ("copy", 1), ("angle", 2, 3),
              ("copy", 4), ("copy", 5), ("copy", 6)],
        params=p)


def _rotation_columns(q):
    """Columns of the rotation matrix as homogeneous quadratics in q."""
    qw, qx, qy, qz = q
    col0 = [qw * qw + qx * qx - qy * qy - qz * qz,
            2.0 * (qx * qy + qw * qz),
            2.0 * (qx * qz - qw * qy)]
    col1 = [2.0 * (qx * qy - qw * qz),
            qw * qw - qx * qx + qy * qy - qz * qz,
            2.0 * (qy * qz + qw * qx)]
    col2 = [2.0 * (qx * qz + qw * qy),
            2.0 * (qy * qz - qw * qx),
            qw * qw - qx * qx - qy * qy + qz * qz]
    return col0, col1, col2


def build_quadrotor3d(m=None, l=None, ixx=None, iyy=None, izz=None,
                      kappa=None, u_max_scale=None, g=None) -> PlantModel:
    """Quaternion-parameterized 3D quadrotor, '+' rotor layout.

    State [qw, qx, qy, qz, px, py, pz, pxd, pyd, pzd, wx, wy, wz] with the
    unit-quaternion constraint |q|^2 = 1.  Rotors sit on the +x, +y, -x,
    -y arms; each input is a thrust in [0, u_max_scale * mg / 4].
    Keypoints: the world positions of the first three rotors (quadratic in
    q, linear in p).
    """
    p = _merged("quadrotor3d", dict(m=m, l=l, ixx=ixx, iyy=iyy, izz=izz,
                                    kappa=kappa, u_max_scale=u_max_scale,
                                    g=g))
    _require_positive(m=p["m"], l=p["l"], ixx=p["ixx"], iyy=p["iyy"],
                      izz=p["izz"], kappa=p["kappa"],
                      u_max_scale=p["u_max_scale"])
    reg = VarRegistry()
    names = ["qw", "qx", "qy", "qz", "px", "py", "pz",
             "pxd", "pyd", "pzd", "wx", "wy", "wz"]
    sv = reg.vars(*names)
    uv = reg.vars("u1", "u2", "u3", "u4")
    P = {n: Polynomial.var(reg, v) for n, v in zip(names, sv)}
    zero = Polynomial.zero(reg)
    m_, l_, g_, kap = p["m"], p["l"], p["g"], p["kappa"]
    ixx_, iyy_, izz_ = p["ixx"], p["iyy"], p["izz"]
    q = (P["qw"], P["qx"], P["qy"], P["qz"])
    w = (P["wx"], P["wy"], P["wz"])
    # quaternion kinematics qdot = (1/2) q * [0, w]
    f1 = [
        -0.5 * (q[1] * w[0] + q[2] * w[1] + q[3] * w[2]),
        0.5 * (q[0] * w[0] + q[2] * w[2] - q[3] * w[1]),
        0.5 * (q[0] * w[1] + q[3] * w[0] - q[1] * w[2]),
        0.5 * (q[0] * w[2] + q[1] * w[1] - q[2] * w[0]),
        P["pxd"], P["pyd"], P["pzd"],
        zero, zero, Polynomial.const(reg, -g_),
        ((iyy_ - izz_) / ixx_) * w[1] * w[2],
        ((izz_ - ixx_) / iyy_) * w[2] * w[0],
        ((ixx_ - iyy_) / izz_) * w[0] * w[1],
    ]
    _, _, col2 = _rotation_columns(q)
    thrust_rows = [(1.0 / m_) * col2[0], (1.0 / m_) * col2[1],
                   (1.0 / m_) * col2[2]]
    f2 = [[zero] * 4 for _ in range(13)]
    for r in range(3):
        for j in range(4):
            f2[7 + r][j] = thrust_rows[r]
    # torques for rotors on +x, +y, -x, -y arms with alternating drag sign
    f2[10][1] = Polynomial.const(reg, l_ / ixx_)
    f2[10][3] = Polynomial.const(reg, -l_ / ixx_)
    f2[11][0] = Polynomial.const(reg, -l_ / iyy_)
    f2[11][2] = Polynomial.const(reg, l_ / iyy_)
    for j, sgn in enumerate((1.0, -1.0, 1.0, -1.0)):
        f2[12][j] = Polynomial.const(reg, sgn * kap / izz_)
    # keypoints: world positions of rotors 1..3
    offsets = [np.array([l_, 0.0, 0.0]), np.array([0.0, l_, 0.0]),
               np.array([-l_, 0.0, 0.0])]
    cols = _rotation_columns(q)
    pos = (P["px"], P["py"], P["pz"])
    h_k = []
    for off in offsets:
        for r in range(3):
            expr = pos[r]
            for cidx in range(3):
                if off[cidx]:
                    expr = expr + float(off[cidx]) * cols[cidx][r]
            h_k.append(expr)
    hover = m_ * g_ / 4.0
    umax = p["u_max_scale"] * m_ * g_ / 4.0
    x0 = np.zeros(13)
    x0[0] = 1.0
    qsq = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]
    return PlantModel(
        name="quadrotor3d", reg=reg, state_vars=sv, input_vars=uv,
        form="explicit", f1=f1, f2=f2,
        constraints=[qsq - 1.0],
        norm_groups=[("sphere", (0, 1, 2, 3))],
        input_box=[(0.0, umax)] * 4,
        h_k=h_k, x0=x0, u0=[hover] * 4,
        lift=([("quat", (0, 1, 2, 3))]
              + [("copy", i) for i in range(4, 13)]),
        params=p)


def build_integrator() -> PlantModel:
    """Single integrator xdot = u observed through the keypoint y = x.

    A minimal fixture for exercising certification and noise propagation
    end to end on a system whose behavior is checkable by hand.
    """
    reg = VarRegistry()
    x1 = reg.var("x1")
    u1 = reg.var("u1")
    Px = Polynomial.var(reg, x1)
    one = Polynomial.const(reg, 1.0)
    return PlantModel(
        name="integrator", reg=reg, state_vars=[x1], input_vars=[u1],
        form="explicit", f1=[Polynomial.zero(reg)], f2=[[one]],
        constraints=[], norm_groups=[], input_box=None,
        h_k=[Px], x0=[0.0], u0=[0.0],
        lift=[("copy", 0)], params={})


BUILDERS = {
    "pendulum": build_pendulum,
    "pendulum_implicit": build_pendulum_implicit,
    "cartpole": build_cartpole,
    "planar_quadrotor": build_planar_quadrotor,
    "quadrotor3d": build_quadrotor3d,
    "integrator": build_integrator,
}

# variants that share another system's parameter defaults
DEFAULTS_KEY = {"pendulum_implicit": "pendulum"}


def build(name: str, **overrides) -> PlantModel:
    """Builder lookup by system name with parameter overrides."""
    if name not in BUILDERS:
        raise ValueError(
            f"unknown system {name!r}; choose from {sorted(BUILDERS)}")
    valid = set(load_defaults().get(DEFAULTS_KEY.get(name, name), {}))
    if valid:
        valid |= {"g"}
    for k in overrides:
        if k not in valid:
            raise ValueError(f"{name} has no parameter {k!r}")
    return BUILDERS[name](**overrides)
