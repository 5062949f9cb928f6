"""Controller representation and closed-loop assembly tests."""

import json
import math

import numpy as np
import pytest

from polycert.controller import (
    AugmentedSystem,
    DynamicController,
    close_loop,
    controller_from_json,
    controller_hash,
    controller_to_json,
)
from polycert.polynomial import Polynomial, VarRegistry
from polycert.systems import (
    PlantModel,
    build_cartpole,
    build_integrator,
    build_pendulum,
)


def scalar_unstable_plant():
    """xdot = x + u, observed through y = x."""
    reg = VarRegistry()
    x1 = reg.var("x1")
    u1 = reg.var("u1")
    Px = Polynomial.var(reg, x1)
    return PlantModel(
        name="scalar-unstable", reg=reg, state_vars=[x1], input_vars=[u1],
        form="explicit", f1=[Px], f2=[[Polynomial.const(reg, 1.0)]],
        constraints=[], norm_groups=[], input_box=None,
        h_k=[Px], x0=[0.0], u0=[0.0], lift=[("copy", 0)], params={})


def randomized_controller(plant, n_z, d_k, d_l, seed, scale=0.1,
                          shift_obs=True):
    ctrl = DynamicController(plant, n_z, d_k, d_l, shift_obs=shift_obs)
    rng = np.random.default_rng(seed)
    ctrl.theta_k[...] = scale * rng.standard_normal(ctrl.theta_k.shape)
    ctrl.theta_l[...] = scale * rng.standard_normal(ctrl.theta_l.shape)
    return ctrl


class TestEvaluation:
    def test_zero_parameters_zero_output(self):
        ctrl = DynamicController(build_pendulum(), 1, 2, 2)
        assert np.all(ctrl.eval_control([0.5], [1.0, 2.0]) == 0)
        assert np.all(ctrl.eval_latent([0.5], [1.0, 2.0]) == 0)

    def test_linear_law_by_hand(self):
        # u = 2 y1 - z over basis [1, z, y1]
        ctrl = DynamicController(build_integrator(), 1, 1, 1,
                                 shift_obs=False)
        ctrl.theta_k[0] = [0.0, -1.0, 2.0]
        u = ctrl.eval_control([1.0], [3.0])
        assert u[0] == pytest.approx(5.0)

    def test_matches_monomial_expansion_oracle(self):
        plant = build_pendulum()
        rng = np.random.default_rng(17)
        ctrl = randomized_controller(plant, 1, 2, 2, seed=17,
                                     shift_obs=False)
        for _ in range(20):
            z = rng.uniform(-1, 1, 1)
            y = rng.uniform(-1, 1, 2)
            point = np.concatenate([z, y])
            vals = np.array([np.prod(point ** np.array(e))
                             for e in ctrl.basis_k.exps])
            expected = ctrl.theta_k @ vals
            got = ctrl.eval_control(z, y)
            assert np.max(np.abs(got - expected)) < 1e-12

    def test_dimension_checks(self):
        ctrl = DynamicController(build_pendulum(), 1, 1, 1)
        with pytest.raises(ValueError, match="latent"):
            ctrl.eval_control([1.0, 2.0], [0.0, 0.0])
        with pytest.raises(ValueError, match="observation"):
            ctrl.eval_control([1.0], [0.0])


class TestCloseLoop:
    def test_zero_controller_reduces_to_open_loop(self):
        plant = build_pendulum()
        ctrl = DynamicController(plant, 1, 2, 2)
        loop = close_loop(plant, ctrl)
        rng = np.random.default_rng(23)
        for _ in range(10):
            phi = rng.uniform(-math.pi, math.pi)
            x = plant.lift_state([phi, rng.uniform(-2, 2)])
            a = np.concatenate([x, [rng.uniform(-1, 1)]])
            ad = loop.adot(a)
            assert np.allclose(ad[:3], plant.xdot(x, [0.0]), atol=1e-12)
            assert ad[3] == 0.0

    def test_scalar_loop_cancellation(self):
        # xdot = x + u, u = -2 y, y = x  =>  xdot = -x
        plant = scalar_unstable_plant()
        ctrl = DynamicController(plant, 0, 1, 0, shift_obs=False)
        ctrl.theta_k[0] = [0.0, -2.0]
        loop = close_loop(plant, ctrl)
        assert loop.n_a == 1
        for x in (-2.0, 0.3, 1.7):
            assert loop.adot([x])[0] == pytest.approx(-x)

    def test_composition_oracle(self):
        plant = build_pendulum()
        ctrl = randomized_controller(plant, 1, 2, 2, seed=31)
        loop = close_loop(plant, ctrl, with_noise=True)
        rng = np.random.default_rng(31)
        for _ in range(100):
            phi = rng.uniform(-math.pi, math.pi)
            x = plant.lift_state([phi, rng.uniform(-3, 3)])
            z = rng.uniform(-1, 1, 1)
            w = 0.003 * rng.uniform(-1, 1, 2)
            a = np.concatenate([x, z])
            y = plant.keypoints(x) + w
            u = ctrl.eval_control(z, y)
            expect = np.concatenate([plant.xdot(x, u),
                                     ctrl.eval_latent(z, y)])
            got = loop.adot(a, w)
            denom = max(1.0, float(np.max(np.abs(expect))))
            assert np.max(np.abs(got - expect)) / denom < 1e-10

    def test_affine_in_parameters(self):
        plant = build_pendulum()
        base = DynamicController(plant, 1, 2, 2)
        ca = randomized_controller(plant, 1, 2, 2, seed=5)
        cb = randomized_controller(plant, 1, 2, 2, seed=6)
        cab = DynamicController(plant, 1, 2, 2)
        cab.theta_k[...] = ca.theta_k + cb.theta_k
        cab.theta_l[...] = ca.theta_l + cb.theta_l
        rng = np.random.default_rng(7)
        for _ in range(10):
            phi = rng.uniform(-2, 2)
            x = plant.lift_state([phi, rng.uniform(-2, 2)])
            a = np.concatenate([x, rng.uniform(-1, 1, 1)])
            lhs = close_loop(plant, cab).adot(a)
            rhs = (close_loop(plant, ca).adot(a)
                   + close_loop(plant, cb).adot(a)
                   - close_loop(plant, base).adot(a))
            assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_degree_bookkeeping(self):
        plant = build_pendulum()
        ctrl = randomized_controller(plant, 1, 3, 3, seed=13)
        loop = close_loop(plant, ctrl)
        bound = loop.degree_bound()
        for row in loop.rows:
            assert row.degree() <= bound

    def test_equilibrium_preservation_reported(self):
        plant = build_pendulum()
        ctrl = DynamicController(plant, 1, 2, 2)
        assert close_loop(plant, ctrl).eq_residual == 0.0
        ctrl.theta_k[0, 0] = 0.5    # constant control term breaks it
        loop = close_loop(plant, ctrl)
        assert loop.eq_residual > 0.0

    def test_mismatched_plant_rejected(self):
        ctrl = DynamicController(build_pendulum(), 1, 1, 1)
        with pytest.raises(ValueError, match="different plant"):
            AugmentedSystem(build_pendulum(), ctrl)


class TestImplicitLoop:
    def test_zero_controller_matches_open_loop(self):
        plant = build_cartpole()
        ctrl = DynamicController(plant, 1, 2, 1)
        loop = close_loop(plant, ctrl)
        rng = np.random.default_rng(37)
        for _ in range(10):
            raw = [rng.uniform(-1, 1), rng.uniform(-2, 2),
                   rng.uniform(-1, 1), rng.uniform(-1, 1)]
            x = plant.lift_state(raw)
            a = np.concatenate([x, [0.0]])
            assert np.allclose(loop.adot(a)[:5], plant.xdot(x, [0.0]),
                               atol=1e-12)

    def test_residual_vanishes_on_true_derivative(self):
        plant = build_cartpole()
        ctrl = randomized_controller(plant, 1, 2, 1, seed=41)
        loop = close_loop(plant, ctrl)
        rng = np.random.default_rng(41)
        for _ in range(20):
            raw = [rng.uniform(-1, 1), rng.uniform(-2, 2),
                   rng.uniform(-1, 1), rng.uniform(-1, 1)]
            x = plant.lift_state(raw)
            a = np.concatenate([x, [rng.uniform(-0.5, 0.5)]])
            ad = loop.adot(a)
            env = {v: float(ai) for v, ai in zip(loop.a_vars, a)}
            env.update({v: float(bi)
                        for v, bi in zip(loop.b_vars, ad[3:5])})
            for row in loop.g_rows:
                assert abs(row.evaluate(env)) < 1e-8

    def test_augmented_residual_includes_latent_rows(self):
        plant = build_cartpole()
        ctrl = randomized_controller(plant, 1, 2, 1, seed=43)
        loop = close_loop(plant, ctrl)
        rows, b_all = loop.augmented_g_rows()
        assert len(rows) == 3     # two mass rows + one latent row
        assert len(b_all) == 3
        a = loop.a0
        ad = loop.adot(a)
        env = {v: float(ai) for v, ai in zip(loop.a_vars, a)}
        env.update({b_all[0]: ad[3], b_all[1]: ad[4], b_all[2]: ad[5]})
        for row in rows:
            assert abs(row.evaluate(env)) < 1e-10


class TestSerialization:
    def test_round_trip_identity(self):
        plant = build_pendulum()
        ctrl = randomized_controller(plant, 1, 2, 3, seed=47)
        text = controller_to_json(ctrl)
        back = controller_from_json(text, plant)
        assert np.array_equal(back.theta_k, ctrl.theta_k)
        assert np.array_equal(back.theta_l, ctrl.theta_l)
        assert np.array_equal(back.y0, ctrl.y0)
        assert back.d_k == ctrl.d_k and back.d_l == ctrl.d_l
        assert controller_to_json(back) == text

    def test_unknown_version_rejected(self):
        plant = build_pendulum()
        ctrl = DynamicController(plant, 1, 1, 1)
        obj = json.loads(controller_to_json(ctrl))
        obj["version"] = 99
        with pytest.raises(ValueError, match="version"):
            controller_from_json(json.dumps(obj), plant)

    def test_fingerprint_mismatch_rejected(self):
        plant = build_pendulum()
        other = build_pendulum(m=2.0)
        ctrl = DynamicController(plant, 1, 1, 1)
        text = controller_to_json(ctrl)
        with pytest.raises(ValueError, match="fingerprint"):
            controller_from_json(text, other)
        loaded = controller_from_json(text, other, allow_mismatch=True)
        assert loaded.n_z == 1

    def test_hash_stability_and_sensitivity(self):
        plant = build_pendulum()
        ctrl = randomized_controller(plant, 1, 2, 2, seed=53)
        h1 = controller_hash(ctrl)
        h2 = controller_hash(ctrl)
        assert h1 == h2
        ctrl.theta_k[0, 0] += 1e-9
        assert controller_hash(ctrl) != h1
