"""Trajectory-training module: rollout integrators against closed forms,
hand-derived loss arithmetic, finite-difference gradient agreement, and
optimizer bookkeeping (determinism, checkpoints, divergence handling)."""

import numpy as np
import pytest

from polycert.controller import DynamicController, close_loop
from polycert.polynomial import Polynomial
from polycert.systems import (
    NoiseModel, PlantModel, VarRegistry, build_cartpole, build_integrator,
    build_pendulum, build_planar_quadrotor,
)
from polycert.synth_gd import (
    LOSS_CAP, GdConfig, GdError, RolloutEngine, Trajectory, grad, hard_clamp,
    loss, rollout, sample_ics, soft_clamp, train, write_training_log,
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


def proportional_loop(plant, gain, n_z=0):
    """Static output feedback u = gain * y as a degree-1 controller."""
    ctrl = DynamicController(plant, n_z, 1, 1, shift_obs=False)
    ctrl.theta_k[0, 1 + n_z] = gain     # basis [1, z..., y1, ...]
    return close_loop(plant, ctrl)


class TestIntegrators:
    def test_euler_matches_linear_closed_form(self):
        # u = -y on the integrator gives xdot = -x; Euler applies the
        # factor (1 - dt) once per step.
        aug = proportional_loop(build_integrator(), -1.0)
        cfg = GdConfig(horizon=10, dt=0.1, integrator="euler")
        tr = rollout(aug, [1.0], [], cfg)
        want = 1.0
        for _ in range(10):
            want = want + 0.1 * (-want)
        assert tr.states[-1, 0] == pytest.approx(want, abs=1e-12)
        assert not tr.diverged
        assert len(tr) == 10
        assert tr.inputs.shape == (10, 1)

    def test_rk4_matches_linear_series(self):
        # For xdot = c x, one RK4 step multiplies by the degree-4 Taylor
        # polynomial of exp(c dt), control recomputed at every stage.
        aug = proportional_loop(build_integrator(), -1.0)
        cfg = GdConfig(horizon=10, dt=0.1, integrator="rk4")
        tr = rollout(aug, [1.0], [], cfg)
        h = 0.1
        fac = 1.0 - h + h**2 / 2 - h**3 / 6 + h**4 / 24
        assert tr.states[-1, 0] == pytest.approx(fac**10, abs=1e-12)

    def test_rk4_energy_conservation_undamped_pendulum(self):
        # Zero input, zero damping: E = m l^2 phid^2 / 2 + m g l c is a
        # first integral, so any drift is pure integrator error.
        plant = build_pendulum(damping=0.0)
        ctrl = DynamicController(plant, 1, 2, 2)
        aug = close_loop(plant, ctrl)
        x0 = plant.lift_state([2.0, 0.5])
        cfg = GdConfig(horizon=1000, dt=1e-3, integrator="rk4")
        tr = rollout(aug, x0, [0.0], cfg)
        m, l, g = (plant.params[k] for k in ("m", "l", "g"))

        def energy(state):
            return 0.5 * m * l**2 * state[2] ** 2 + m * g * l * state[1]

        assert abs(energy(tr.states[-1]) - energy(tr.states[0])) < 1e-5

    def test_rk4_beats_euler_on_smooth_flow(self):
        aug = proportional_loop(build_integrator(), -1.0)
        exact = np.exp(-1.0)
        errs = {}
        for name in ("euler", "rk4"):
            cfg = GdConfig(horizon=10, dt=0.1, integrator=name)
            tr = rollout(aug, [1.0], [], cfg)
            errs[name] = abs(tr.states[-1, 0] - exact)
        assert errs["rk4"] < 1e-6 < errs["euler"]


class TestLossArithmetic:
    def test_constant_trajectory_loss_by_hand(self):
        # Zero controller on the integrator holds x = 1; with unit state
        # weight, zero input weight, zero terminal weight and T = 5 the
        # running sum has four unit terms (t = 1..4).
        plant = build_integrator()
        ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
        aug = close_loop(plant, ctrl)
        cfg = GdConfig(horizon=5, dt=0.1, alpha_a=1.0, alpha_u=0.0,
                       beta_t=0.0)
        eng = RolloutEngine(aug)
        theta = np.zeros(eng.n_params)
        assert eng.training_loss(theta, [[1.0]], None, cfg) == 4.0
        tr = rollout(aug, [1.0], [], cfg)
        assert loss([tr], cfg) == 4.0

    def test_loss_zero_at_goal(self):
        plant = build_integrator()
        ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
        aug = close_loop(plant, ctrl)
        cfg = GdConfig(horizon=5, dt=0.1)
        tr = rollout(aug, [0.0], [], cfg)
        assert loss([tr], cfg) == 0.0

    def test_terminal_weight_default_is_ten_alpha(self):
        assert GdConfig(alpha_a=0.3).terminal_weight == pytest.approx(3.0)
        assert GdConfig(alpha_a=0.3, beta_t=7.0).terminal_weight == 7.0

    def test_batched_loss_is_mean_of_singles(self):
        plant = build_pendulum()
        ctrl = DynamicController(plant, 1, 2, 2)
        aug = close_loop(plant, ctrl)
        eng = RolloutEngine(aug)
        rng = np.random.default_rng(3)
        theta = 0.05 * rng.standard_normal(eng.n_params)
        cfg = GdConfig(horizon=12, dt=0.05)
        ics = np.array([plant.lift_state(r)
                        for r in rng.uniform(-0.4, 0.4, size=(4, 2))])
        whole = eng.training_loss(theta, ics, None, cfg)
        singles = [eng.training_loss(theta, ics[i:i + 1], None, cfg)
                   for i in range(4)]
        assert whole == pytest.approx(np.mean(singles), rel=1e-12)

    def test_empty_batch_rejected(self):
        cfg = GdConfig()
        with pytest.raises(ValueError):
            loss([], cfg)


def fd_gradient(eng, theta, ics, cfg, w_seq=None, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy(); tp[i] += h
        tm = theta.copy(); tm[i] -= h
        lp = eng.training_loss(tp, ics, None, cfg, w_seq)
        lm = eng.training_loss(tm, ics, None, cfg, w_seq)
        g[i] = (lp - lm) / (2 * h)
    return g


def relative_gap(ga, gb):
    return np.max(np.abs(ga - gb)) / max(np.max(np.abs(gb)), 1e-12)


class TestGradientExactness:
    def check_system(self, plant, seed, raw_halfwidth=0.1, n_theta=2):
        ctrl = DynamicController(plant, 1, 2, 2)
        aug = close_loop(plant, ctrl)
        eng = RolloutEngine(aug)
        cfg = GdConfig(horizon=15, dt=0.05, alpha_a=1.0, alpha_u=1e-2,
                       n_samp=3)
        rng = np.random.default_rng(seed)
        raws = rng.uniform(-raw_halfwidth, raw_halfwidth,
                           size=(3, plant.raw_dim))
        raw0 = plant.unlift_state(plant.x0)
        ics = np.array([plant.lift_state(raw0 + r) for r in raws])
        for _ in range(n_theta):
            theta = 0.05 * rng.standard_normal(eng.n_params)
            _, g = eng.loss_and_grad(theta, ics, None, cfg)
            gfd = fd_gradient(eng, theta, ics, cfg)
            assert relative_gap(g, gfd) < 1e-5

    def test_pendulum_gradient_matches_fd(self):
        self.check_system(build_pendulum(), seed=11)

    def test_cartpole_gradient_matches_fd(self):
        # Implicit-form plant: exercises the mass-matrix derivative path.
        self.check_system(build_cartpole(), seed=12)

    def test_planar_quadrotor_gradient_matches_fd(self):
        self.check_system(build_planar_quadrotor(), seed=13)

    def test_gradient_with_observation_noise(self):
        plant = build_pendulum()
        ctrl = DynamicController(plant, 1, 2, 2)
        aug = close_loop(plant, ctrl)
        eng = RolloutEngine(aug)
        cfg = GdConfig(horizon=10, dt=0.05, n_samp=2)
        rng = np.random.default_rng(21)
        ics = np.array([plant.lift_state(r)
                        for r in rng.uniform(-0.3, 0.3, size=(2, 2))])
        w_seq = 0.01 * rng.standard_normal((10, 2, plant.n_k))
        theta = 0.05 * rng.standard_normal(eng.n_params)
        _, g = eng.loss_and_grad(theta, ics, None, cfg, w_seq)
        gfd = fd_gradient(eng, theta, ics, cfg, w_seq)
        assert relative_gap(g, gfd) < 1e-5

    def test_stationary_point_has_zero_gradient(self):
        # T = 1 makes the loss a plain least-squares objective in theta;
        # its normal-equation solution must be a stationary point.
        plant = build_integrator()
        ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
        aug = close_loop(plant, ctrl)
        eng = RolloutEngine(aug)
        dt = 0.1
        cfg = GdConfig(horizon=1, dt=dt, alpha_u=0.0, beta_t=1.0)
        xs = np.array([0.5, 1.0, -0.7])
        A = np.column_stack([dt * np.ones(3), dt * xs])
        theta_star, *_ = np.linalg.lstsq(A, -xs, rcond=None)
        g = grad(aug, theta_star, xs[:, None], cfg)
        assert np.linalg.norm(g) < 1e-8

    def test_control_weight_scales_its_gradient_term(self):
        plant = build_pendulum()
        ctrl = DynamicController(plant, 1, 2, 2)
        aug = close_loop(plant, ctrl)
        eng = RolloutEngine(aug)
        rng = np.random.default_rng(5)
        theta = 0.05 * rng.standard_normal(eng.n_params)
        ics = np.array([plant.lift_state(r)
                        for r in rng.uniform(-0.3, 0.3, size=(2, 2))])
        base = GdConfig(horizon=10, dt=0.05, alpha_a=0.0, alpha_u=1e-2,
                        beta_t=0.0)
        twice = GdConfig(horizon=10, dt=0.05, alpha_a=0.0, alpha_u=2e-2,
                         beta_t=0.0)
        _, g1 = eng.loss_and_grad(theta, ics, None, base)
        _, g2 = eng.loss_and_grad(theta, ics, None, twice)
        assert np.allclose(g2, 2.0 * g1, rtol=1e-12, atol=1e-15)


class TestClamp:
    def test_soft_clamp_exact_outside_layer(self):
        v = np.array([-3.0, -1.5, 0.0, 1.5, 3.0])
        out, der = soft_clamp(v, -1.0, 1.0, 0.2)
        assert out[0] == -1.0 and out[-1] == 1.0
        assert out[2] == 0.0 and der[2] == 1.0
        assert der[0] == 0.0 and der[-1] == 0.0

    def test_soft_clamp_peak_deviation_kappa_over_four(self):
        kappa = 0.4
        grid = np.linspace(-3, 3, 20001)
        out, _ = soft_clamp(grid, -1.0, 1.0, kappa)
        dev = np.abs(out - hard_clamp(grid, -1.0, 1.0))
        assert np.max(dev) <= kappa / 4 + 1e-12
        at_bound, _ = soft_clamp(np.array([1.0]), -1.0, 1.0, kappa)
        assert at_bound[0] == pytest.approx(1.0 - kappa / 4)

    def test_soft_clamp_c1_at_seams(self):
        kappa, eps = 0.3, 1e-7
        for seam in (1.0 - kappa, 1.0 + kappa, -1.0 + kappa, -1.0 - kappa):
            lo, hi = soft_clamp(np.array([seam - eps, seam + eps]),
                                -1.0, 1.0, kappa)[0]
            assert abs(hi - lo) < 1e-6
            dlo, dhi = soft_clamp(np.array([seam - eps, seam + eps]),
                                  -1.0, 1.0, kappa)[1]
            assert abs(dhi - dlo) < 1e-5

    def test_eval_rollout_respects_hard_box(self):
        plant = build_pendulum()
        ctrl = DynamicController(plant, 1, 1, 1)
        ctrl.theta_k[0, :] = 100.0
        aug = close_loop(plant, ctrl)
        cfg = GdConfig(horizon=50, dt=0.01)
        tr = rollout(aug, plant.lift_state([1.0, 0.0]), [0.0], cfg)
        lo, hi = plant.input_box[0]
        assert np.all(tr.inputs >= lo - 1e-12)
        assert np.all(tr.inputs <= hi + 1e-12)
        assert np.max(np.abs(tr.inputs)) == pytest.approx(hi)


class TestDivergenceHandling:
    def test_unstable_loop_capped_and_gradient_free(self):
        plant = scalar_unstable_plant()
        aug = proportional_loop(plant, 10.0)   # xdot = 11 x
        eng = RolloutEngine(aug)
        cfg = GdConfig(horizon=60, dt=0.5, blowup=1e3)
        theta = np.zeros(eng.n_params)
        theta[1] = 10.0
        lossv, g = eng.loss_and_grad(theta, [[1.0]], None, cfg)
        assert lossv == LOSS_CAP
        assert np.all(g == 0.0)

    def test_diverged_rollout_truncated_and_flagged(self):
        plant = scalar_unstable_plant()
        aug = proportional_loop(plant, 10.0)
        cfg = GdConfig(horizon=60, dt=0.5, blowup=1e3, integrator="euler")
        tr = rollout(aug, [1.0], [], cfg)
        assert tr.diverged
        assert len(tr) < 60
        assert loss([tr], cfg) == LOSS_CAP


class TestTraining:
    def scalar_cfg(self, **kw):
        base = dict(horizon=20, dt=0.1, n_samp=8, iterations=80, lr=0.2,
                    decay=0.98, alpha_u=1e-3, seed=7, ic_box=[(-1.0, 1.0)],
                    integrator="euler")
        base.update(kw)
        return GdConfig(**base)

    def test_training_stabilizes_unstable_scalar(self):
        plant = scalar_unstable_plant()
        ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
        aug = close_loop(plant, ctrl)
        res = train(aug, self.scalar_cfg())
        initial = res.history[0][1]
        assert not res.diverged
        assert res.best_loss < initial / 10
        # the destabilizing unit pole needs gain below -1 to flip sign
        assert aug.ctrl.theta_k[0, 1] < -1.0

    def test_training_history_is_seed_deterministic(self, tmp_path):
        plant = scalar_unstable_plant()

        def run(seed):
            ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
            aug = close_loop(plant, ctrl)
            return train(aug, self.scalar_cfg(iterations=15, seed=seed))

        a, b = run(7), run(7)
        assert a.history == b.history
        assert np.array_equal(a.theta, b.theta)
        c = run(8)
        assert a.history != c.history

    def test_checkpoint_resume_bitwise_identical(self, tmp_path):
        plant = scalar_unstable_plant()

        def fresh():
            ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
            return close_loop(plant, ctrl)

        full = train(fresh(), self.scalar_cfg(iterations=12))
        ck = tmp_path / "gd.ckpt.json"
        train(fresh(), self.scalar_cfg(iterations=6), checkpoint_path=ck)
        resumed = train(fresh(), self.scalar_cfg(iterations=12),
                        resume_from=ck)
        assert resumed.history == full.history
        assert np.array_equal(resumed.theta, full.theta)
        assert resumed.best_loss == full.best_loss

    def test_checkpoint_config_mismatch_rejected(self, tmp_path):
        plant = scalar_unstable_plant()
        ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
        aug = close_loop(plant, ctrl)
        ck = tmp_path / "gd.ckpt.json"
        train(aug, self.scalar_cfg(iterations=6), checkpoint_path=ck)
        with pytest.raises(ValueError, match="different config"):
            train(aug, self.scalar_cfg(iterations=12, dt=0.2),
                  resume_from=ck)

    def test_resume_with_resampling_rejected(self, tmp_path):
        plant = scalar_unstable_plant()
        ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
        aug = close_loop(plant, ctrl)
        ck = tmp_path / "gd.ckpt.json"
        train(aug, self.scalar_cfg(iterations=6), checkpoint_path=ck)
        with pytest.raises(ValueError, match="resampling"):
            train(aug, self.scalar_cfg(iterations=12, resample_every=3),
                  resume_from=ck)

    def test_training_log_round_trip(self, tmp_path):
        path = tmp_path / "log.csv"
        history = [(0, 1.5, 0.25), (1, 1.25, 0.125)]
        write_training_log(path, history)
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,loss,grad_norm"
        assert lines[1] == "0,1.5,0.25"

    def test_best_parameters_written_back(self):
        plant = scalar_unstable_plant()
        ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
        aug = close_loop(plant, ctrl)
        res = train(aug, self.scalar_cfg(iterations=10))
        packed = np.concatenate([aug.ctrl.theta_k.ravel(),
                                 aug.ctrl.theta_l.ravel()])
        assert np.array_equal(packed, res.theta)


class TestSampling:
    def test_box_sampling_lands_on_manifold(self):
        plant = build_pendulum()
        cfg = GdConfig(n_samp=25, ic_box=[(-0.5, 0.5), (-1.0, 1.0)])
        ics = sample_ics(plant, cfg, np.random.default_rng(0))
        assert ics.shape == (25, 3)
        circle = ics[:, 0] ** 2 + ics[:, 1] ** 2
        assert np.allclose(circle, 1.0, atol=1e-12)

    def test_box_dimension_validated(self):
        plant = build_pendulum()
        cfg = GdConfig(ic_box=[(-0.5, 0.5)])
        with pytest.raises(ValueError, match="coordinate ranges"):
            sample_ics(plant, cfg, np.random.default_rng(0))

    def test_levelset_sampling_respects_sublevel(self):
        plant = build_integrator()
        x = Polynomial.var(plant.reg, plant.state_vars[0])
        V = x * x
        cfg = GdConfig(n_samp=40,
                       ic_levelset=(V, 0.25, [(-2.0, 2.0)]))
        ics = sample_ics(plant, cfg, np.random.default_rng(1))
        assert ics.shape == (40, 1)
        assert np.all(np.abs(ics[:, 0]) <= 0.5 + 1e-12)

    def test_engine_rejects_wrong_parameter_count(self):
        plant = build_integrator()
        ctrl = DynamicController(plant, 0, 1, 1, shift_obs=False)
        eng = RolloutEngine(close_loop(plant, ctrl))
        with pytest.raises(ValueError, match="parameters"):
            eng.split(np.zeros(eng.n_params + 1))


class TestNoiseRollout:
    def test_zero_noise_matches_noiseless(self):
        plant = build_pendulum()
        ctrl = DynamicController(plant, 1, 2, 2)
        ctrl.theta_k[0, :] = 0.05
        aug = close_loop(plant, ctrl)
        cfg = GdConfig(horizon=30, dt=0.01)
        x0 = plant.lift_state([0.5, 0.0])
        quiet = rollout(aug, x0, [0.0], cfg,
                        NoiseModel(wbar=0.0, mode="zero"))
        plain = rollout(aug, x0, [0.0], cfg)
        assert np.array_equal(quiet.states, plain.states)

    def test_bounded_noise_perturbs_but_stays_finite(self):
        plant = build_pendulum()
        ctrl = DynamicController(plant, 1, 2, 2)
        ctrl.theta_k[0, :] = 0.05
        aug = close_loop(plant, ctrl)
        cfg = GdConfig(horizon=30, dt=0.01)
        x0 = plant.lift_state([0.5, 0.0])
        noisy = rollout(aug, x0, [0.0], cfg,
                        NoiseModel(wbar=0.01, mode="uniform-ball", seed=4))
        plain = rollout(aug, x0, [0.0], cfg)
        assert not noisy.diverged
        assert not np.array_equal(noisy.states, plain.states)
