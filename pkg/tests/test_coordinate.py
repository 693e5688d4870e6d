import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drsmooth.batch import stack_batch
from drsmooth.coordinate import (DrsConfig, DrsIterate, drs_fixed_interval,
                                 o_step, objective, soft_threshold, x_step)
from drsmooth.errors import GeneralizedModelError
from drsmooth.kalman import fixed_interval_ks
from drsmooth.lambda_select import lambda_bounds
from drsmooth.model import ObservationBatch, StateSpaceModel, dwna_model
from drsmooth.objective import quadratic_objective

from conftest import rand_instance, scalar_model


class TestSoftThreshold:
    def test_basic_values(self):
        assert soft_threshold(2.0, 0.5) == 1.5
        assert soft_threshold(-0.3, 0.5) == 0.0
        assert soft_threshold(-2.0, 0.5) == -1.5

    @given(st.floats(-1e6, 1e6, allow_nan=False))
    def test_zero_penalty_is_identity(self, g):
        assert soft_threshold(g, 0.0) == g

    @given(st.floats(-1e6, 1e6), st.floats(0, 1e6))
    @settings(deadline=None)
    def test_shrinkage_properties(self, g, lam):
        v = soft_threshold(g, lam)
        assert abs(v) <= max(abs(g) - lam, 0.0) + 1e-12
        if abs(g) <= lam:
            assert v == 0.0
        else:
            assert np.sign(v) == np.sign(g)


class TestObjective:
    def test_zero_residual_case(self):
        m = StateSpaceModel(Dx=1, Dy=1, F=[[1.0]], H=[[1.0]], Q=[[1.0]],
                            R=[[1.0]], m0=[2.0], Sigma0=[[1.0]])
        N = 4
        x = np.full((N + 1, 1), 2.0)
        y = np.full((N, 1), 2.0)
        ox = np.zeros((N, 1))
        oy = np.zeros((N, 1))
        val = objective(m, ObservationBatch(y), x, ox, oy, 1.0, 1.0)
        assert val == 0.0

    def test_single_entry_perturbation(self):
        m = scalar_model()
        obs = ObservationBatch(np.array([[1.0], [0.5]]))
        x = np.zeros((3, 1))
        ox = np.zeros((2, 1))
        oy = np.zeros((2, 1))
        base = objective(m, obs, x, ox, oy, 0.7, 0.9)
        c = 0.3
        oy2 = oy.copy()
        oy2[1, 0] = c
        val = objective(m, obs, x, ox, oy2, 0.7, 0.9)
        quad_change = 0.5 * ((obs.y[1, 0] - c) ** 2 - obs.y[1, 0] ** 2)
        assert val - base == pytest.approx(0.9 * abs(c) + quad_change, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_stacked_form(self, seed, rng):
        model, obs = rand_instance(seed, N=4)
        N, Dx, Dy = obs.N, model.Dx, model.Dy
        x = rng.standard_normal((N + 1, Dx))
        ox = rng.standard_normal((N, Dx))
        oy = rng.standard_normal((N, Dy))
        lx, ly = 0.3, 0.8
        bs = stack_batch(model, obs)
        from drsmooth.model import OutlierField
        o = bs.stacked_outliers(OutlierField(ox, oy))
        resid = bs.b - bs.A @ x.ravel() - o
        Wi = np.linalg.inv(bs.Qw)
        expect = 0.5 * resid @ Wi @ resid + lx * np.abs(ox).sum() + ly * np.abs(oy).sum()
        got = objective(model, obs, x, ox, oy, lx, ly)
        assert got == pytest.approx(expect, rel=1e-10)


class TestXStep:
    def test_zero_compensation_equals_plain_smoother(self):
        model, obs = rand_instance(9, N=5)
        ks = fixed_interval_ks(model, obs)
        x = x_step(model, obs, np.zeros((obs.N, model.Dx)),
                   np.zeros((obs.N, model.Dy)))
        assert np.array_equal(x, ks.x)

    def test_gradient_at_output_vanishes(self, rng):
        model, obs = rand_instance(10, N=4, Dx=2, Dy=1)
        ox = rng.standard_normal((4, 2))
        oy = rng.standard_normal((4, 1))
        x = x_step(model, obs, ox, oy)
        h = 1e-6
        for n in (0, 2, 4):
            for d in range(2):
                xp, xm = x.copy(), x.copy()
                xp[n, d] += h
                xm[n, d] -= h
                g = (quadratic_objective(model, obs, xp, ox, oy)
                     - quadratic_objective(model, obs, xm, ox, oy)) / (2 * h)
                assert abs(g) < 1e-7


def _golden_section(f, lo, hi, tol=1e-11):
    phi = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


class TestOStep:
    def _iterate(self, model, obs, cfg):
        it = DrsIterate(model, obs, cfg)
        it.refresh_x()
        return it

    def test_diagonal_case_reduces_to_scalar_threshold(self):
        # alpha = q_dd * 3 with penalty q_dd shrinks the estimate to 2
        m = scalar_model(q=0.5)
        obs = ObservationBatch(np.array([[0.0]]))
        cfg = DrsConfig(lambda_x=2.0, lambda_y=1.0)  # lambda_x = q_dd = 1/0.5
        it = self._iterate(m, obs, cfg)
        it.alpha_x = np.array([[2.0 * 3.0]])
        val = o_step(it, "state", 1, 0)
        assert val == pytest.approx(2.0, abs=1e-12)

    def test_threshold_dominates(self):
        m = scalar_model()
        obs = ObservationBatch(np.array([[0.4]]))
        cfg = DrsConfig(lambda_x=5.0, lambda_y=5.0)
        it = self._iterate(m, obs, cfg)
        assert o_step(it, "measurement", 1, 0) == 0.0

    def test_full_sweep_matches_golden_section(self, rng):
        from conftest import rand_spd
        Q = rand_spd(rng, 2)  # non-diagonal coupling
        m = StateSpaceModel(Dx=2, Dy=1, F=0.8 * np.eye(2), H=[[1.0, 0.5]],
                            Q=Q, R=[[0.5]], m0=[0.0, 0.0], Sigma0=np.eye(2))
        obs = ObservationBatch(rng.standard_normal((3, 1)) * 4)
        cfg = DrsConfig(lambda_x=0.4, lambda_y=0.3)
        it = self._iterate(m, obs, cfg)
        for n in range(1, 4):
            for d in range(2):
                got = o_step(it, "state", n, d)
                base_o = it.ox[n - 1].copy()

                def f(v):
                    trial = base_o.copy()
                    trial[d] = v
                    ox_full = it.ox.copy()
                    ox_full[n - 1] = trial
                    return objective(m, obs, it.x, ox_full, it.oy,
                                     cfg.lambda_x, cfg.lambda_y)

                ref = _golden_section(f, got - 2.0, got + 2.0)
                assert got == pytest.approx(ref, abs=1e-6)

    def test_sequential_o_steps_equal_vectorized_sweep(self, rng):
        model, obs = rand_instance(77, N=4, Dx=2, Dy=2, diag=False)
        cfg = DrsConfig(lambda_x=0.2, lambda_y=0.2)
        a = self._iterate(model, obs, cfg)
        b = self._iterate(model, obs, cfg)
        a.sweep_state()
        a.sweep_meas()
        for d in range(2):
            for n in range(1, 5):
                o_step(b, "state", n, d)
        for d in range(2):
            for n in range(1, 5):
                o_step(b, "measurement", n, d)
        assert np.allclose(a.ox, b.ox, atol=1e-12)
        assert np.allclose(a.oy, b.oy, atol=1e-12)


class TestDrsFixedInterval:
    def test_above_bounds_returns_plain_smoother(self):
        model, obs = rand_instance(3, N=4)
        bx, by = lambda_bounds(model, obs)
        cfg = DrsConfig(lambda_x=bx * (1 + 1e-9), lambda_y=by * (1 + 1e-9))
        out = drs_fixed_interval(model, obs, cfg)
        ks = fixed_interval_ks(model, obs)
        assert np.count_nonzero(out.ox) == 0
        assert np.count_nonzero(out.oy) == 0
        assert np.max(np.abs(out.x - ks.x)) == 0.0
        assert out.iterations <= 2

    def test_gross_outlier_flagged_at_right_index(self):
        m = scalar_model()
        y = np.array([[0.1], [9.0], [-0.2]])
        out = drs_fixed_interval(m, ObservationBatch(y),
                                 DrsConfig(lambda_x=50.0, lambda_y=1.0,
                                           tol=1e-14))
        assert np.flatnonzero(out.oy[:, 0]).tolist() == [1]

    def test_monotone_trace(self):
        model, obs = rand_instance(21, N=5)
        out = drs_fixed_interval(model, obs,
                                 DrsConfig(lambda_x=0.2, lambda_y=0.2, tol=1e-14,
                                           max_sweeps=2000))
        tr = np.array(out.objective_trace)
        assert np.all(np.diff(tr) <= 1e-12)

    def test_non_convergence_reported(self):
        model, obs = rand_instance(4, N=5, scale=10.0)
        out = drs_fixed_interval(model, obs,
                                 DrsConfig(lambda_x=0.01, lambda_y=0.01,
                                           tol=1e-15, max_sweeps=1))
        assert not out.converged
        assert out.iterations == 1

    def test_generalized_model_refused(self):
        m = dwna_model()
        obs = ObservationBatch(np.zeros((3, 2)))
        with pytest.raises(GeneralizedModelError):
            drs_fixed_interval(m, obs, DrsConfig(lambda_x=1.0, lambda_y=1.0))

    def test_warm_start_converges_to_same_objective(self):
        model, obs = rand_instance(55, N=5)
        cfg = DrsConfig(lambda_x=0.15, lambda_y=0.15, tol=1e-13, max_sweeps=5000)
        cold = drs_fixed_interval(model, obs, cfg)
        warm = drs_fixed_interval(model, obs, cfg,
                                  init=(cold.ox * 0.5, cold.oy * 0.5))
        assert warm.objective == pytest.approx(cold.objective, rel=1e-8)

    def test_dense_ops_path_matches_loop_path(self):
        model, obs = rand_instance(66, N=6)
        cfg = DrsConfig(lambda_x=0.2, lambda_y=0.2, tol=1e-12)
        a = drs_fixed_interval(model, obs, cfg)
        b = drs_fixed_interval(model, obs, cfg, use_dense_ops=True)
        assert np.allclose(a.x, b.x, atol=1e-9)

    def test_callback_sees_every_sweep(self):
        model, obs = rand_instance(1, N=4)
        seen = []
        drs_fixed_interval(model, obs,
                           DrsConfig(lambda_x=0.3, lambda_y=0.3, tol=1e-12),
                           callback=lambda j, it: seen.append(j))
        assert seen == list(range(1, len(seen) + 1))
        assert seen
