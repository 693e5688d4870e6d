import numpy as np
import pytest

from drsmooth.coordinate import DrsConfig, drs_fixed_interval
from drsmooth.kalman import fixed_interval_ks
from drsmooth.model import ObservationBatch, StateSpaceModel
from drsmooth.refine import (ReweightConfig, ks_rerun_on_support,
                             reweighted_drs)

from conftest import rand_instance, rand_spd, scalar_model


class TestReweighted:
    def test_uniform_weights_reproduce_plain_solution(self):
        model, obs = rand_instance(80, N=5)
        cfg = DrsConfig(lambda_x=0.4, lambda_y=0.4, tol=1e-12)
        plain = drs_fixed_interval(model, obs, cfg)
        # zero-outlier init with delta = 1 gives unit weights everywhere
        zero_init = drs_fixed_interval(
            model, obs, DrsConfig(lambda_x=1e9, lambda_y=1e9))
        assert np.count_nonzero(zero_init.ox) + np.count_nonzero(zero_init.oy) == 0
        rw = reweighted_drs(model, obs, 0.4, 0.4, zero_init,
                            ReweightConfig(delta_x=1.0, delta_y=1.0,
                                           iterations=1), tol=1e-12)
        assert np.array_equal(rw.x, plain.x)
        assert np.array_equal(rw.ox, plain.ox)
        assert np.array_equal(rw.oy, plain.oy)

    def test_refined_outlier_estimate_less_biased(self):
        m = scalar_model()
        truth_o = 8.0
        y = np.array([[0.2], [truth_o], [-0.1], [0.15]])
        obs = ObservationBatch(y)
        lam_y = 1.0
        init = drs_fixed_interval(m, obs, DrsConfig(lambda_x=50.0, lambda_y=lam_y,
                                                    tol=1e-14))
        assert np.flatnonzero(init.oy[:, 0]).tolist() == [1]
        rw = reweighted_drs(m, obs, 50.0, lam_y, init,
                            ReweightConfig(delta_x=1e-3, delta_y=1e-3,
                                           iterations=2), tol=1e-14)
        assert abs(rw.oy[1, 0] - truth_o) < abs(init.oy[1, 0] - truth_o)

    def test_surrogate_nonincreasing(self):
        model, obs = rand_instance(81, N=5, scale=6.0)
        init = drs_fixed_interval(model, obs,
                                  DrsConfig(lambda_x=0.3, lambda_y=0.3,
                                            tol=1e-12))
        rw = reweighted_drs(model, obs, 0.3, 0.3, init,
                            ReweightConfig(delta_x=1e-2, delta_y=1e-2,
                                           iterations=4), tol=1e-12)
        tr = np.array(rw.diagnostics["surrogate_trace"])
        assert np.all(np.diff(tr) <= 1e-10)

    def test_default_deltas_positive(self):
        model, obs = rand_instance(82, N=4)
        init = drs_fixed_interval(model, obs,
                                  DrsConfig(lambda_x=0.5, lambda_y=0.5))
        rw = reweighted_drs(model, obs, 0.5, 0.5, init, ReweightConfig())
        assert rw.diagnostics["delta_x"] > 0
        assert rw.diagnostics["delta_y"] > 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ReweightConfig(delta_x=0.0)
        with pytest.raises(ValueError):
            ReweightConfig(iterations=0)


def test_support_recovery_f1_at_ten_percent_contamination():
    from drsmooth.lambda_select import (build_grid, lambda_bounds,
                                        select_known_fraction, solve_path)
    from drsmooth.model import OutlierModel, ScenarioConfig, simulate
    tp = fp = fn = 0
    for rep in range(20):
        cfg = ScenarioConfig(
            model=scalar_model(), N=60, seed=700 + rep,
            meas_outliers=OutlierModel(kind="additive_uniform", prob=0.10,
                                       variance=2500.0))
        _, obs, truth = simulate(cfg)
        m = scalar_model()
        grid = build_grid(lambda_bounds(m, obs), Ix=8, Iy=8)
        path = solve_path(m, obs, grid, tol=1e-8, max_sweeps=500)
        frac = truth.support_fractions()[1]
        sel = select_known_fraction(path, m, obs, 0.0, frac)
        rw = reweighted_drs(m, obs, sel.lambda_x, sel.lambda_y, sel.output,
                            ReweightConfig(iterations=1), tol=1e-10)
        est = rw.oy[:, 0] != 0
        tru = truth.oy[:, 0] != 0
        tp += int(np.sum(est & tru))
        fp += int(np.sum(est & ~tru))
        fn += int(np.sum(~est & tru))
    precision = tp / max(tp + fp, 1)
    recall = tp / max(tp + fn, 1)
    f1 = 2 * precision * recall / max(precision + recall, 1e-12)
    assert f1 >= 0.90


class TestKsRerun:
    def test_empty_support_equals_plain_smoother(self):
        model, obs = rand_instance(83, N=5)
        drs = drs_fixed_interval(model, obs,
                                 DrsConfig(lambda_x=1e9, lambda_y=1e9))
        rerun = ks_rerun_on_support(model, obs, drs)
        ks = fixed_interval_ks(model, obs)
        assert np.max(np.abs(rerun.x - ks.x)) < 1e-12

    def test_flagged_measurement_removed_exactly(self):
        m = scalar_model()
        y = np.array([[0.3], [9.0], [0.1], [-0.2]])
        obs = ObservationBatch(y)
        drs = drs_fixed_interval(m, obs, DrsConfig(lambda_x=50.0, lambda_y=1.0,
                                                   tol=1e-14))
        assert np.flatnonzero(drs.oy[:, 0]).tolist() == [1]
        rerun = ks_rerun_on_support(m, obs, drs)
        # independent oracle: dense normal equations without the flagged row
        ref = _dense_wls_without_rows(m, obs, [(2, 0)])
        assert np.max(np.abs(rerun.x - ref)) < 1e-6
        assert rerun.diagnostics["removed_measurement_entries"] == 1

    def test_correlated_noise_uses_variance_inflation(self, rng):
        R = rand_spd(rng, 2)
        R[0, 1] = R[1, 0] = 0.3 * np.sqrt(R[0, 0] * R[1, 1])
        m = StateSpaceModel(Dx=1, Dy=2, F=[[1.0]], H=[[1.0], [1.0]], Q=[[1.0]],
                            R=R, m0=[0.0], Sigma0=[[1.0]])
        y = np.array([[0.2, 15.0], [0.1, 0.0], [0.0, 0.1]])
        obs = ObservationBatch(y)
        drs = drs_fixed_interval(m, obs, DrsConfig(lambda_x=100.0, lambda_y=0.5,
                                                   tol=1e-13))
        assert drs.oy[0, 1] != 0.0
        rerun = ks_rerun_on_support(m, obs, drs)
        assert np.all(np.isfinite(rerun.x))
        # the inflated coordinate no longer drags the estimate to 15
        assert abs(rerun.x[1, 0]) < 2.0

    def test_state_offset_compensation_kept(self):
        m = scalar_model()
        y = np.array([[0.0], [6.0], [6.1], [6.0]])
        obs = ObservationBatch(y)
        drs = drs_fixed_interval(m, obs, DrsConfig(lambda_x=1.5, lambda_y=20.0,
                                                   tol=1e-14))
        assert np.count_nonzero(drs.ox) >= 1
        rerun = ks_rerun_on_support(m, obs, drs)
        # offsets keep the jump: smoothed state follows the level shift
        assert rerun.x[2, 0] > 3.0

    def test_drop_mode_frees_transitions(self):
        m = scalar_model()
        y = np.array([[0.0], [6.0], [6.1], [6.0]])
        obs = ObservationBatch(y)
        drs = drs_fixed_interval(m, obs, DrsConfig(lambda_x=1.5, lambda_y=20.0,
                                                   tol=1e-14))
        rerun = ks_rerun_on_support(m, obs, drs, state_handling="drop")
        assert np.all(np.isfinite(rerun.x))
        assert rerun.x[2, 0] > 3.0

    def test_all_flagged_degenerates_to_prior_propagation(self):
        m = scalar_model(m0=2.0, f=0.5)
        obs = ObservationBatch(np.full((3, 1), 50.0))
        drs = drs_fixed_interval(m, obs, DrsConfig(lambda_x=1e6, lambda_y=0.01,
                                                   tol=1e-13))
        assert np.all(drs.oy != 0.0)
        with pytest.warns(UserWarning, match="flagged"):
            rerun = ks_rerun_on_support(m, obs, drs)
        assert rerun.diagnostics["degenerate"]
        expect = 2.0 * 0.5 ** np.arange(4)
        assert np.allclose(rerun.x[:, 0], expect, atol=1e-9)


def _dense_wls_without_rows(model, obs, removed):
    """Dense stacked solve with the listed (n, d) measurement rows deleted."""
    N, Dx = obs.N, model.Dx
    F = model.seq("F", N)
    H = model.seq("H", N)
    Qi = np.linalg.inv(model.seq("Q", N))
    Ri = np.linalg.inv(model.seq("R", N))
    S0i = np.linalg.inv(model.Sigma0)
    dim = (N + 1) * Dx
    P = np.zeros((dim, dim))
    q = np.zeros(dim)
    P[:Dx, :Dx] += S0i
    q[:Dx] += S0i @ model.m0
    for n in range(1, N + 1):
        cur = slice(n * Dx, (n + 1) * Dx)
        prev = slice((n - 1) * Dx, n * Dx)
        P[cur, cur] += Qi[n - 1]
        P[prev, prev] += F[n - 1].T @ Qi[n - 1] @ F[n - 1]
        P[cur, prev] += -Qi[n - 1] @ F[n - 1]
        P[prev, cur] += -F[n - 1].T @ Qi[n - 1]
        keep = [d for d in range(model.Dy) if (n, d) not in removed]
        if keep:
            Hk = H[n - 1][keep]
            Rk = np.linalg.inv(model.seq("R", N)[n - 1][np.ix_(keep, keep)])
            P[cur, cur] += Hk.T @ Rk @ Hk
            q[n * Dx:(n + 1) * Dx] += Hk.T @ Rk @ obs.y[n - 1][keep]
    return np.linalg.solve(P, q).reshape(N + 1, Dx)
