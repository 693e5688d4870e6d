"""Monte-Carlo evaluation harness for the tracking experiments.

Registered scenarios carry the published experiment constants: the glint
tracking setup (position measurements with uniform gross errors), the
identity-gain variant used for the RANSAC and Huber comparisons (Laplacian
state/measurement outliers), and the uniform-measurement-outlier variant.
``run_experiment`` runs M seeded replications of simulate -> smooth ->
score per method and contamination level; reports are deterministic given
the master seed and aggregation is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import csv
import json

import numpy as np

from .admm import admm_drs
from .baselines import HuberConfig, RansacConfig, huber_smoother, ransac_smoother
from .coordinate import DrsConfig, drs_fixed_interval
from .fixed_lag import OnlineFixedLagDrs
from .kalman import fixed_interval_ks, fixed_lag_ks
from .lambda_select import (build_grid, lambda_bounds, select_avd,
                            select_known_fraction, solve_path)
from .model import (OutlierModel, ScenarioConfig, dwna_model, simulate)
from .refine import ReweightConfig, ks_rerun_on_support, reweighted_drs

# ---------------------------------------------------------------------------
# Scenario registry (constants from the tracking experiments).

GLINT_TRAJECTORY_SEED = 20110111
GLINT_MANEUVERS = ((30, (0.0, 15.0, 0.0, -15.0)), (31, (0.0, 15.0, 0.0, -15.0)),
                   (60, (0.0, -15.0, 0.0, 15.0)), (61, (0.0, -15.0, 0.0, 15.0)))
GLINT_SAMPLE_OUTLIERS = ((15, (-5560.0, 18440.0)),
                         (50, (3880.0, 14440.0)),
                         (80, (6440.0, -14800.0)))


def _glint_scenario(level: dict, seed: int) -> ScenarioConfig:
    """Tracking with tall noise gain; 3% uniform gross position reports."""
    prob = level.get("meas_prob", 0.03)
    return ScenarioConfig(
        model=dwna_model(tau=1.0, accel_var=0.5, meas_var=150.0 ** 2,
                         sigma0_diag=(50.0, 5.0, 50.0, 5.0)),
        N=100, seed=seed, trajectory_seed=GLINT_TRAJECTORY_SEED,
        maneuvers=GLINT_MANEUVERS,
        meas_outliers=OutlierModel(kind="replace_uniform", prob=prob,
                                   low=-10000.0, high=10000.0))


def _glint_sample_scenario(level: dict, seed: int) -> ScenarioConfig:
    """Single glint trajectory with the three fixed outlying reports."""
    return ScenarioConfig(
        model=dwna_model(tau=1.0, accel_var=0.5, meas_var=150.0 ** 2,
                         sigma0_diag=(50.0, 5.0, 50.0, 5.0)),
        N=100, seed=seed, trajectory_seed=GLINT_TRAJECTORY_SEED,
        maneuvers=GLINT_MANEUVERS,
        meas_outliers=OutlierModel(kind="fixed_replace",
                                   events=GLINT_SAMPLE_OUTLIERS))


def _vm_model(q_diag):
    return dwna_model(tau=1.0, identity_gain=True, q_diag=q_diag,
                      meas_var=5.0, sigma0_diag=(50.0, 5.0, 50.0, 5.0))


def _ransac_comparison_scenario(level: dict, seed: int) -> ScenarioConfig:
    """Identity-gain tracking model with Laplacian state/measurement outliers."""
    return ScenarioConfig(
        model=_vm_model((1.0, 0.001, 1.0, 0.001)),
        N=100, seed=seed,
        state_outliers=OutlierModel(kind="additive_laplace",
                                    prob=level.get("state_pct", 0) / 100.0,
                                    variance=200.0),
        meas_outliers=OutlierModel(kind="additive_laplace",
                                   prob=level.get("meas_pct", 0) / 100.0,
                                   variance=20000.0))


def _laplace_comparison_scenario(level: dict, seed: int) -> ScenarioConfig:
    """Uniform measurement outliers on the loose-position-noise variant."""
    return ScenarioConfig(
        model=_vm_model((100.0, 1.0, 100.0, 1.0)),
        N=100, seed=seed,
        meas_outliers=OutlierModel(kind="additive_uniform",
                                   prob=level.get("meas_pct", 0) / 100.0,
                                   variance=20000.0))


SCENARIOS = {
    "dwna-glint": _glint_scenario,
    "dwna-glint-sample": _glint_sample_scenario,
    "ransac-comparison": _ransac_comparison_scenario,
    "joint-outliers": _ransac_comparison_scenario,
    "laplace-comparison": _laplace_comparison_scenario,
}

POSITION_IDX = (0, 2)
VELOCITY_IDX = (1, 3)


# ---------------------------------------------------------------------------
# Method registry.


def _avd_output(model, obs, params):
    bounds = lambda_bounds(model, obs)
    grid = build_grid(bounds, Ix=params.get("Ix", 10), Iy=params.get("Iy", 10),
                      floor_ratio=params.get("floor_ratio", 1e-3))
    path = solve_path(model, obs, grid, tol=params.get("tol", 1e-6),
                      max_sweeps=params.get("max_sweeps", 300),
                      use_dense_ops=True)
    return select_avd(path, model, obs), grid, path


def _run_method(name: str, params: dict, model, obs, level: dict, seed: int):
    if name == "ks":
        return fixed_interval_ks(model, obs).x
    if name == "drs-cd":
        cfg = DrsConfig(lambda_x=params["lambda_x"], lambda_y=params["lambda_y"],
                        tol=params.get("tol", 1e-8),
                        max_sweeps=params.get("max_sweeps", 500))
        return drs_fixed_interval(model, obs, cfg).x
    if name == "drs-admm":
        return admm_drs(model, obs, params["lambda_x"], params["lambda_y"],
                        kappa=params.get("kappa", 0.002),
                        max_iters=params.get("max_iters", 8000),
                        tol=params.get("tol", 5e-4),
                        record_objective=False).x
    if name == "drs-avd":
        sel, _, _ = _avd_output(model, obs, params)
        return sel.output.x
    if name == "drs-avd-reweight":
        sel, _, _ = _avd_output(model, obs, params)
        rw = reweighted_drs(model, obs, sel.lambda_x, sel.lambda_y, sel.output,
                            ReweightConfig(iterations=params.get("iterations", 1)),
                            tol=params.get("tol", 1e-6),
                            max_sweeps=params.get("max_sweeps", 300))
        return rw.x
    if name == "drs-avd-rerun":
        sel, _, _ = _avd_output(model, obs, params)
        return ks_rerun_on_support(model, obs, sel.output).x
    if name == "drs-fraction":
        bounds = lambda_bounds(model, obs)
        grid = build_grid(bounds, Ix=params.get("Ix", 10), Iy=params.get("Iy", 10),
                          floor_ratio=params.get("floor_ratio", 1e-3))
        path = solve_path(model, obs, grid, tol=params.get("tol", 1e-6),
                          max_sweeps=params.get("max_sweeps", 300),
                          use_dense_ops=True)
        pi_x = params.get("pi_x", level.get("state_pct", 0) / 100.0)
        pi_y = params.get("pi_y", level.get("meas_pct", 0) / 100.0)
        return select_known_fraction(path, model, obs, pi_x, pi_y).output.x
    if name == "huber":
        cfg = HuberConfig(threshold=params.get("threshold", 1.345),
                          max_iters=params.get("max_iters", 200),
                          tol=params.get("tol", 1e-10))
        return huber_smoother(model, obs, cfg).x
    if name == "ransac":
        cfg = RansacConfig(draws=params.get("draws", 100),
                           inlier_threshold=params.get("inlier_threshold", 1.345),
                           sample_states=params.get("sample_states", True),
                           seed=seed)
        return ransac_smoother(model, obs, cfg,
                               then_huber=params.get("then_huber", True)).x
    if name == "fl-ks":
        return fixed_lag_ks(model, obs, lag=params.get("lag", 10),
                            window=params.get("window", 10))
    if name == "fl-drs":
        online = OnlineFixedLagDrs(
            model, lag=params.get("lag", 10), window=params.get("window", 10),
            sweeps_per_step=params.get("sweeps", 50),
            lambda_x=params["lambda_x"], lambda_y=params["lambda_y"],
            kappa=params.get("kappa", 0.002))
        for row in obs.y:
            online.step(row)
        online.flush()
        est = dict(online.emitted)
        return np.array([est[n] for n in range(obs.N + 1)])
    raise ValueError(f"unknown method {name!r}")


# ---------------------------------------------------------------------------
# Metrics.


@dataclass
class RmseReport:
    """Pooled per-step RMSE plus per-replication spread statistics."""

    rmse_n: np.ndarray
    time_averaged: float
    rep_scores: np.ndarray
    rep_mean: float
    rep_std: float
    rep_median: float
    M: int

    def to_dict(self) -> dict:
        return {
            "time_averaged": self.time_averaged,
            "rep_mean": self.rep_mean,
            "rep_std": self.rep_std,
            "rep_median": self.rep_median,
            "M": self.M,
        }


def rmse(truth, estimates, index_set) -> RmseReport:
    """Root mean-square error over M runs at the selected coordinates.

    ``truth`` is (N+1, Dx) (shared) or (M, N+1, Dx); ``estimates`` is
    (M, N+1, Dx).  Per-step values pool squared errors across runs; the
    time average runs over steps 1..N.  Per-replication scores are each
    run's own time-averaged RMSE.
    """
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if truth.ndim == 2:
        truth = np.broadcast_to(truth, estimates.shape)
    idx = list(index_set)
    err2 = np.sum((estimates[:, 1:, idx] - truth[:, 1:, idx]) ** 2, axis=2)
    rmse_n = np.sqrt(err2.mean(axis=0))
    rep_scores = np.sqrt(err2.mean(axis=1))
    return RmseReport(rmse_n=rmse_n,
                      time_averaged=float(rmse_n.mean()),
                      rep_scores=rep_scores,
                      rep_mean=float(rep_scores.mean()),
                      rep_std=float(rep_scores.std(ddof=1)) if len(rep_scores) > 1 else 0.0,
                      rep_median=float(np.median(rep_scores)),
                      M=estimates.shape[0])


@dataclass
class ExperimentSpec:
    """Descriptor: scenario key, methods with parameters, levels, budget."""

    scenario: str
    methods: list
    levels: list = field(default_factory=lambda: [{}])
    M: int = 25
    seed: int = 0

    @staticmethod
    def from_dict(d: dict) -> "ExperimentSpec":
        return ExperimentSpec(scenario=d["scenario"], methods=list(d["methods"]),
                              levels=list(d.get("levels", [{}])),
                              M=int(d.get("M", 25)), seed=int(d.get("seed", 0)))


@dataclass
class BenchResult:
    spec: ExperimentSpec
    reports: dict          # (method_label, level_key) -> {metric: RmseReport}
    failures: dict         # (method_label, level_key) -> count
    truths: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {"scenario": self.spec.scenario, "M": self.spec.M,
               "seed": self.spec.seed, "results": []}
        for (label, level_key), metrics in sorted(self.reports.items()):
            entry = {"method": label, "level": dict(level_key),
                     "failures": self.failures.get((label, level_key), 0)}
            for metric, rep in metrics.items():
                entry[metric] = rep.to_dict()
            out["results"].append(entry)
        return out

    def write_long_csv(self, path) -> None:
        """Plot-ready long format: method, contamination, metric, n, rmse."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["method", "contamination", "metric", "n", "rmse"])
            for (label, level_key), metrics in sorted(self.reports.items()):
                level_str = json.dumps(dict(level_key), sort_keys=True)
                for metric, rep in metrics.items():
                    for n, v in enumerate(rep.rmse_n, start=1):
                        wr.writerow([label, level_str, metric, n, repr(float(v))])


def _level_key(level: dict):
    return tuple(sorted(level.items()))


def _rep_seed(master: int, level_idx: int, rep: int, extra: int = 0) -> int:
    ss = np.random.SeedSequence(entropy=master,
                                spawn_key=(level_idx, rep, extra))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run_experiment(spec: ExperimentSpec, keep_estimates: bool = False) -> BenchResult:
    """Run M replications per level and score every method.

    Per-replication failures are recorded and the replication is excluded
    for the failing method only.  Deterministic given the master seed.
    """
    if spec.scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {spec.scenario!r}; "
                         f"registered: {sorted(SCENARIOS)}")
    factory = SCENARIOS[spec.scenario]
    result = BenchResult(spec=spec, reports={}, failures={})
    for li, level in enumerate(spec.levels):
        key = _level_key(level)
        truths = []
        per_method: dict[str, list] = {}
        fail_counts: dict[str, int] = {}
        for rep in range(spec.M):
            cfg = factory(level, _rep_seed(spec.seed, li, rep))
            xs, obs, _ = simulate(cfg)
            truths.append(xs)
            for mi, mdict in enumerate(spec.methods):
                name = mdict["name"]
                label = mdict.get("label", name)
                params = mdict.get("params", {})
                try:
                    est = _run_method(name, params, cfg.model, obs, level,
                                      _rep_seed(spec.seed, li, rep, mi + 1))
                except Exception:
                    fail_counts[label] = fail_counts.get(label, 0) + 1
                    per_method.setdefault(label, []).append(None)
                    continue
                per_method.setdefault(label, []).append(est)
        truths = np.asarray(truths)
        for label, ests in per_method.items():
            ok = [i for i, e in enumerate(ests) if e is not None]
            if not ok:
                result.failures[(label, key)] = fail_counts.get(label, 0)
                continue
            est_arr = np.asarray([ests[i] for i in ok])
            tru_arr = truths[ok]
            dx = est_arr.shape[-1]
            metrics = {"full": rmse(tru_arr, est_arr, range(dx))}
            if dx == 4:
                metrics["position"] = rmse(tru_arr, est_arr, POSITION_IDX)
                metrics["velocity"] = rmse(tru_arr, est_arr, VELOCITY_IDX)
            result.reports[(label, key)] = metrics
            result.failures[(label, key)] = fail_counts.get(label, 0)
            if keep_estimates:
                result.estimates[(label, key)] = est_arr
        if keep_estimates:
            result.truths[key] = truths
    return result
