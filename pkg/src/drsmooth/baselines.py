"""Competing robust smoothers: Huber M-estimation and RANSAC.

Both operate on the pre-whitened stacked regression.  The Huber smoother
minimizes the Huber cost of every whitened state and measurement residual
(the prior term stays quadratic) by iteratively reweighted least squares.
RANSAC repeatedly fits the trajectory on random row subsets, scores
candidate fits by the number of rows with small whitened residuals, and
refits on the best consensus set - optionally with the Huber cost.

Pre-whitening with correlated noise spreads outliers across rows; this is
a known weakness of both baselines and is reproduced, not corrected.
"""

from __future__ import annotations

from dataclasses import dataclass
import time

import numpy as np
import scipy.linalg

from .batch import WhitenedStack
from .errors import RansacError
from .kalman import SmootherOutput
from .model import ObservationBatch, OutlierField, StateSpaceModel

_RIDGE = 1e-10


@dataclass(frozen=True)
class HuberConfig:
    """Huber threshold (the classical 1.345 for standardized Gaussian noise)
    and IRLS stopping parameters.

    Separate state/measurement thresholds default to the common one.
    """

    threshold: float = 1.345
    max_iters: int = 200
    tol: float = 1e-10
    threshold_x: float | None = None
    threshold_y: float | None = None

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")

    @property
    def lambda_x(self) -> float:
        return self.threshold if self.threshold_x is None else self.threshold_x

    @property
    def lambda_y(self) -> float:
        return self.threshold if self.threshold_y is None else self.threshold_y


@dataclass(frozen=True)
class RansacConfig:
    """Draw count, inlier threshold on whitened residuals, and sampling policy.

    The default minimal sample keeps every state-equation row and seeds the
    fit with a small random subset of measurement rows.  With
    ``sample_states`` (needed when the state equation itself is
    contaminated) each draw additionally drops a few whole state-equation
    steps, never two adjacent ones; every dropped step frees Dx directions
    that only measurement rows can pin, so the drop count is capped and the
    measurement sample enlarged to keep the seed fit overdetermined.
    ``state_sample_fraction`` is the targeted fraction of steps kept.
    """

    draws: int = 100
    inlier_threshold: float = 1.345
    sample_states: bool = False
    state_sample_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.draws < 1:
            raise ValueError("need at least one draw")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier threshold must be positive")
        if not 0.0 < self.state_sample_fraction <= 1.0:
            raise ValueError("state_sample_fraction must lie in (0, 1]")


def huber_rho(r: float, lam: float):
    """Huber cost: quadratic up to lam, linear beyond; elementwise on arrays."""
    r = np.abs(r)
    return np.where(r <= lam, 0.5 * r * r, lam * r - 0.5 * lam * lam)


def _huber_objective(stack: WhitenedStack, x, lam_x, lam_y,
                     state_mask=None, meas_mask=None) -> float:
    pr, sr, mr = stack.residuals(x)
    sc = huber_rho(sr, lam_x)
    mc = huber_rho(mr, lam_y)
    if state_mask is not None:
        sc = sc * state_mask
    if meas_mask is not None:
        mc = mc * meas_mask
    return 0.5 * float(pr @ pr) + float(sc.sum()) + float(mc.sum())


def _huber_weights(resid: np.ndarray, lam: float) -> np.ndarray:
    mag = np.abs(resid)
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, np.where(mag > 0, lam / mag, 1.0))


def _solve_weighted(stack: WhitenedStack, ws, wm, allow_ridge: bool = True):
    ab, rhs = stack.normal_banded(ws, wm)
    try:
        x = scipy.linalg.solveh_banded(ab, rhs, lower=True)
        return x.reshape(stack.N + 1, stack.Dx), False
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        if not allow_ridge:
            raise
        ab = ab.copy()
        ab[0, :] += _RIDGE
        x = scipy.linalg.solveh_banded(ab, rhs, lower=True)
        return x.reshape(stack.N + 1, stack.Dx), True


def _irls(stack: WhitenedStack, cfg: HuberConfig, state_mask=None, meas_mask=None):
    """IRLS on the whitened stack; returns (x, objective trace, flags).

    Stops when the sup-norm change of the trajectory falls below the
    configured tolerance.
    """
    lam_x, lam_y = cfg.lambda_x, cfg.lambda_y
    ws = np.ones((stack.N, stack.Dx)) if state_mask is None else np.array(state_mask, float)
    wm = np.ones((stack.N, stack.Dy)) if meas_mask is None else np.array(meas_mask, float)
    x, ridged = _solve_weighted(stack, ws, wm)
    trace = [_huber_objective(stack, x, lam_x, lam_y, state_mask, meas_mask)]
    converged = False
    ridge_retries = int(ridged)
    for _ in range(cfg.max_iters):
        _, sr, mr = stack.residuals(x)
        ws = _huber_weights(sr, lam_x)
        wm = _huber_weights(mr, lam_y)
        if state_mask is not None:
            ws = ws * state_mask
        if meas_mask is not None:
            wm = wm * meas_mask
        x_new, ridged = _solve_weighted(stack, ws, wm)
        ridge_retries += int(ridged)
        trace.append(_huber_objective(stack, x_new, lam_x, lam_y,
                                      state_mask, meas_mask))
        delta = float(np.max(np.abs(x_new - x)))
        x = x_new
        if delta <= cfg.tol * max(1.0, float(np.max(np.abs(x)))):
            converged = True
            break
    return x, trace, converged, ridge_retries


def huber_smoother(model: StateSpaceModel, obs: ObservationBatch,
                   cfg: HuberConfig = HuberConfig()) -> SmootherOutput:
    """Robust smoothing with the Huber cost on whitened residuals via IRLS.

    The prior term is kept quadratic.  The reweighted least-squares
    objective is nonincreasing; a singular reweighted system triggers one
    ridge-regularized retry, reported in the diagnostics.
    """
    t0 = time.perf_counter()
    model.require_valid(N=obs.N)
    stack = WhitenedStack(model, obs)
    x, trace, converged, ridge_retries = _irls(stack, cfg)
    diagnostics = {"ridge_retries": ridge_retries}
    return SmootherOutput(x=x, outliers=OutlierField.zeros(obs.N, model.Dx, model.Dy),
                          objective_trace=trace, iterations=len(trace) - 1,
                          converged=converged, wall_time=time.perf_counter() - t0,
                          diagnostics=diagnostics)


def ransac_smoother(model: StateSpaceModel, obs: ObservationBatch,
                    cfg: RansacConfig = RansacConfig(),
                    then_huber: bool = False,
                    huber_cfg: HuberConfig | None = None) -> SmootherOutput:
    """Consensus-based robust smoothing on the stacked regression rows.

    Every draw fits the trajectory on the sampled rows, classifies all
    scalar rows by their whitened residual magnitude, and the draw with
    the largest inlier count wins.  The final estimate refits on the
    consensus rows, by weighted least squares or (``then_huber``) by the
    Huber smoother restricted to those rows.  Draw seeds derive from the
    master seed, so results are reproducible and draw-order independent.
    """
    t0 = time.perf_counter()
    model.require_valid(N=obs.N)
    stack = WhitenedStack(model, obs)
    N, Dx, Dy = stack.N, stack.Dx, stack.Dy
    n_meas = N * Dy
    horizon = max(1, int(np.ceil(Dx / Dy)))
    drops = 0
    if cfg.sample_states:
        drops = min(int(round((1.0 - cfg.state_sample_fraction) * N)),
                    max(1, N // 20))
    sample_size = min(2 * Dx * horizon + 2 * Dx * drops, n_meas)

    children = np.random.SeedSequence(cfg.seed).spawn(cfg.draws)
    best_count = -1
    best_inliers = None
    failures = 0
    for child in children:
        rng = np.random.default_rng(child)
        wm = np.zeros(n_meas)
        wm[rng.choice(n_meas, size=sample_size, replace=False)] = 1.0
        wm = wm.reshape(N, Dy)
        ws = np.ones((N, Dx))
        if drops:
            # one drop per stratum keeps the freed jumps far apart so the
            # sampled measurement rows can pin them
            edges = np.linspace(0, N, drops + 1).astype(int)
            dropped = [int(rng.integers(lo, hi)) for lo, hi in
                       zip(edges[:-1], edges[1:]) if hi > lo]
            ws[dropped] = 0.0
        try:
            x, _ = _solve_weighted(stack, ws, wm, allow_ridge=False)
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
            failures += 1
            continue
        _, sr, mr = stack.residuals(x)
        inl_s = np.abs(sr) <= cfg.inlier_threshold
        inl_m = np.abs(mr) <= cfg.inlier_threshold
        count = int(inl_s.sum()) + int(inl_m.sum())
        if count > best_count:
            best_count = count
            best_inliers = (inl_s.astype(float), inl_m.astype(float))
    if best_inliers is None:
        raise RansacError(
            f"all {cfg.draws} draws failed to produce a solvable system "
            f"({failures} singular fits)")

    ws, wm = best_inliers
    diagnostics = {
        "consensus_size": best_count,
        "total_rows": N * (Dx + Dy),
        "failed_draws": failures,
        "then_huber": then_huber,
    }
    if then_huber:
        hcfg = huber_cfg if huber_cfg is not None else HuberConfig()
        x, trace, converged, ridged = _irls(stack, hcfg, state_mask=ws, meas_mask=wm)
        diagnostics["ridge_retries"] = ridged
        out = SmootherOutput(x=x, outliers=OutlierField.zeros(N, Dx, Dy),
                             objective_trace=trace, iterations=len(trace) - 1,
                             converged=converged, diagnostics=diagnostics)
    else:
        x, ridged = _solve_weighted(stack, ws, wm)
        diagnostics["ridge_retries"] = int(ridged)
        out = SmootherOutput(x=x, outliers=OutlierField.zeros(N, Dx, Dy),
                             objective_trace=[], iterations=cfg.draws,
                             converged=True, diagnostics=diagnostics)
    out.wall_time = time.perf_counter() - t0
    return out
