"""De-biasing refinements of a converged robust smoothing solution.

The l1 penalty shrinks the nonzero outlier estimates toward zero, which
biases them (and through them the trajectory).  Two refinements follow:

* iteratively reweighted solves, where each coordinate's penalty weight is
  the reciprocal of its previous magnitude (plus a small constant), i.e.
  successive convex relaxations of a concave log penalty; and
* a plain smoother rerun that drops the measurements flagged as outliers
  and keeps the identified state outliers as fixed dynamics offsets.
"""

from __future__ import annotations

from dataclasses import dataclass
import time
import warnings

import numpy as np

from .coordinate import DrsConfig, drs_fixed_interval, objective
from .kalman import SmootherGains, SmootherOutput, fixed_interval_ks
from .model import ObservationBatch, StateSpaceModel
from .objective import quadratic_objective

_DELTA_RESIDUAL_FACTOR = 1e-4
_INFLATION = 1e12


@dataclass(frozen=True)
class ReweightConfig:
    """Smoothing constants and iteration count for the reweighted solves.

    When a delta is None it defaults to 1e-4 times the median absolute
    plain-smoother residual of the matching channel.
    """

    delta_x: float | None = None
    delta_y: float | None = None
    iterations: int = 1

    def __post_init__(self):
        if self.delta_x is not None and self.delta_x <= 0:
            raise ValueError("delta_x must be positive")
        if self.delta_y is not None and self.delta_y <= 0:
            raise ValueError("delta_y must be positive")
        if self.iterations < 1:
            raise ValueError("at least one reweighting iteration is required")


def _default_deltas(model, obs):
    ks = fixed_interval_ks(model, obs)
    N = obs.N
    F = model.seq("F", N)
    H = model.seq("H", N)
    dyn = ks.x[1:] - np.einsum("nij,nj->ni", F, ks.x[:-1])
    meas = obs.y - np.einsum("nij,nj->ni", H, ks.x[1:])
    dx = _DELTA_RESIDUAL_FACTOR * float(np.median(np.abs(dyn)))
    dy = _DELTA_RESIDUAL_FACTOR * float(np.median(np.abs(meas)))
    return max(dx, 1e-12), max(dy, 1e-12)


def concave_surrogate(model, obs, x, ox, oy, lambda_x, lambda_y,
                      delta_x, delta_y) -> float:
    """Log-penalized cost that the reweighted iterations descend."""
    val = quadratic_objective(model, obs, x, ox, oy)
    val += lambda_x * float(np.log(np.abs(ox) + delta_x).sum())
    val += lambda_y * float(np.log(np.abs(oy) + delta_y).sum())
    return val


def reweighted_drs(model: StateSpaceModel, obs: ObservationBatch,
                   lambda_x: float, lambda_y: float,
                   init: SmootherOutput, cfg: ReweightConfig = ReweightConfig(),
                   tol: float = 1e-12, max_sweeps: int = 500) -> SmootherOutput:
    """Iteratively reweighted robust smoothing from a converged solution.

    Each round solves the convex problem whose per-coordinate penalty
    weights are 1 / (|previous outlier estimate| + delta); with uniform
    weights the solve is the plain robust smoother itself.  The concave
    surrogate value never increases along the rounds.
    """
    t0 = time.perf_counter()
    dx, dy = cfg.delta_x, cfg.delta_y
    if dx is None or dy is None:
        ddx, ddy = _default_deltas(model, obs)
        dx = ddx if dx is None else dx
        dy = ddy if dy is None else dy
    gains = SmootherGains.for_model(model, obs.N)
    ox, oy = init.ox, init.oy
    surrogate = [concave_surrogate(model, obs, init.x, ox, oy,
                                   lambda_x, lambda_y, dx, dy)]
    out = init
    total = 0
    for _ in range(cfg.iterations):
        wx = 1.0 / (np.abs(ox) + dx)
        wy = 1.0 / (np.abs(oy) + dy)
        drs_cfg = DrsConfig(lambda_x=lambda_x, lambda_y=lambda_y,
                            tol=tol, max_sweeps=max_sweeps)
        out = drs_fixed_interval(model, obs, drs_cfg, init=(ox, oy),
                                 weights_x=wx, weights_y=wy, gains=gains)
        ox, oy = out.ox, out.oy
        total += out.iterations
        surrogate.append(concave_surrogate(model, obs, out.x, ox, oy,
                                           lambda_x, lambda_y, dx, dy))
    diagnostics = dict(out.diagnostics)
    diagnostics["surrogate_trace"] = surrogate
    diagnostics["delta_x"] = dx
    diagnostics["delta_y"] = dy
    return SmootherOutput(x=out.x, outliers=out.outliers,
                          objective_trace=out.objective_trace,
                          iterations=total, converged=out.converged,
                          wall_time=time.perf_counter() - t0,
                          diagnostics=diagnostics)


def _is_diag(m: np.ndarray) -> bool:
    return not np.any(m - np.diag(np.diag(m)))


def ks_rerun_on_support(model: StateSpaceModel, obs: ObservationBatch,
                        drs_output: SmootherOutput,
                        state_handling: str = "offset") -> SmootherOutput:
    """Plain smoother rerun on the outlier-free part of the data.

    Measurement entries flagged by the robust solve are removed: exact row
    deletion when the step's noise covariance is diagonal, otherwise the
    flagged coordinate's variance is inflated by 1e12 (an approximate
    removal for correlated noise).  Flagged state-equation entries keep the
    estimated outlier as a fixed dynamics offset; with
    ``state_handling="drop"`` their process-noise variance is inflated
    instead, freeing those transitions.
    """
    if state_handling not in ("offset", "drop"):
        raise ValueError("state_handling must be 'offset' or 'drop'")
    t0 = time.perf_counter()
    model.require_valid(N=obs.N)
    N, Dx = obs.N, model.Dx
    flags_y = drs_output.oy != 0.0
    flags_x = drs_output.ox != 0.0

    F = list(model.seq("F", N))
    H_full = model.seq("H", N)
    R_full = model.seq("R", N)
    Qeff = model.effective_q(N).copy()

    H, R, y = [], [], []
    removed = 0
    for n in range(N):
        keep = ~flags_y[n]
        removed += int(flags_y[n].sum())
        Rn = R_full[n]
        if keep.all():
            H.append(H_full[n])
            R.append(Rn)
            y.append(obs.y[n])
        elif _is_diag(Rn):
            H.append(H_full[n][keep])
            R.append(Rn[np.ix_(keep, keep)])
            y.append(obs.y[n][keep])
        else:
            bad = np.flatnonzero(flags_y[n])
            Rn = Rn.copy()
            Rn[bad, bad] += _INFLATION * np.diag(Rn)[bad]
            H.append(H_full[n])
            R.append(Rn)
            y.append(obs.y[n])

    dyn_offset = None
    if state_handling == "offset":
        if flags_x.any():
            dyn_offset = np.where(flags_x, drs_output.ox, 0.0)
    else:
        for n in range(N):
            bad = np.flatnonzero(flags_x[n])
            if bad.size:
                Qeff[n] = Qeff[n].copy()
                Qeff[n][bad, bad] += _INFLATION * np.maximum(np.diag(Qeff[n])[bad], 1.0)

    degenerate = all(h.shape[0] == 0 for h in H)
    if degenerate:
        warnings.warn("every measurement entry was flagged as an outlier; "
                      "returning the prior-propagated estimate")
    gains = SmootherGains(F, H, Qeff, R, np.asarray(model.m0),
                          np.asarray(model.Sigma0))
    xs = gains.smooth_means(y, dyn_offset)
    diagnostics = {
        "removed_measurement_entries": removed,
        "state_handling": state_handling,
        "degenerate": degenerate,
    }
    return SmootherOutput(x=xs, outliers=drs_output.outliers,
                          objective_trace=[], iterations=1, converged=True,
                          wall_time=time.perf_counter() - t0,
                          diagnostics=diagnostics)
