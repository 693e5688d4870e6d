"""Clairvoyant Kalman filter, fixed-interval smoother, and fixed-lag smoother.

The smoother is the forward-backward (filter + backward correction)
recursion; its output minimizes the weighted least-squares objective over
the whole trajectory.  Both directions cost O(N).

Covariance-dependent quantities (gains) depend only on the model, not on
the data, so they are computed once and cached; the robust solvers rerun
the cheap mean-only passes with freshly compensated data every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import csv
import time

import numpy as np
import scipy.linalg

from .errors import SingularityError
from .model import (ObservationBatch, OutlierField, StateSpaceModel,
                    check_compatible)
from .objective import quadratic_objective

_PINV_CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class FilterState:
    """Filtered and predicted means/covariances of one forward pass.

    Index n of the filtered arrays refers to time n (entry 0 is the prior);
    predicted arrays hold x_{n|n-1} for n = 1..N at index n-1.
    """

    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    predicted_means: np.ndarray
    predicted_covs: np.ndarray


@dataclass
class SmootherOutput:
    """Estimated trajectory with outlier fields and solver diagnostics."""

    x: np.ndarray
    outliers: OutlierField
    objective_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    wall_time: float = 0.0
    w_hat: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def ox(self) -> np.ndarray:
        return self.outliers.ox

    @property
    def oy(self) -> np.ndarray:
        return self.outliers.oy

    @property
    def objective(self) -> float | None:
        return self.objective_trace[-1] if self.objective_trace else None


class SmootherGains:
    """Gain cache for one measurement layout.

    Built from explicit per-step sequences so callers can substitute their
    own effective process covariance (the ADMM x-step smooths with a
    kappa-scaled identity).  ``filter_means``/``smooth_means`` then rerun
    the mean recursions only.
    """

    def __init__(self, F, H, Qeff, R, m0: np.ndarray, Sigma0: np.ndarray):
        N = len(F)
        Dx = F[0].shape[0]
        self.N, self.Dx = N, Dx
        self.F, self.H, self.m0 = F, H, m0
        self.pinv_steps: list[int] = []

        filt_cov = np.empty((N + 1, Dx, Dx))
        pred_cov = np.empty((N, Dx, Dx))
        gains: list[np.ndarray] = []
        filt_cov[0] = Sigma0
        eye = np.eye(Dx)
        for n in range(1, N + 1):
            Fn, Hn = F[n - 1], H[n - 1]
            Sp = Fn @ filt_cov[n - 1] @ Fn.T + Qeff[n - 1]
            Sp = 0.5 * (Sp + Sp.T)
            if Hn.shape[0] == 0:
                # no measurement rows this step; the update is a no-op
                filt_cov[n] = Sp
                pred_cov[n - 1] = Sp
                gains.append(np.zeros((Dx, 0)))
                continue
            S = Hn @ Sp @ Hn.T + R[n - 1]
            try:
                c, low = scipy.linalg.cho_factor(0.5 * (S + S.T))
            except scipy.linalg.LinAlgError:
                raise SingularityError(n, "innovation covariance not invertible")
            K = scipy.linalg.cho_solve((c, low), Hn @ Sp).T
            ImKH = eye - K @ Hn
            Sf = ImKH @ Sp @ ImKH.T + K @ R[n - 1] @ K.T
            filt_cov[n] = 0.5 * (Sf + Sf.T)
            pred_cov[n - 1] = Sp
            gains.append(K)
        back = np.empty((N, Dx, Dx))
        for n in range(N):
            # gain of the backward correction from step n+1 down to n
            cross = filt_cov[n] @ F[n].T
            if np.linalg.cond(pred_cov[n]) > _PINV_CONDITION_LIMIT:
                back[n] = cross @ np.linalg.pinv(pred_cov[n])
                self.pinv_steps.append(n + 1)
            else:
                back[n] = np.linalg.solve(pred_cov[n].T, cross.T).T
        self.filtered_covs = filt_cov
        self.predicted_covs = pred_cov
        self.kalman_gains = gains
        self.backward_gains = back
        # plain lists keep the mean-pass loops cheap
        self._F = [np.asarray(f) for f in F]
        self._H = [np.asarray(h) for h in H]
        self._K = [np.asarray(k) for k in gains]
        self._B = [back[n] for n in range(N)]

    @classmethod
    def for_model(cls, model: StateSpaceModel, N: int) -> "SmootherGains":
        return cls(model.seq("F", N), model.seq("H", N), model.effective_q(N),
                   model.seq("R", N), np.asarray(model.m0), np.asarray(model.Sigma0))

    def filter_means(self, y_eff, dyn_offset=None):
        N, Dx = self.N, self.Dx
        F, H, K = self._F, self._H, self._K
        xf = np.empty((N + 1, Dx))
        xp = np.empty((N, Dx))
        xf[0] = self.m0
        prev = xf[0]
        dot = np.dot
        for k in range(N):
            pred = dot(F[k], prev)
            if dyn_offset is not None:
                pred = pred + dyn_offset[k]
            xp[k] = pred
            prev = pred + dot(K[k], y_eff[k] - dot(H[k], pred))
            xf[k + 1] = prev
        return xf, xp

    def smooth_means(self, y_eff, dyn_offset=None, down_to: int = 0) -> np.ndarray:
        xf, xp = self.filter_means(y_eff, dyn_offset)
        xs = xf.copy()
        B = self._B
        dot = np.dot
        nxt = xs[self.N]
        for n in range(self.N - 1, down_to - 1, -1):
            nxt = xf[n] + dot(B[n], nxt - xp[n])
            xs[n] = nxt
        return xs

    def _smooth_means_batch(self, Y, D):
        """Smoothing pass over B stacked right-hand sides: Y (N,Dy,B), D (N,Dx,B)."""
        N, Dx = self.N, self.Dx
        B = Y.shape[-1]
        F, H, K, G = self._F, self._H, self._K, self._B
        xf = np.empty((N + 1, Dx, B))
        xp = np.empty((N, Dx, B))
        xf[0] = np.repeat(self.m0[:, None], B, axis=1)
        for k in range(N):
            pred = F[k] @ xf[k] + D[k]
            xp[k] = pred
            xf[k + 1] = pred + K[k] @ (Y[k] - H[k] @ pred)
        xs = xf.copy()
        for n in range(N - 1, -1, -1):
            xs[n] = xf[n] + G[n] @ (xs[n + 1] - xp[n])
        return xs

    def dense_operator(self):
        """Affine map of the smoothed means in the data and the offsets.

        Returns (c0, Ly, Ld) with
            smoothed = c0 + Ly @ y_eff.ravel() + Ld @ dyn_offset.ravel().
        Built once by batched basis passes; each later solve is two matrix
        products.  Memory grows quadratically with the horizon, so this is
        an opt-in path for repeated solves on one model (regularization
        paths, penalty iterations); the default recursion stays linear.
        """
        if getattr(self, "_dense_ops", None) is not None:
            return self._dense_ops
        N, Dx = self.N, self.Dx
        Dy = self._H[0].shape[0]
        ny, nd = N * Dy, N * Dx
        Y = np.zeros((N, Dy, 1 + ny + nd))
        D = np.zeros((N, Dx, 1 + ny + nd))
        for n in range(N):
            for d in range(Dy):
                Y[n, d, 1 + n * Dy + d] = 1.0
            for d in range(Dx):
                D[n, d, 1 + ny + n * Dx + d] = 1.0
        xs = self._smooth_means_batch(Y, D)
        flat = xs.reshape((N + 1) * Dx, 1 + ny + nd)
        c0 = flat[:, 0].copy()
        Ly = flat[:, 1:1 + ny] - c0[:, None]
        Ld = flat[:, 1 + ny:] - c0[:, None]
        self._dense_ops = (c0, Ly, Ld)
        return self._dense_ops

    def smooth_means_dense(self, y_eff, dyn_offset=None) -> np.ndarray:
        c0, Ly, Ld = self.dense_operator()
        x = c0 + Ly @ np.ravel(y_eff)
        if dyn_offset is not None:
            x = x + Ld @ np.ravel(dyn_offset)
        return x.reshape(self.N + 1, self.Dx)


def _compensated_data(obs: ObservationBatch, compensation: OutlierField | None):
    if compensation is None:
        return obs.y, None
    return obs.y - compensation.oy, compensation.ox


def kalman_filter(model: StateSpaceModel, obs: ObservationBatch,
                  compensation: OutlierField | None = None) -> FilterState:
    """Forward filter on outlier-compensated data.

    With a compensation field, the recursion runs on y_n - o_{y,n} with the
    prediction shifted by o_{x,n}.  Generalized models are handled through
    the effective process covariance G_n Q_n G_n^T, which the recursion
    never inverts.
    """
    model.require_valid(N=obs.N)
    check_compatible(model, obs)
    gains = SmootherGains.for_model(model, obs.N)
    y_eff, dyn = _compensated_data(obs, compensation)
    xf, xp = gains.filter_means(y_eff, dyn)
    return FilterState(filtered_means=xf, filtered_covs=gains.filtered_covs,
                       predicted_means=xp, predicted_covs=gains.predicted_covs)


def fixed_interval_ks(model: StateSpaceModel, obs: ObservationBatch,
                      compensation: OutlierField | None = None,
                      gains: SmootherGains | None = None) -> SmootherOutput:
    """Fixed-interval smoother (forward filter plus backward correction)."""
    t0 = time.perf_counter()
    if gains is None:
        model.require_valid(N=obs.N)
        check_compatible(model, obs)
        gains = SmootherGains.for_model(model, obs.N)
    y_eff, dyn = _compensated_data(obs, compensation)
    xs = gains.smooth_means(y_eff, dyn)
    trace = []
    if not model.generalized:
        ox = compensation.ox if compensation is not None else None
        oy = compensation.oy if compensation is not None else None
        trace.append(quadratic_objective(model, obs, xs, ox, oy))
    out = OutlierField.zeros(obs.N, model.Dx, model.Dy)
    diagnostics = {}
    if gains.pinv_steps:
        diagnostics["pinv_steps"] = list(gains.pinv_steps)
    return SmootherOutput(x=xs, outliers=out, objective_trace=trace, iterations=1,
                          converged=True, wall_time=time.perf_counter() - t0,
                          diagnostics=diagnostics)


def window_slice(model: StateSpaceModel, N: int, a: int, e: int,
                 anchor_mean: np.ndarray, anchor_cov: np.ndarray) -> StateSpaceModel:
    """Model over steps a+1..e with the anchor as prior at time a."""
    w = e - a
    kw = {}
    for name in ("F", "H", "Q", "R"):
        kw[name] = model.seq(name, N)[a:a + w]
    G = model.seq("G", N)[a:a + w] if model.G is not None else None
    return StateSpaceModel(Dx=model.Dx, Dy=model.Dy, m0=anchor_mean,
                           Sigma0=anchor_cov, G=G, **kw)


def fixed_lag_ks(model: StateSpaceModel, obs: ObservationBatch,
                 lag: int, window: int = 0) -> np.ndarray:
    """Per-step smoothed estimates using observations through n + lag.

    Each estimate is produced by smoothing the interval [n - window, n + lag]
    anchored at the filtered state at n - window; by the sufficiency of the
    filtered state the result does not depend on the window length.  Early
    steps shrink the window to the available history.
    """
    if lag < 0 or window < 0:
        raise ValueError("lag and window must be nonnegative")
    model.require_valid(N=obs.N)
    N = obs.N
    fs = kalman_filter(model, obs)
    out = np.empty((N + 1, model.Dx))
    for n in range(N + 1):
        a = max(n - window, 0)
        e = min(n + lag, N)
        if e == a:
            out[n] = fs.filtered_means[n]
            continue
        wm = window_slice(model, N, a, e, fs.filtered_means[a], fs.filtered_covs[a])
        wgains = SmootherGains.for_model(wm, e - a)
        xs = wgains.smooth_means(obs.y[a:e], down_to=n - a)
        out[n] = xs[n - a]
    return out


# ---------------------------------------------------------------------------
# Export helpers.


def write_smoother_csv(path, output: SmootherOutput) -> None:
    Dx = output.x.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n"] + [f"xhat_{i + 1}" for i in range(Dx)])
        for n, row in enumerate(output.x):
            wr.writerow([n] + [repr(float(v)) for v in row])


def smoother_to_json_dict(output: SmootherOutput, include_timing: bool = False) -> dict:
    d = {
        "iterations": output.iterations,
        "converged": output.converged,
        "objective_trace": [float(v) for v in output.objective_trace],
        "outlier_support": {
            "ox": int(np.count_nonzero(output.ox)),
            "oy": int(np.count_nonzero(output.oy)),
        },
        "flagged_steps": {
            "ox": (np.flatnonzero(np.any(output.ox != 0, axis=1)) + 1).tolist(),
            "oy": (np.flatnonzero(np.any(output.oy != 0, axis=1)) + 1).tolist(),
        },
        "top_measurement_outlier_steps": (
            np.argsort(np.abs(output.oy).max(axis=1))[::-1][:3] + 1).tolist(),
        "l1_radii": {
            "tau_x": float(np.abs(output.ox).sum()),
            "tau_y": float(np.abs(output.oy).sum()),
        },
        "diagnostics": {k: v for k, v in output.diagnostics.items()
                        if isinstance(v, (int, float, str, bool, list))},
    }
    if include_timing:
        d["wall_time"] = output.wall_time
    return d
