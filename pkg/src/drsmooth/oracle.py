"""Brute-force verification solvers, used by the test suite only.

Everything here is deliberately slow and simple: dense normal equations
for the plain smoother, plain proximal-gradient iterations for the robust
objective, and direct subgradient/KKT condition checkers.  None of it
shares code with the production solvers it certifies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ObservationBatch, OutlierField, StateSpaceModel

_MAX_DENSE_DIM = 2000


@dataclass
class OracleReport:
    """Violation magnitudes and optional oracle comparison values."""

    objective: float | None = None
    solution: object = None
    relative_gap: float | None = None
    violations: dict = field(default_factory=dict)

    @property
    def max_violation(self) -> float:
        return max(self.violations.values()) if self.violations else 0.0


def _dense_problem(model: StateSpaceModel, obs: ObservationBatch):
    """Dense stacked (M, c, W) with residual M z - c, z = [x; ox; oy]."""
    N, Dx, Dy = obs.N, model.Dx, model.Dy
    nx = (N + 1) * Dx
    nox = N * Dx
    noy = N * Dy
    dim = nx + nox + noy
    rows = Dx + N * Dx + N * Dy
    if dim > _MAX_DENSE_DIM:
        raise ValueError(f"dense oracle limited to {_MAX_DENSE_DIM} unknowns, got {dim}")
    F = model.seq("F", N)
    H = model.seq("H", N)
    Q = model.seq("Q", N)
    R = model.seq("R", N)
    M = np.zeros((rows, dim))
    c = np.zeros(rows)
    W = np.zeros((rows, rows))
    M[:Dx, :Dx] = np.eye(Dx)
    c[:Dx] = model.m0
    W[:Dx, :Dx] = np.linalg.inv(model.Sigma0)
    for n in range(1, N + 1):
        r0 = Dx + (n - 1) * Dx
        M[r0:r0 + Dx, (n - 1) * Dx:n * Dx] = -F[n - 1]
        M[r0:r0 + Dx, n * Dx:(n + 1) * Dx] = np.eye(Dx)
        M[r0:r0 + Dx, nx + (n - 1) * Dx:nx + n * Dx] = -np.eye(Dx)
        W[r0:r0 + Dx, r0:r0 + Dx] = np.linalg.inv(Q[n - 1])
        rm = Dx + N * Dx + (n - 1) * Dy
        M[rm:rm + Dy, n * Dx:(n + 1) * Dx] = H[n - 1]
        M[rm:rm + Dy, nx + nox + (n - 1) * Dy:nx + nox + n * Dy] = np.eye(Dy)
        c[rm:rm + Dy] = obs.y[n - 1]
        W[rm:rm + Dy, rm:rm + Dy] = np.linalg.inv(R[n - 1])
    return M, c, W, (nx, nox, noy)


def dense_wls(model: StateSpaceModel, obs: ObservationBatch,
              compensation: OutlierField | None = None) -> np.ndarray:
    """Exact minimizer of the stacked quadratic by a dense normal-equation solve."""
    N, Dx = obs.N, model.Dx
    M, c, W, (nx, nox, noy) = _dense_problem(model, obs)
    Mx = M[:, :nx]
    if compensation is not None:
        # state rows carry -o_x, measurement rows +o_y; fold into the target
        c = c - M[:, nx:] @ np.concatenate([compensation.ox.ravel(), compensation.oy.ravel()])
    normal = Mx.T @ W @ Mx
    rhs = Mx.T @ W @ c
    return np.linalg.solve(normal, rhs).reshape(N + 1, Dx)


def prox_grad_drs(model: StateSpaceModel, obs: ObservationBatch,
                  lambda_x: float, lambda_y: float,
                  iters: int = 400000, step: float | None = None,
                  tol: float = 1e-10, weights_x=None, weights_y=None):
    """High-accuracy proximal-gradient solve of the robust objective.

    Plain (unaccelerated) iterations with step 1/L, L estimated by power
    iteration; the objective sequence is monotone nonincreasing.  On
    detected divergence the step is halved and the run restarts from the
    best iterate (recorded in the log returned via the last element).
    Returns (x, ox, oy).
    """
    N, Dx, Dy = obs.N, model.Dx, model.Dy
    M, c, W, (nx, nox, noy) = _dense_problem(model, obs)
    hess = M.T @ W @ M
    g0 = M.T @ W @ c
    if step is None:
        step = 1.0 / _power_iteration(hess)
    wx = np.ones(nox) if weights_x is None else np.asarray(weights_x, float).ravel()
    wy = np.ones(noy) if weights_y is None else np.asarray(weights_y, float).ravel()
    thresh = np.concatenate([np.zeros(nx), lambda_x * wx, lambda_y * wy])

    def full_obj(z):
        r = M @ z - c
        return 0.5 * float(r @ W @ r) + float(thresh @ np.abs(z))

    z = np.zeros(M.shape[1])
    prev = full_obj(z)
    check_every = 50
    halvings = 0
    for k in range(1, iters + 1):
        grad = hess @ z - g0
        znew = z - step * grad
        znew = np.sign(znew) * np.maximum(np.abs(znew) - step * thresh, 0.0)
        z = znew
        if k % check_every == 0:
            cur = full_obj(z)
            if cur > prev + 1e-12 * max(1.0, abs(prev)):
                step *= 0.5
                halvings += 1
                if halvings > 60:
                    raise RuntimeError("proximal gradient failed to stabilize")
                continue
            if prev - cur <= tol * max(1.0, abs(cur)):
                break
            prev = cur
    x = z[:nx].reshape(N + 1, Dx)
    ox = z[nx:nx + nox].reshape(N, Dx)
    oy = z[nx + nox:].reshape(N, Dy)
    return x, ox, oy


def _power_iteration(A: np.ndarray, iters: int = 100) -> float:
    rng = np.random.default_rng(0)
    v = rng.standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        u = A @ v
        lam = float(np.linalg.norm(u))
        if lam == 0.0:
            return 1.0
        v = u / lam
    return lam * 1.01


def _stationarity_pieces(model, obs, x, ox, oy):
    N = obs.N
    F = model.seq("F", N)
    H = model.seq("H", N)
    Qi = np.linalg.inv(model.seq("Q", N))
    Ri = np.linalg.inv(model.seq("R", N))
    dyn = x[1:] - np.einsum("nij,nj->ni", F, x[:-1]) - ox
    meas = obs.y - np.einsum("nij,nj->ni", H, x[1:]) - oy
    sx = np.einsum("nij,nj->ni", Qi, dyn)
    sy = np.einsum("nij,nj->ni", Ri, meas)
    return F, H, sx, sy


def check_stationarity(model: StateSpaceModel, obs: ObservationBatch,
                       x, ox, oy, lambda_x: float, lambda_y: float,
                       weights_x=None, weights_y=None) -> OracleReport:
    """Subgradient optimality conditions of the robust objective.

    For each zero outlier coordinate the matching component of the
    inverse-covariance-weighted residual must not exceed the penalty
    weight; for each nonzero coordinate it must equal the signed penalty
    weight.  The trajectory block must have vanishing gradient.
    """
    N = obs.N
    F, H, sx, sy = _stationarity_pieces(model, obs, x, ox, oy)
    lx = lambda_x * (np.ones_like(ox) if weights_x is None else np.asarray(weights_x))
    ly = lambda_y * (np.ones_like(oy) if weights_y is None else np.asarray(weights_y))

    def block(s, o, lam):
        zero = o == 0.0
        v_zero = np.maximum(np.abs(s) - lam, 0.0)
        v_nonzero = np.abs(s - lam * np.sign(o))
        return float(np.max(np.where(zero, v_zero, v_nonzero), initial=0.0))

    grad = np.empty_like(x)
    s0i = np.linalg.inv(model.Sigma0)
    grad[0] = s0i @ (x[0] - model.m0) - F[0].T @ sx[0]
    for n in range(1, N):
        grad[n] = sx[n - 1] - F[n].T @ sx[n] - H[n - 1].T @ sy[n - 1]
    grad[N] = sx[N - 1] - H[N - 1].T @ sy[N - 1]

    violations = {
        "state_outliers": block(sx, ox, lx),
        "measurement_outliers": block(sy, oy, ly),
        "trajectory_gradient": float(np.max(np.abs(grad))),
    }
    return OracleReport(violations=violations)


def check_kkt_generalized(model: StateSpaceModel, obs: ObservationBatch,
                          x, w, ox, oy, chi,
                          lambda_x: float, lambda_y: float) -> OracleReport:
    """KKT conditions of the constrained robust smoothing problem.

    ``chi`` are the multipliers of the state-equation constraints.
    """
    N = obs.N
    F = model.seq("F", N)
    H = model.seq("H", N)
    G = model.seq("G", N) if model.G is not None else \
        np.broadcast_to(np.eye(model.Dx), (N, model.Dx, model.Dx))
    Qi = np.linalg.inv(model.seq("Q", N))
    Ri = np.linalg.inv(model.seq("R", N))
    meas = obs.y - np.einsum("nij,nj->ni", H, x[1:]) - oy
    sy = np.einsum("nij,nj->ni", Ri, meas)
    feas = x[1:] - np.einsum("nij,nj->ni", F, x[:-1]) \
        - np.einsum("nij,nj->ni", G, w) - ox

    grad_w = np.einsum("nij,nj->ni", Qi, w) - np.einsum("nji,nj->ni", G, chi)

    def block(s, o, lam):
        zero = o == 0.0
        v_zero = np.maximum(np.abs(s) - lam, 0.0)
        v_nonzero = np.abs(s - lam * np.sign(o))
        return float(np.max(np.where(zero, v_zero, v_nonzero), initial=0.0))

    grad_x = np.empty_like(x)
    s0i = np.linalg.inv(model.Sigma0)
    grad_x[0] = s0i @ (x[0] - model.m0) - F[0].T @ chi[0]
    for n in range(1, N):
        grad_x[n] = chi[n - 1] - F[n].T @ chi[n] - H[n - 1].T @ sy[n - 1]
    grad_x[N] = chi[N - 1] - H[N - 1].T @ sy[N - 1]

    violations = {
        "feasibility": float(np.max(np.abs(feas))),
        "noise_gradient": float(np.max(np.abs(grad_w))),
        "state_outliers": block(chi, ox, lambda_x * np.ones_like(ox)),
        "measurement_outliers": block(sy, oy, lambda_y * np.ones_like(oy)),
        "trajectory_gradient": float(np.max(np.abs(grad_x))),
    }
    return OracleReport(violations=violations)
