"""Stacked batch form of the smoothing problem.

Stacking the prior, the N state equations, and the N measurement equations
gives one big linear regression b = A x + noise whose weighted least-squares
minimizer is the fixed-interval smoother.  The normal-equation matrix
A^T Qw^-1 A is block tridiagonal with Dx-by-Dx blocks, so the batch solve
costs O(N) via a banded Cholesky factorization.

Row order: prior rows, then state rows n = 1..N, then measurement rows
n = 1..N.  Unknown order: x_0, x_1, ..., x_N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import GeneralizedModelError
from .model import (ObservationBatch, OutlierField, StateSpaceModel,
                    check_compatible)


class WhitenedStack:
    """Pre-whitened rows of the stacked regression, grouped by origin.

    Each group keeps per-scalar-row coefficient blocks so that weighted
    normal equations can be assembled vectorially for arbitrary per-row
    weights (used by the batch smoother, IRLS, and RANSAC).
    """

    def __init__(self, model: StateSpaceModel, obs: ObservationBatch):
        check_compatible(model, obs)
        if model.generalized:
            raise GeneralizedModelError(
                "stacked batch form requires an identity noise gain; "
                "use the ADMM solver for generalized models")
        N, Dx, Dy = obs.N, model.Dx, model.Dy
        self.N, self.Dx, self.Dy = N, Dx, Dy
        F = model.seq("F", N)
        H = model.seq("H", N)
        Lq = np.linalg.cholesky(model.seq("Q", N))
        Lr = np.linalg.cholesky(model.seq("R", N))
        L0 = np.linalg.cholesky(model.Sigma0)

        eye = np.broadcast_to(np.eye(Dx), (N, Dx, Dx))
        # prior rows: L0^-1 x_0 = L0^-1 m0
        self.prior_coef = scipy.linalg.solve_triangular(L0, np.eye(Dx), lower=True)
        self.prior_rhs = self.prior_coef @ model.m0
        # state rows n: Lq^-1 (x_n - F_n x_{n-1}) = 0, blocks (n-1, n)
        self.state_left = -np.linalg.solve(Lq, F)
        self.state_right = np.linalg.solve(Lq, eye)
        # measurement rows n: Lr^-1 H_n x_n = Lr^-1 y_n, block n
        self.meas_coef = np.linalg.solve(Lr, H)
        self.meas_rhs = np.linalg.solve(Lr, obs.y[..., None])[..., 0]
        self._lq = Lq
        self._lr = Lr

    def whiten_state_offsets(self, ox: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self._lq, ox[..., None])[..., 0]

    def whiten_meas_offsets(self, oy: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self._lr, oy[..., None])[..., 0]

    def normal_banded(self, state_weights=None, meas_weights=None,
                      state_rhs_extra=None, meas_rhs_extra=None):
        """Weighted normal equations in symmetric lower-banded storage.

        state_weights (N, Dx) and meas_weights (N, Dy) scale the squared
        whitened rows; None means all ones.  The extra rhs terms shift the
        targets of the whitened state/measurement rows (used to compensate
        outlier estimates).
        """
        N, Dx = self.N, self.Dx
        dim = (N + 1) * Dx
        bw = 2 * Dx - 1
        ab = np.zeros((bw + 1, dim))
        rhs = np.zeros(dim)

        ws = np.ones((N, Dx)) if state_weights is None else state_weights
        wm = np.ones((N, self.Dy)) if meas_weights is None else meas_weights

        sl, sr, mc = self.state_left, self.state_right, self.meas_coef
        diag = np.zeros((N + 1, Dx, Dx))
        upper = np.zeros((N, Dx, Dx))  # coupling block (n-1, n)
        diag[0] = self.prior_coef.T @ self.prior_coef
        diag[:N] += np.einsum("nid,ni,nie->nde", sl, ws, sl)
        diag[1:] += np.einsum("nid,ni,nie->nde", sr, ws, sr)
        upper[:] = np.einsum("nid,ni,nie->nde", sl, ws, sr)
        diag[1:] += np.einsum("nid,ni,nie->nde", mc, wm, mc)

        rhs[:Dx] = self.prior_coef.T @ self.prior_rhs
        st = np.zeros((N, Dx)) if state_rhs_extra is None else state_rhs_extra
        mt = self.meas_rhs if meas_rhs_extra is None else self.meas_rhs + meas_rhs_extra
        rhs_blocks = rhs.reshape(N + 1, Dx)
        rhs_blocks[:N] += np.einsum("nid,ni->nd", sl, ws * st)
        rhs_blocks[1:] += np.einsum("nid,ni->nd", sr, ws * st)
        rhs_blocks[1:] += np.einsum("nid,ni->nd", mc, wm * mt)

        for k in range(N + 1):
            base = k * Dx
            blk = diag[k]
            for c in range(Dx):
                m = Dx - c
                ab[:m, base + c] = blk[c:, c]
            if k < N:
                cb = upper[k].T  # rows of block (k+1, k)
                for c in range(Dx):
                    ab[Dx - c:2 * Dx - c, base + c] = cb[:, c]
        return ab, rhs

    def solve(self, state_weights=None, meas_weights=None,
              state_rhs_extra=None, meas_rhs_extra=None) -> np.ndarray:
        ab, rhs = self.normal_banded(state_weights, meas_weights,
                                     state_rhs_extra, meas_rhs_extra)
        x = scipy.linalg.solveh_banded(ab, rhs, lower=True)
        return x.reshape(self.N + 1, self.Dx)

    def residuals(self, x: np.ndarray, state_rhs_extra=None, meas_rhs_extra=None):
        """Whitened residuals (prior, state, measurement) at the stacked x."""
        pr = self.prior_rhs - self.prior_coef @ x[0]
        st = np.einsum("nij,nj->ni", self.state_left, x[:-1]) \
            + np.einsum("nij,nj->ni", self.state_right, x[1:])
        sr = -st if state_rhs_extra is None else state_rhs_extra - st
        mt = self.meas_rhs if meas_rhs_extra is None else self.meas_rhs + meas_rhs_extra
        mr = mt - np.einsum("nij,nj->ni", self.meas_coef, x[1:])
        return pr, sr, mr


@dataclass(frozen=True)
class BatchSystem:
    """Dense stacked regression with block-structure metadata.

    Attributes give the stacked observation vector b, regression matrix A,
    block-diagonal noise covariance Qw, and the (n, d) -> row index maps.
    """

    A: np.ndarray
    b: np.ndarray
    Qw: np.ndarray
    N: int
    Dx: int
    Dy: int
    stack: WhitenedStack

    def prior_row(self, d: int) -> int:
        return d

    def state_row(self, n: int, d: int) -> int:
        return self.Dx + (n - 1) * self.Dx + d

    def meas_row(self, n: int, d: int) -> int:
        return self.Dx + self.N * self.Dx + (n - 1) * self.Dy + d

    def col(self, n: int, d: int) -> int:
        return n * self.Dx + d

    def stacked_outliers(self, outliers: OutlierField) -> np.ndarray:
        """Outlier vector aligned with the stacked rows (zeros on prior rows)."""
        return np.concatenate([np.zeros(self.Dx), outliers.ox.ravel(), outliers.oy.ravel()])

    def normal_matrix(self) -> np.ndarray:
        Wi = np.linalg.inv(self.Qw)
        return self.A.T @ Wi @ self.A

    def solve(self, compensation: OutlierField | None = None) -> np.ndarray:
        """Batch WLS minimizer via banded Cholesky; equals the recursive smoother."""
        st = mt = None
        if compensation is not None:
            st = self.stack.whiten_state_offsets(compensation.ox)
            mt = self.stack.whiten_meas_offsets(-compensation.oy)
        return self.stack.solve(state_rhs_extra=st, meas_rhs_extra=mt)


def stack_batch(model: StateSpaceModel, obs: ObservationBatch) -> BatchSystem:
    """Assemble the stacked WLS problem for a non-generalized, valid model."""
    model.require_valid(N=obs.N)
    if model.generalized:
        raise GeneralizedModelError(
            "stack_batch requires an identity noise gain; "
            "use the ADMM solver for generalized models")
    N, Dx, Dy = obs.N, model.Dx, model.Dy
    F = model.seq("F", N)
    H = model.seq("H", N)
    Q = model.seq("Q", N)
    R = model.seq("R", N)
    rows = Dx + N * Dx + N * Dy
    cols = (N + 1) * Dx
    A = np.zeros((rows, cols))
    b = np.zeros(rows)
    Qw = np.zeros((rows, rows))

    A[:Dx, :Dx] = np.eye(Dx)
    b[:Dx] = model.m0
    Qw[:Dx, :Dx] = model.Sigma0
    # state rows carry [+F, -I] so that (b - A x) is x_n - F_n x_{n-1} and
    # the stacked outlier vector subtracts with the conventional sign
    for n in range(1, N + 1):
        r0 = Dx + (n - 1) * Dx
        A[r0:r0 + Dx, (n - 1) * Dx:n * Dx] = F[n - 1]
        A[r0:r0 + Dx, n * Dx:(n + 1) * Dx] = -np.eye(Dx)
        Qw[r0:r0 + Dx, r0:r0 + Dx] = Q[n - 1]
        m0r = Dx + N * Dx + (n - 1) * Dy
        A[m0r:m0r + Dy, n * Dx:(n + 1) * Dx] = H[n - 1]
        b[m0r:m0r + Dy] = obs.y[n - 1]
        Qw[m0r:m0r + Dy, m0r:m0r + Dy] = R[n - 1]
    return BatchSystem(A=A, b=b, Qw=Qw, N=N, Dx=Dx, Dy=Dy,
                       stack=WhitenedStack(model, obs))
