"""Data-driven selection of the regularization weights (lambda_x, lambda_y).

Above the critical bounds computed from the plain smoother's residuals the
robust smoother collapses to the plain one with zero outlier estimates, so
candidate values live on a log-spaced grid hanging from those bounds.  The
grid is traversed from the most regularized corner with warm starts, and a
point is selected either by matching a known contamination fraction or by
driving the pre-whitened residual sample variance to one (absolute
variance deviation, AVD).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import csv
import warnings

import numpy as np

from .coordinate import DrsConfig, drs_fixed_interval
from .errors import GeneralizedModelError, SelectionError
from .kalman import SmootherGains, SmootherOutput, fixed_interval_ks
from .model import ObservationBatch, StateSpaceModel
from .objective import PrecomputedInverses


def lambda_bounds(model: StateSpaceModel, obs: ObservationBatch) -> tuple[float, float]:
    """Critical (lambda_x, lambda_y) above which the robust smoother equals
    the plain smoother.

    Computed from a fresh smoother run as the largest inverse-covariance-
    weighted dynamics and measurement residual components.
    """
    if model.generalized:
        raise GeneralizedModelError(
            "the critical bounds weight the dynamics residual by the inverse "
            "process covariance, which requires an identity noise gain")
    N = obs.N
    ks = fixed_interval_ks(model, obs)
    inv = PrecomputedInverses(model, N)
    F = model.seq("F", N)
    H = model.seq("H", N)
    dyn = ks.x[1:] - np.einsum("nij,nj->ni", F, ks.x[:-1])
    meas = obs.y - np.einsum("nij,nj->ni", H, ks.x[1:])
    bar_x = float(np.max(np.abs(np.einsum("nij,nj->ni", inv.Qi, dyn))))
    bar_y = float(np.max(np.abs(np.einsum("nij,nj->ni", inv.Ri, meas))))
    return bar_x, bar_y


@dataclass(frozen=True)
class LambdaGrid:
    """Log-spaced candidate points per axis, sorted descending from the bound."""

    bound_x: float
    bound_y: float
    points_x: np.ndarray
    points_y: np.ndarray
    floor_ratio: float

    @property
    def Ix(self) -> int:
        return len(self.points_x)

    @property
    def Iy(self) -> int:
        return len(self.points_y)


def _axis(bound: float, count: int, floor_ratio: float, name: str) -> np.ndarray:
    if bound == 0.0:
        warnings.warn(f"{name} bound is zero (residuals vanished); "
                      "axis degenerates to the single point 0")
        return np.array([0.0])
    if count == 1:
        return np.array([bound])
    pts = np.geomspace(bound, bound * floor_ratio, count)
    pts[0] = bound
    return pts


def build_grid(bounds: tuple[float, float], Ix: int = 10, Iy: int = 10,
               floor_ratio: float = 1e-3) -> LambdaGrid:
    """Log-equispaced grid from each bound down to bound * floor_ratio."""
    if Ix < 1 or Iy < 1:
        raise ValueError("grid counts must be at least 1")
    if not 0.0 < floor_ratio < 1.0:
        raise ValueError("floor_ratio must lie in (0, 1)")
    bx, by = bounds
    return LambdaGrid(bound_x=bx, bound_y=by,
                      points_x=_axis(bx, Ix, floor_ratio, "lambda_x"),
                      points_y=_axis(by, Iy, floor_ratio, "lambda_y"),
                      floor_ratio=floor_ratio)


@dataclass
class PathResult:
    """Per-grid-point solutions of the warm-started regularization path."""

    grid: LambdaGrid
    outputs: dict = field(default_factory=dict)     # (ix, iy) -> SmootherOutput
    failures: dict = field(default_factory=dict)    # (ix, iy) -> message
    total_sweeps: int = 0


def solve_path(model: StateSpaceModel, obs: ObservationBatch, grid: LambdaGrid,
               solver=None, tol: float = 1e-10, max_sweeps: int = 500,
               warm_start: bool = True, use_dense_ops: bool = False) -> PathResult:
    """Solve the robust smoothing problem at every grid point.

    Traversal runs from the most regularized corner, decreasing lambda_x
    within decreasing lambda_y; each solve starts from the outlier fields
    of the nearest previously solved point.  Individual failures are
    recorded and traversal continues.  ``use_dense_ops`` shares one cached
    affine smoothing operator across all grid points, trading memory for
    speed on long horizons.
    """
    result = PathResult(grid=grid)
    gains = SmootherGains.for_model(model, obs.N)
    if solver is None:
        def solver(lmx, lmy, init):
            cfg = DrsConfig(lambda_x=lmx, lambda_y=lmy, tol=tol, max_sweeps=max_sweeps)
            return drs_fixed_interval(model, obs, cfg, init=init, gains=gains,
                                      use_dense_ops=use_dense_ops,
                                      trace_blocks=False)
    for iy, lmy in enumerate(grid.points_y):
        for ix, lmx in enumerate(grid.points_x):
            init = None
            if warm_start:
                if ix > 0 and (ix - 1, iy) in result.outputs:
                    prev = result.outputs[(ix - 1, iy)]
                elif iy > 0 and (0, iy - 1) in result.outputs:
                    prev = result.outputs[(0, iy - 1)]
                else:
                    prev = None
                if prev is not None:
                    init = (prev.ox, prev.oy)
            try:
                out = solver(float(lmx), float(lmy), init)
            except Exception as exc:  # record and continue the traversal
                result.failures[(ix, iy)] = f"{type(exc).__name__}: {exc}"
                continue
            result.outputs[(ix, iy)] = out
            result.total_sweeps += out.iterations
    return result


@dataclass
class SelectionResult:
    """Chosen grid point with the per-point criterion surface."""

    ix: int
    iy: int
    lambda_x: float
    lambda_y: float
    criterion: np.ndarray    # (Ix, Iy), NaN at failed points
    frac_ox: np.ndarray
    frac_oy: np.ndarray
    sigma2: np.ndarray
    output: SmootherOutput
    grid: LambdaGrid


def avd_sigma2(model: StateSpaceModel, obs: ObservationBatch,
               x: np.ndarray, ox: np.ndarray, oy: np.ndarray,
               w: np.ndarray | None = None,
               inverses: PrecomputedInverses | None = None) -> float:
    """Sample variance of the pre-whitened estimated residuals.

    Accurate outlier estimates leave residuals with the nominal noise
    statistics, making this quantity approach one.  The denominator is
    exactly N*Dy + (N+1)*Dx.  For generalized models pass the explicit
    process-noise estimate ``w``.
    """
    N, Dx, Dy = obs.N, model.Dx, model.Dy
    inv = inverses if inverses is not None else PrecomputedInverses(model, N)
    F = model.seq("F", N)
    H = model.seq("H", N)
    v = obs.y - np.einsum("nij,nj->ni", H, x[1:]) - oy
    if w is None:
        w = x[1:] - np.einsum("nij,nj->ni", F, x[:-1]) - ox
    w0 = x[0] - model.m0
    num = float(w0 @ inv.S0i @ w0)
    num += float(np.einsum("ni,nij,nj->", v, inv.Ri, v))
    num += float(np.einsum("ni,nij,nj->", w, inv.Qi, w))
    return num / (N * Dy + (N + 1) * Dx)


def _surfaces(path: PathResult, model: StateSpaceModel, obs: ObservationBatch):
    grid = path.grid
    frac_x = np.full((grid.Ix, grid.Iy), np.nan)
    frac_y = np.full((grid.Ix, grid.Iy), np.nan)
    sigma2 = np.full((grid.Ix, grid.Iy), np.nan)
    inv = PrecomputedInverses(model, obs.N)
    for (ix, iy), out in path.outputs.items():
        fx, fy = out.outliers.support_fractions()
        frac_x[ix, iy] = fx
        frac_y[ix, iy] = fy
        sigma2[ix, iy] = avd_sigma2(model, obs, out.x, out.ox, out.oy,
                                    w=out.w_hat, inverses=inv)
    return frac_x, frac_y, sigma2


def _pick(path: PathResult, criterion: np.ndarray):
    """Minimizing grid point; ties go to the most regularized candidate."""
    grid = path.grid
    if not path.outputs:
        raise SelectionError("no valid grid points to select from")
    best = np.nanmin(criterion)
    if not np.isfinite(best):
        raise SelectionError("criterion undefined at every grid point")
    cands = [(ix, iy) for (ix, iy) in path.outputs
             if criterion[ix, iy] == best]
    return max(cands, key=lambda p: grid.points_x[p[0]] + grid.points_y[p[1]])


def _build_result(path, model, obs, criterion) -> SelectionResult:
    frac_x, frac_y, sigma2 = _surfaces(path, model, obs)
    ix, iy = _pick(path, criterion)
    grid = path.grid
    return SelectionResult(ix=ix, iy=iy,
                           lambda_x=float(grid.points_x[ix]),
                           lambda_y=float(grid.points_y[iy]),
                           criterion=criterion, frac_ox=frac_x, frac_oy=frac_y,
                           sigma2=sigma2, output=path.outputs[(ix, iy)], grid=grid)


def select_known_fraction(path: PathResult, model: StateSpaceModel,
                          obs: ObservationBatch,
                          pi_ox: float, pi_oy: float) -> SelectionResult:
    """Pick the point whose outlier-support fractions best match the known
    contamination fractions (counted per scalar entry)."""
    if not 0.0 <= pi_ox <= 1.0 or not 0.0 <= pi_oy <= 1.0:
        raise ValueError("contamination fractions must lie in [0, 1]")
    frac_x, frac_y, _ = _surfaces(path, model, obs)
    criterion = np.abs(pi_ox - frac_x) + np.abs(pi_oy - frac_y)
    return _build_result(path, model, obs, criterion)


def select_avd(path: PathResult, model: StateSpaceModel,
               obs: ObservationBatch) -> SelectionResult:
    """Pick the point whose pre-whitened residual variance is closest to one."""
    _, _, sigma2 = _surfaces(path, model, obs)
    criterion = np.abs(1.0 - sigma2)
    return _build_result(path, model, obs, criterion)


def selection_to_csv(path_or_file, result: SelectionResult) -> None:
    """Write the (ix, iy) criterion table for heat-map plotting."""
    grid = result.grid
    with open(path_or_file, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ix", "iy", "lambda_x", "lambda_y", "criterion",
                     "frac_ox", "frac_oy", "sigma2"])
        for ix in range(grid.Ix):
            for iy in range(grid.Iy):
                wr.writerow([ix, iy,
                             repr(float(grid.points_x[ix])),
                             repr(float(grid.points_y[iy])),
                             repr(float(result.criterion[ix, iy])),
                             repr(float(result.frac_ox[ix, iy])),
                             repr(float(result.frac_oy[ix, iy])),
                             repr(float(result.sigma2[ix, iy]))])
