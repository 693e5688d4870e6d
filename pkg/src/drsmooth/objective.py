"""Weighted least-squares objective shared by the smoothers.

The quadratic part is

    1/2 sum_n ||y_n - H_n x_n - o_{y,n}||^2_{R_n^-1}
  + 1/2 sum_n ||x_n - F_n x_{n-1} - o_{x,n}||^2_{Q_n^-1}
  + 1/2 ||x_0 - m0||^2_{Sigma0^-1}

evaluated over the full horizon; the robust smoothers add l1 penalties on
the outlier fields.
"""

from __future__ import annotations

import numpy as np

from .model import ObservationBatch, StateSpaceModel


class PrecomputedInverses:
    """Cholesky-derived Q_n^-1, R_n^-1, Sigma0^-1 for one horizon."""

    def __init__(self, model: StateSpaceModel, N: int):
        self.Qi = _spd_inverse(model.seq("Q", N))
        self.Ri = _spd_inverse(model.seq("R", N))
        self.S0i = _spd_inverse(model.Sigma0[None])[0]


def _spd_inverse(mats: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(mats)
    eye = np.broadcast_to(np.eye(mats.shape[-1]), mats.shape)
    half = np.linalg.solve(L, eye)
    return np.einsum("...ki,...kj->...ij", half, half)


def quadratic_objective(model: StateSpaceModel, obs: ObservationBatch,
                        x: np.ndarray, ox=None, oy=None,
                        inverses: PrecomputedInverses | None = None) -> float:
    N = obs.N
    inv = inverses if inverses is not None else PrecomputedInverses(model, N)
    F = model.seq("F", N)
    H = model.seq("H", N)
    wr = x[1:] - np.einsum("nij,nj->ni", F, x[:-1])
    if ox is not None:
        wr = wr - ox
    vr = obs.y - np.einsum("nij,nj->ni", H, x[1:])
    if oy is not None:
        vr = vr - oy
    p0 = x[0] - model.m0
    val = 0.5 * float(p0 @ inv.S0i @ p0)
    val += 0.5 * float(np.einsum("ni,nij,nj->", wr, inv.Qi, wr))
    val += 0.5 * float(np.einsum("ni,nij,nj->", vr, inv.Ri, vr))
    return val
