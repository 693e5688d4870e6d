import numpy as np
import pytest

from drsmooth.model import ObservationBatch, StateSpaceModel


def rand_spd(rng, d, diag=False):
    if diag:
        return np.diag(rng.uniform(0.5, 2.0, d))
    A = rng.standard_normal((d, d))
    return A @ A.T + 0.5 * d * np.eye(d)


def rand_model(rng, Dx, Dy, diag=False):
    """Random stable model with SPD covariances."""
    F = rng.standard_normal((Dx, Dx))
    rho = np.max(np.abs(np.linalg.eigvals(F)))
    if rho > 1e-9:
        F *= 0.9 / rho
    H = rng.standard_normal((Dy, Dx))
    return StateSpaceModel(Dx=Dx, Dy=Dy, F=F, H=H,
                           Q=rand_spd(rng, Dx, diag), R=rand_spd(rng, Dy, diag),
                           m0=rng.standard_normal(Dx),
                           Sigma0=rand_spd(rng, Dx))


def rand_instance(seed, N=None, Dx=None, Dy=None, diag=None, scale=3.0):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(2, 6)) if N is None else N
    Dx = int(rng.integers(1, 3)) if Dx is None else Dx
    Dy = int(rng.integers(1, 3)) if Dy is None else Dy
    diag = bool(rng.integers(0, 2)) if diag is None else diag
    model = rand_model(rng, Dx, Dy, diag)
    obs = ObservationBatch(rng.standard_normal((N, Dy)) * scale)
    return model, obs


def scalar_model(q=1.0, r=1.0, s0=1.0, f=1.0, h=1.0, m0=0.0):
    return StateSpaceModel(Dx=1, Dy=1, F=[[f]], H=[[h]], Q=[[q]], R=[[r]],
                           m0=[m0], Sigma0=[[s0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
