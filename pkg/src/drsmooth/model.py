"""Linear state-space model, validation, and contaminated-trajectory simulation.

The model is the discrete-time linear dynamical process

    x_n = F_n x_{n-1} + G_n w_n + o_{x,n},      w_n ~ N(0, Q_n)
    y_n = H_n x_n + v_n + o_{y,n},              v_n ~ N(0, R_n)

with Gaussian prior x_0 ~ N(m0, Sigma0).  The sparse vectors o_x and o_y
are outliers in the state dynamics and in the measurements; the smoothers
in this package estimate them jointly with the state.

System matrices may be given either as a single time-invariant matrix or
as a length-N sequence.  Models whose noise gain G_n differs from the
identity are flagged "generalized" and are only accepted by the ADMM
solver; every other solver requires G = I.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import csv

import numpy as np

from .errors import ModelValidationError


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _as_matrix_seq(M, name: str):
    """Normalize a matrix argument to either a 2-D array or a 3-D stack."""
    a = np.array(M, dtype=float)
    if a.ndim not in (2, 3):
        raise ValueError(f"{name} must be a matrix or a sequence of matrices")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StateSpaceModel:
    """Per-step system matrices, noise covariances, and Gaussian prior."""

    Dx: int
    Dy: int
    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    Sigma0: np.ndarray
    G: np.ndarray | None = None
    Dw: int = 0

    def __post_init__(self):
        object.__setattr__(self, "F", _as_matrix_seq(self.F, "F"))
        object.__setattr__(self, "H", _as_matrix_seq(self.H, "H"))
        object.__setattr__(self, "Q", _as_matrix_seq(self.Q, "Q"))
        object.__setattr__(self, "R", _as_matrix_seq(self.R, "R"))
        object.__setattr__(self, "m0", _freeze(np.atleast_1d(self.m0)))
        object.__setattr__(self, "Sigma0", _freeze(np.atleast_2d(self.Sigma0)))
        if self.G is not None:
            object.__setattr__(self, "G", _as_matrix_seq(self.G, "G"))
        if self.Dw == 0:
            dw = self.G.shape[-1] if self.G is not None else self.Dx
            object.__setattr__(self, "Dw", int(dw))

    @property
    def generalized(self) -> bool:
        """True when the noise gain is not the Dx-identity."""
        if self.G is None:
            return False
        if self.G.ndim == 2:
            return not (self.G.shape == (self.Dx, self.Dx)
                        and np.array_equal(self.G, np.eye(self.Dx)))
        return any(not (g.shape == (self.Dx, self.Dx) and np.array_equal(g, np.eye(self.Dx)))
                   for g in self.G)

    def seq(self, name: str, N: int) -> np.ndarray:
        """Matrix sequence for steps 1..N as an (N, r, c) array (broadcast if single)."""
        a = getattr(self, name)
        if a is None:
            a = np.eye(self.Dx)
        if a.ndim == 2:
            return np.broadcast_to(a, (N,) + a.shape)
        if a.shape[0] != N:
            raise ValueError(f"{name} sequence has length {a.shape[0]}, expected {N}")
        return a

    def effective_q(self, N: int) -> np.ndarray:
        """State-space process covariance G_n Q_n G_n^T for steps 1..N.

        May be singular for a generalized model; the filter recursion never
        inverts it.
        """
        Q = self.seq("Q", N)
        if self.G is None:
            return Q
        G = self.seq("G", N)
        return np.einsum("nij,njk,nlk->nil", G, Q, G)

    def require_valid(self, N: int | None = None) -> None:
        report = validate(self, N=N)
        if not report.ok:
            raise ModelValidationError(report.issues)


def check_compatible(model: StateSpaceModel, obs: "ObservationBatch") -> None:
    """Raise when the observation dimension disagrees with the model."""
    if obs.Dy != model.Dy:
        raise ModelValidationError(
            [f"observation dimension {obs.Dy} != model measurement dimension {model.Dy}"])


@dataclass(frozen=True)
class ObservationBatch:
    """Measurement sequence y_1..y_N."""

    y: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observations must be finite")

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def Dy(self) -> int:
        return self.y.shape[1]


@dataclass(frozen=True)
class OutlierField:
    """Sparse state/measurement outlier estimates, one row per step 1..N."""

    ox: np.ndarray
    oy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ox", _freeze(np.atleast_2d(self.ox)))
        object.__setattr__(self, "oy", _freeze(np.atleast_2d(self.oy)))

    @staticmethod
    def zeros(N: int, Dx: int, Dy: int) -> "OutlierField":
        return OutlierField(np.zeros((N, Dx)), np.zeros((N, Dy)))

    def support_counts(self) -> tuple[int, int]:
        """Number of exactly-nonzero entries in (ox, oy)."""
        return int(np.count_nonzero(self.ox)), int(np.count_nonzero(self.oy))

    def support_fractions(self) -> tuple[float, float]:
        cx, cy = self.support_counts()
        return cx / self.ox.size, cy / self.oy.size


@dataclass
class ValidationReport:
    issues: list[str] = field(default_factory=list)
    generalized: bool = False

    @property
    def ok(self) -> bool:
        return not self.issues


def _is_spd(a: np.ndarray) -> bool:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        return False
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


def validate(model: StateSpaceModel, N: int | None = None) -> ValidationReport:
    """Check every model invariant; reports violations instead of raising.

    Positive definiteness is established by attempted Cholesky factorization.
    When N is given, sequence lengths are checked against it.
    """
    report = ValidationReport()
    issues = report.issues
    Dx, Dy, Dw = model.Dx, model.Dy, model.Dw

    def each(name, expected_shape):
        a = getattr(model, name)
        if a is None:
            return
        mats = a[None] if a.ndim == 2 else a
        if a.ndim == 3 and N is not None and a.shape[0] != N:
            issues.append(f"{name} sequence length {a.shape[0]} != horizon {N}")
        for i, m in enumerate(mats):
            if m.shape != expected_shape:
                issues.append(f"{name}[{i}] has shape {m.shape}, expected {expected_shape}")
                return
        return mats

    each("F", (Dx, Dx))
    each("H", (Dy, Dx))
    g_mats = each("G", (Dx, Dw))
    q_mats = each("Q", (Dw, Dw))
    r_mats = each("R", (Dy, Dy))

    if model.m0.shape != (Dx,):
        issues.append(f"m0 has shape {model.m0.shape}, expected ({Dx},)")
    if model.Sigma0.shape != (Dx, Dx):
        issues.append(f"Sigma0 has shape {model.Sigma0.shape}, expected ({Dx}, {Dx})")
    elif not _is_spd(model.Sigma0):
        issues.append("Sigma0 is not symmetric positive definite")

    for name, mats in (("Q", q_mats), ("R", r_mats)):
        if mats is None:
            continue
        for i, m in enumerate(mats):
            if not _is_spd(m):
                issues.append(f"{name}[{i}] is not symmetric positive definite")

    if g_mats is not None:
        report.generalized = model.generalized
    return report


# ---------------------------------------------------------------------------
# Kinematic template: position/velocity target model in two planar coordinates
# driven by white acceleration noise (discrete white noise acceleration, DWNA).


def dwna_model(tau: float = 1.0,
               accel_var: float = 0.5,
               meas_var: float = 150.0 ** 2,
               m0=None,
               sigma0_diag=(50.0, 5.0, 50.0, 5.0),
               identity_gain: bool = False,
               q_diag=None) -> StateSpaceModel:
    """Planar position/velocity tracking model with sampling period tau.

    The state is [px, sx, py, sy]; measurements are the two positions.
    By default the acceleration noise enters through the tall kinematic
    gain matrix, producing a generalized model.  With ``identity_gain``
    the gain is the identity and ``q_diag`` gives the full 4-dim process
    noise variances.
    """
    if tau <= 0:
        raise ValueError("sampling period must be positive")
    F = np.array([[1.0, tau, 0.0, 0.0],
                  [0.0, 1.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0, tau],
                  [0.0, 0.0, 0.0, 1.0]])
    H = np.array([[1.0, 0.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0, 0.0]])
    R = meas_var * np.eye(2)
    m0 = np.zeros(4) if m0 is None else np.asarray(m0, dtype=float)
    Sigma0 = np.diag(sigma0_diag)
    if identity_gain:
        q = np.diag(q_diag if q_diag is not None else (1.0, 0.001, 1.0, 0.001))
        return StateSpaceModel(Dx=4, Dy=2, F=F, H=H, Q=q, R=R, m0=m0, Sigma0=Sigma0)
    G = np.array([[tau ** 2 / 2, 0.0],
                  [tau, 0.0],
                  [0.0, tau ** 2 / 2],
                  [0.0, tau]])
    Q = accel_var * np.eye(2)
    return StateSpaceModel(Dx=4, Dy=2, F=F, H=H, Q=Q, R=R, m0=m0, Sigma0=Sigma0, G=G)


# ---------------------------------------------------------------------------
# Scenario configuration and simulation.


@dataclass(frozen=True)
class OutlierModel:
    """Contamination recipe for one side (state or measurement).

    kinds:
      none             - no outliers
      additive_laplace - per scalar entry, with ``prob``, Laplacian of ``variance``
      additive_uniform - per scalar entry, with ``prob``, uniform of ``variance``
      replace_uniform  - per step, with ``prob`` the whole report is redrawn
                         uniformly on [low, high] per coordinate
      fixed_replace    - measurements at the listed steps are set to the given
                         values (deterministic events)
    """

    kind: str = "none"
    prob: float = 0.0
    variance: float = 0.0
    low: float = 0.0
    high: float = 0.0
    events: tuple = ()

    def __post_init__(self):
        if self.kind not in ("none", "additive_laplace", "additive_uniform",
                             "replace_uniform", "fixed_replace"):
            raise ValueError(f"unknown outlier model kind {self.kind!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("outlier probability must lie in [0, 1]")


@dataclass(frozen=True)
class ScenarioConfig:
    """Simulation recipe: model, horizon, maneuvers, contamination, seed.

    ``maneuvers`` is a tuple of (step, state increment) pairs applied as
    additive state outliers at the scheduled steps.  When
    ``trajectory_seed`` is set, the true trajectory (initial state, process
    noise, maneuvers) is drawn from that dedicated seed so Monte-Carlo
    replications redraw only the measurement noise and the outliers.
    """

    model: StateSpaceModel
    N: int
    seed: int = 0
    maneuvers: tuple = ()
    meas_outliers: OutlierModel = OutlierModel()
    state_outliers: OutlierModel = OutlierModel()
    trajectory_seed: int | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        object.__setattr__(self, "maneuvers",
                           tuple((int(n), np.asarray(d, dtype=float)) for n, d in self.maneuvers))

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return ScenarioConfig(model=self.model, N=self.N, seed=seed,
                              maneuvers=self.maneuvers,
                              meas_outliers=self.meas_outliers,
                              state_outliers=self.state_outliers,
                              trajectory_seed=self.trajectory_seed)


def _chol_seq(mats: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(mats)


def draw_process_noise(rng: np.random.Generator, Q: np.ndarray, N: int) -> np.ndarray:
    """N i.i.d. draws from N(0, Q), via the Cholesky factor of Q."""
    L = np.linalg.cholesky(Q)
    return rng.standard_normal((N, Q.shape[0])) @ L.T


def _laplace_scale(variance: float) -> float:
    return np.sqrt(variance / 2.0)


def _uniform_halfwidth(variance: float) -> float:
    return np.sqrt(3.0 * variance)


def _draw_additive(rng: np.random.Generator, om: OutlierModel, N: int, D: int) -> np.ndarray:
    out = np.zeros((N, D))
    if om.kind == "none" or om.kind in ("replace_uniform", "fixed_replace"):
        return out
    mask = rng.random((N, D)) < om.prob
    k = int(mask.sum())
    if k == 0:
        return out
    if om.kind == "additive_laplace":
        vals = rng.laplace(0.0, _laplace_scale(om.variance), size=k)
    else:
        a = _uniform_halfwidth(om.variance)
        vals = rng.uniform(-a, a, size=k)
    out[mask] = vals
    return out


def simulate(cfg: ScenarioConfig):
    """Simulate a contaminated trajectory.

    Returns (true states of shape (N+1, Dx), ObservationBatch, ground-truth
    OutlierField).  Deterministic given the seed; the named RNG streams
    (trajectory, measurement noise, measurement outliers, state outliers)
    are split from the master seed so they do not interact.
    """
    model, N = cfg.model, cfg.N
    model.require_valid(N=N)
    ss = np.random.SeedSequence(cfg.seed)
    traj_ss, meas_ss, oy_ss, ox_ss = ss.spawn(4)
    if cfg.trajectory_seed is not None:
        traj_ss = np.random.SeedSequence(cfg.trajectory_seed)
    rng_traj = np.random.default_rng(traj_ss)
    rng_meas = np.random.default_rng(meas_ss)
    rng_oy = np.random.default_rng(oy_ss)
    rng_ox = np.random.default_rng(ox_ss)

    Dx, Dy = model.Dx, model.Dy
    F = model.seq("F", N)
    H = model.seq("H", N)
    G = model.seq("G", N) if model.G is not None else None
    Lq = _chol_seq(model.seq("Q", N))
    Lr = _chol_seq(model.seq("R", N))
    L0 = np.linalg.cholesky(model.Sigma0)

    ox = _draw_additive(rng_ox, cfg.state_outliers, N, Dx)
    for n, delta in cfg.maneuvers:
        if not 1 <= n <= N:
            raise ValueError(f"maneuver step {n} outside 1..{N}")
        ox[n - 1] = ox[n - 1] + delta

    x = np.empty((N + 1, Dx))
    x[0] = model.m0 + L0 @ rng_traj.standard_normal(Dx)
    w = rng_traj.standard_normal((N, model.Dw))
    for n in range(1, N + 1):
        wn = Lq[n - 1] @ w[n - 1]
        drive = G[n - 1] @ wn if G is not None else wn
        x[n] = F[n - 1] @ x[n - 1] + drive + ox[n - 1]

    v = (Lr @ rng_meas.standard_normal((N, Dy))[..., None])[..., 0]
    clean = np.einsum("nij,nj->ni", H, x[1:]) + v
    y = clean.copy()
    oy = np.zeros((N, Dy))

    om = cfg.meas_outliers
    if om.kind == "replace_uniform":
        hit = rng_oy.random(N) < om.prob
        draws = rng_oy.uniform(om.low, om.high, size=(N, Dy))
        y[hit] = draws[hit]
        oy[hit] = y[hit] - clean[hit]
    elif om.kind == "fixed_replace":
        for n, values in om.events:
            n = int(n)
            if not 1 <= n <= N:
                raise ValueError(f"fixed outlier step {n} outside 1..{N}")
            y[n - 1] = np.asarray(values, dtype=float)
            oy[n - 1] = y[n - 1] - clean[n - 1]
    elif om.kind in ("additive_laplace", "additive_uniform"):
        oy = _draw_additive(rng_oy, om, N, Dy)
        y = clean + oy

    return x, ObservationBatch(y), OutlierField(ox, oy)


# ---------------------------------------------------------------------------
# Serialization: JSON-compatible dicts and trajectory CSV.


def _mat_to_list(a):
    return None if a is None else a.tolist()


def model_to_dict(model: StateSpaceModel) -> dict:
    return {
        "Dx": model.Dx, "Dy": model.Dy, "Dw": model.Dw,
        "F": _mat_to_list(model.F), "G": _mat_to_list(model.G),
        "H": _mat_to_list(model.H), "Q": _mat_to_list(model.Q),
        "R": _mat_to_list(model.R), "m0": model.m0.tolist(),
        "Sigma0": model.Sigma0.tolist(),
    }


def model_from_dict(d: dict) -> StateSpaceModel:
    return StateSpaceModel(
        Dx=int(d["Dx"]), Dy=int(d["Dy"]),
        F=np.asarray(d["F"], dtype=float),
        H=np.asarray(d["H"], dtype=float),
        Q=np.asarray(d["Q"], dtype=float),
        R=np.asarray(d["R"], dtype=float),
        m0=np.asarray(d["m0"], dtype=float),
        Sigma0=np.asarray(d["Sigma0"], dtype=float),
        G=None if d.get("G") is None else np.asarray(d["G"], dtype=float),
    )


def outlier_model_to_dict(om: OutlierModel) -> dict:
    return {"kind": om.kind, "prob": om.prob, "variance": om.variance,
            "low": om.low, "high": om.high,
            "events": [[int(n), np.asarray(v, dtype=float).tolist()] for n, v in om.events]}


def outlier_model_from_dict(d: dict) -> OutlierModel:
    return OutlierModel(kind=d.get("kind", "none"), prob=float(d.get("prob", 0.0)),
                        variance=float(d.get("variance", 0.0)),
                        low=float(d.get("low", 0.0)), high=float(d.get("high", 0.0)),
                        events=tuple((int(n), v) for n, v in d.get("events", [])))


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    return {
        "model": model_to_dict(cfg.model),
        "N": cfg.N, "seed": cfg.seed,
        "trajectory_seed": cfg.trajectory_seed,
        "maneuvers": [[int(n), d.tolist()] for n, d in cfg.maneuvers],
        "meas_outliers": outlier_model_to_dict(cfg.meas_outliers),
        "state_outliers": outlier_model_to_dict(cfg.state_outliers),
    }


def scenario_from_dict(d: dict) -> ScenarioConfig:
    return ScenarioConfig(
        model=model_from_dict(d["model"]),
        N=int(d["N"]), seed=int(d.get("seed", 0)),
        trajectory_seed=d.get("trajectory_seed"),
        maneuvers=tuple((int(n), v) for n, v in d.get("maneuvers", [])),
        meas_outliers=outlier_model_from_dict(d.get("meas_outliers", {})),
        state_outliers=outlier_model_from_dict(d.get("state_outliers", {})),
    )


def trajectory_header(Dx: int, Dy: int) -> list[str]:
    return (["n"]
            + [f"x_{i + 1}" for i in range(Dx)]
            + [f"y_{i + 1}" for i in range(Dy)]
            + [f"ox_{i + 1}" for i in range(Dx)]
            + [f"oy_{i + 1}" for i in range(Dy)])


def write_trajectory_csv(path, states, obs: ObservationBatch,
                         outliers: OutlierField | None = None) -> None:
    """Write (n, x, y, ox, oy) rows; row n=0 carries only the initial state."""
    states = np.asarray(states, dtype=float)
    N, Dy = obs.N, obs.Dy
    Dx = states.shape[1]
    if outliers is None:
        outliers = OutlierField.zeros(N, Dx, Dy)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(trajectory_header(Dx, Dy))
        wr.writerow([0] + [repr(float(v)) for v in states[0]] + [""] * (Dy + Dx + Dy))
        for n in range(1, N + 1):
            row = ([n] + [repr(float(v)) for v in states[n]]
                   + [repr(float(v)) for v in obs.y[n - 1]]
                   + [repr(float(v)) for v in outliers.ox[n - 1]]
                   + [repr(float(v)) for v in outliers.oy[n - 1]])
            wr.writerow(row)


def read_trajectory_csv(path):
    """Read a trajectory CSV back into (states, ObservationBatch, OutlierField).

    Files holding only (n, y_*) columns are accepted; missing parts come
    back as None.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    cols = {name: i for i, name in enumerate(header)}
    Dx = sum(1 for name in header if name.startswith("x_"))
    Dy = sum(1 for name in header if name.startswith("y_"))
    if Dy == 0:
        raise ValueError("trajectory CSV lacks y_* columns")
    have_x = Dx > 0
    have_o = any(name.startswith("ox_") for name in header)
    data.sort(key=lambda r: int(r[cols["n"]]))
    N = int(data[-1][cols["n"]])
    states = np.zeros((N + 1, Dx)) if have_x else None
    y = np.zeros((N, Dy))
    ox = np.zeros((N, Dx)) if have_o else None
    oy = np.zeros((N, Dy)) if have_o else None
    for r in data:
        n = int(r[cols["n"]])
        if have_x:
            states[n] = [float(r[cols[f"x_{i + 1}"]]) for i in range(Dx)]
        if n == 0:
            continue
        y[n - 1] = [float(r[cols[f"y_{i + 1}"]]) for i in range(Dy)]
        if have_o:
            ox[n - 1] = [float(r[cols[f"ox_{i + 1}"]]) for i in range(Dx)]
            oy[n - 1] = [float(r[cols[f"oy_{i + 1}"]]) for i in range(Dy)]
    field_out = OutlierField(ox, oy) if have_o else None
    return states, ObservationBatch(y), field_out
