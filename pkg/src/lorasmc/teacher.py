"""Ground-truth ("teacher") low-rank RNNs and synthetic datasets.

Teachers are built by embedding a target vector field: draw M and h, then
solve for N by least squares so that N^T relu(M z - h) = f(z) + z on a grid.
The oscillator and ring targets are themselves piecewise linear (a rotating
or expanding linear core fenced in by a regular polygon of inward-pulling
faces), so the embedding is exact with a handful of units:

* oscillator: f = alpha z + omega J z inside the polygon; outside, each face
  k adds -beta (u_k.z - 1) u_k.  The stable limit cycle runs along the fence.
* ring: the same with omega = 0 and an octagon; the 8 vertices are stable
  fixed points and the 8 face midpoints are saddles.

Remaining units are "always on" inside the fitting domain (their kink lies
outside it) and carry the linear core.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .model import LowRankRNN, PiecewiseLinearSpec, StimulusStream, generate, latent_step_mean, orthogonalize, transform_latents
from .observations import ObservationHead
from .metrics import acf_peak_lag, autocorrelation

RESIDUAL_TOL = 0.05
KINDS = ("oscillator", "ring_attractor", "custom_vector_field")


@dataclass
class TeacherSpec:
    kind: str = "oscillator"
    N: int = 20
    R: int = 2
    sigma_z: float = 0.04          # transition covariance sigma_z * I (latent, after orthonormalisation)
    obs_kind: str = "gaussian"
    sigma_y: float = 0.01
    poisson_gain: float = 4.0
    poisson_bias: float = 3.0
    T: int = 75
    n_trials: int = 400
    tau_over_dt: float = 10.0
    period: float = 50.0           # oscillator period in steps
    n_faces: Optional[int] = None  # polygon faces (oscillator: N - 4, capped at 16)
    alpha: float = 0.5             # expansion rate of the core (per tau)
    beta: float = 4.0              # fence stiffness (per tau)
    n_wells: int = 8
    ring_angle0: float = 0.0       # direction of the first well (rad)
    n_inputs: int = 0
    stim_onset: int = 25
    stim_duration: int = 25
    stim_gain: float = 0.6
    angles: tuple = ()
    domain_radius: float = 2.5     # fitting domain, in fence units
    f_target: Optional[Callable] = None
    max_retries: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown teacher kind {self.kind!r}")
        if self.N < 1 or self.R < 1 or self.T < 1 or self.n_trials < 0:
            raise ConfigError("N, R, T must be positive")
        if min(self.sigma_z, self.tau_over_dt) <= 0 or (self.obs_kind == "gaussian" and self.sigma_y <= 0):
            raise ConfigError("noise scales and tau/dt must be positive")
        if self.kind == "ring_attractor":
            if self.n_inputs not in (0, 2):
                raise ConfigError("the ring teacher takes N_s = 2 inputs (sin, cos)")
            self.n_inputs = 2
            if not self.angles:
                self.angles = tuple(2 * np.pi * k / self.n_wells for k in range(self.n_wells))
        if self.kind != "custom_vector_field" and self.R != 2:
            raise ConfigError("oscillator and ring teachers are rank 2")
        if self.kind == "custom_vector_field" and self.f_target is None:
            raise ConfigError("custom teachers need f_target")

    @property
    def omega(self):
        """Angular speed in 1/tau for the requested period in steps."""
        return 2 * np.pi * self.tau_over_dt / self.period

    @property
    def faces(self):
        if self.kind == "ring_attractor":
            return self.n_wells
        return self.n_faces or min(16, self.N - 4)


@dataclass
class Teacher:
    model: LowRankRNN
    spec: TeacherSpec
    residual: float
    targets: Optional[np.ndarray] = None   # ring: stable-point locations in latent coords
    cycle_radius: float = 1.0


def _grid(rad, n=61, R=2):
    g = np.linspace(-rad, rad, n)
    Z = np.stack(np.meshgrid(*([g] * R), indexing="ij"), -1).reshape(-1, R)
    return Z[np.linalg.norm(Z, axis=1) <= rad]


def _polygon_field(u, alpha, omega, beta):
    J = np.array([[0.0, -1.0], [1.0, 0.0]])

    def f(Z):
        core = alpha * Z + omega * Z @ J.T
        return core - beta * np.maximum(Z @ u.T - 1.0, 0.0) @ u
    return f


def _fit_N(M, h, Z, target):
    Phi = np.maximum(Z @ M.T - h, 0.0)
    N, *_ = np.linalg.lstsq(Phi, target, rcond=None)
    return N, float(np.max(np.abs(Phi @ N - target)))


def _polygon_units(spec, rng, K, offset):
    ang = offset + 2 * np.pi * np.arange(K) / K
    u = np.stack([np.cos(ang), np.sin(ang)], 1)
    n_lin = spec.N - K
    if n_lin < 3:
        raise ConfigError(f"need N >= {K + 3} units for a {K}-face teacher")
    # always-on units: random directions, kinks beyond the fitting domain
    v = rng.normal(size=(n_lin, 2))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    hv = -spec.domain_radius * (1.5 + rng.uniform(0, 1, n_lin))
    M = np.concatenate([u, v])
    h = np.concatenate([np.ones(K), hv])
    return M, h, u


def _custom_units(N, R, rad, rng):
    Q, _ = np.linalg.qr(rng.normal(size=(N, R)))
    h = rng.uniform(-1, 1, N) * rad * np.linalg.norm(Q, axis=1)
    return Q, h


def estimate_period(z, min_cycles=3):
    """Mean period (steps) from upward zero crossings of the first latent."""
    x = np.asarray(z)[:, 0] - np.mean(np.asarray(z)[:, 0])
    idx = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
    if len(idx) < min_cycles + 1:
        return np.nan
    # linear interpolation of the crossing times
    t = idx + (-x[idx]) / (x[idx + 1] - x[idx])
    return float(np.mean(np.diff(t)))


def _assemble(spec, M, Ncont, h, H=None):
    a = 1.0 - 1.0 / spec.tau_over_dt
    R = M.shape[1]
    if spec.obs_kind == "gaussian":
        head = ObservationHead.gaussian(spec.N, spec.sigma_y)
    elif spec.obs_kind == "poisson":
        head = ObservationHead.poisson(spec.N, spec.poisson_gain, spec.poisson_bias)
    else:
        raise ConfigError(f"unknown observation kind {spec.obs_kind!r}")
    return LowRankRNN(M=M, Ntilde=(1.0 - a) * Ncont, a=a, activation=PiecewiseLinearSpec.relu(h),
                      Sigma_z=spec.sigma_z * np.eye(R), mu_z1=np.zeros(R), Sigma_z1=np.eye(R),
                      obs_head=head, dt=1.0, H=H)


def _rescale_noise(model, spec):
    """Set Sigma_z, Sigma_z1 in the (orthonormal-M) latent coordinates."""
    return model.replace(Sigma_z=spec.sigma_z * np.eye(model.R))


def build_teacher(spec: TeacherSpec, rng: np.random.Generator) -> Teacher:
    """Construct a teacher with orthonormal M; see module docstring."""
    if spec.kind == "custom_vector_field":
        N = spec.N
        for _ in range(spec.max_retries + 1):
            M, h = _custom_units(N, spec.R, spec.domain_radius, rng)
            Z = _grid(spec.domain_radius, 61 if spec.R <= 2 else 15, spec.R)
            Ncont, res = _fit_N(M, h, Z, spec.f_target(Z) + Z)
            if res < RESIDUAL_TOL:
                break
            N *= 2
        else:
            raise RuntimeError(f"vector-field embedding failed (residual {res:.3g})")
        sp = replace(spec, N=N)
        model = orthogonalize_safe(_assemble(sp, M, Ncont, h))
        return Teacher(_rescale_noise(model, sp), sp, res)

    K = spec.faces
    offset = rng.uniform(0, 2 * np.pi) if spec.kind == "oscillator" else \
        spec.ring_angle0 + np.pi / spec.n_wells   # face normals between the wells
    M, h, u = _polygon_units(spec, rng, K, offset)
    Z = _grid(spec.domain_radius)
    omega = spec.omega if spec.kind == "oscillator" else 0.0
    for _ in range(4 if spec.kind == "oscillator" else 1):
        f = _polygon_field(u, spec.alpha, omega, spec.beta)
        Ncont, res = _fit_N(M, h, Z, f(Z) + Z)
        if res >= RESIDUAL_TOL:
            raise RuntimeError(f"vector-field embedding failed (residual {res:.3g})")
        if spec.kind != "oscillator":
            break
        # calibrate the rotation so the noise-free orbit has the target period
        probe = _assemble(spec, M, Ncont, h)
        zs = _free_run(probe, np.array([1.0, 0.0]), int(12 * spec.period))
        per = estimate_period(zs[int(4 * spec.period):])
        if not np.isfinite(per) or abs(per / spec.period - 1) < 1e-3:
            break
        omega *= per / spec.period

    H = None
    if spec.kind == "ring_attractor":
        # the pulse [sin th, cos th] shifts the pre-activation by c * (cos th, sin th)
        G = spec.stim_gain * np.array([[0.0, 1.0], [1.0, 0.0]])
        H = M @ G
    model = _assemble(spec, M, Ncont, h, H)
    # cycle / ring radius along the fence, in the construction coordinates
    if spec.kind == "oscillator":
        zs = _free_run(model, np.array([1.0, 0.0]), int(6 * spec.period))
        radius0 = float(np.mean(np.linalg.norm(zs[int(3 * spec.period):], axis=1)))
        targets0 = None
    else:
        c = np.cos(np.pi / K)
        s = 2 * spec.beta * c / (2 * spec.beta * c * c - spec.alpha)
        w = spec.ring_angle0 + 2 * np.pi * np.arange(K) / K
        targets0 = s * np.stack([np.cos(w), np.sin(w)], 1)
        radius0 = s
    A = _orth_transform(model)
    model = _rescale_noise(orthogonalize_safe(model), spec)
    targets = None if targets0 is None else targets0 @ A.T
    radius = radius0 * float(np.sqrt(abs(np.linalg.det(A))))
    return Teacher(model, spec, res, targets, radius)


def _orth_transform(model):
    U, _, _ = np.linalg.svd(model.M @ model.Ntilde.T)
    U = U[:, :model.R]
    idx = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[idx, np.arange(model.R)])
    return U.T @ model.M


def orthogonalize_safe(model):
    """orthogonalize(), or a QR-based basis when M Ntilde^T is rank deficient."""
    try:
        return orthogonalize(model)
    except Exception:
        Q, Rm = np.linalg.qr(model.M)
        out = transform_latents(model, Rm)
        return out.replace(M=Q)


def _free_run(model, z0, T, s=None):
    z = np.empty((T, model.R))
    z[0] = z0
    for t in range(1, T):
        z[t] = latent_step_mean(model, z[t - 1], None if s is None else s[t - 1])
    return z


def free_run(model, z0, T, s=None):
    """Noise-free latent trajectory from z0."""
    return _free_run(model, np.asarray(z0, dtype=float), T, s)


# ----------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------

@dataclass
class DatasetBundle:
    observations: np.ndarray                 # trials x T x C
    modality: str                            # "gaussian" | "poisson"
    bin_s: float = 1.0
    stimulus: Optional[np.ndarray] = None    # trials x T x N_s
    latents: Optional[np.ndarray] = None     # trials x T x R
    channel_names: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        obs = np.asarray(self.observations)
        if obs.ndim != 3:
            raise ValueError("observations must be trials x T x C")
        if self.modality not in ("gaussian", "poisson"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == "poisson":
            if np.any(obs < 0) or np.any(obs != np.round(obs)):
                raise ValueError("Poisson counts must be non-negative integers")
            obs = obs.astype(np.int64)
        else:
            obs = obs.astype(float)
        self.observations = obs
        n, T, C = obs.shape
        for name in ("stimulus", "latents"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                if arr.ndim != 3 or arr.shape[:2] != (n, T):
                    raise ValueError(f"{name} must be trials x T x k matching observations")
                setattr(self, name, arr)
        if self.channel_names is None:
            self.channel_names = [f"ch{i}" for i in range(C)]
        if len(self.channel_names) != C:
            raise ValueError("channel_names length differs from channel count")

    @property
    def shape(self):
        return self.observations.shape


def ring_stimulus(spec: TeacherSpec, theta):
    """T x 2 pulse of [sin th, cos th]."""
    return StimulusStream.pulse(spec.T, [np.sin(theta), np.cos(theta)],
                                spec.stim_onset, spec.stim_duration).s


def generate_dataset(teacher: Teacher, spec: TeacherSpec | None, rng: np.random.Generator,
                     noise=True) -> DatasetBundle:
    spec = teacher.spec if spec is None else spec
    model = teacher.model
    stim = None
    meta = {"teacher_kind": spec.kind}
    if spec.kind == "ring_attractor":
        k = rng.integers(0, len(spec.angles), spec.n_trials)
        th = np.asarray(spec.angles)[k]
        stim = np.stack([ring_stimulus(spec, t) for t in th]) if spec.n_trials else \
            np.zeros((0, spec.T, 2))
        meta["angle_index"] = k.tolist()
    z, y = generate(model, spec.T, spec.n_trials, rng, stimulus=stim, noise=noise)
    if not noise and model.obs_head.kind == "gaussian":
        y = z @ model.obs_head.readout_matrix(model.M).T
    return DatasetBundle(y, model.obs_head.kind, 1.0, stim, z, None, meta)


# ----------------------------------------------------------------------
# teacher-student comparison
# ----------------------------------------------------------------------

def dynamics_summary(model, rng, T=10000, burn_in=200, max_lag=120):
    """Oscillation period (autocorrelation peak lag, in steps) and noise
    magnitude tr(Sigma_z) of a model in orthonormal-M coordinates.

    The ACF is averaged over latent dimensions of one long noisy run.
    """
    om = orthogonalize_safe(model)
    z, _ = generate(om, T, 1, rng, burn_in=burn_in)
    acf = np.mean([autocorrelation(z[0, :, r], max_lag) for r in range(om.R)], axis=0)
    return {"peak_lag": float(acf_peak_lag(acf)), "noise_trace": float(np.trace(om.Sigma_z)),
            "acf": acf}
