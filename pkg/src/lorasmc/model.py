"""Low-rank RNN: parameters, piecewise-linear activations, discretisation,
latent/neuron maps, conditional inputs and latent basis changes."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import NotPositiveDefiniteError, RankDeficientError, ShapeError
from .observations import ObservationHead, obs_sample

COND_LIMIT = 1e12


@dataclass(frozen=True)
class PiecewiseLinearSpec:
    """phi(x_i) = sum_d slopes[i, d] * max(x_i - thresholds[i, d], 0).

    ``kind`` records which preset generated the spec ("relu", "clipped" or
    "custom"); training uses it to decide which thresholds are free.
    """

    slopes: np.ndarray
    thresholds: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.slopes, dtype=float))
        h = np.atleast_2d(np.asarray(self.thresholds, dtype=float))
        if b.shape != h.shape:
            raise ShapeError(f"slopes {b.shape} and thresholds {h.shape} differ")
        if b.shape[1] < 1:
            raise ShapeError("need at least one basis function per unit")
        object.__setattr__(self, "slopes", b)
        object.__setattr__(self, "thresholds", h)

    @property
    def N(self):
        return self.slopes.shape[0]

    @property
    def D(self):
        return self.slopes.shape[1]

    @classmethod
    def relu(cls, h):
        h = np.asarray(h, dtype=float).reshape(-1, 1)
        return cls(np.ones_like(h), h, "relu")

    @classmethod
    def clipped(cls, h):
        """max(x + h, 0) - max(x, 0): saturates at h for large x."""
        h = np.asarray(h, dtype=float).ravel()
        slopes = np.tile([1.0, -1.0], (h.size, 1))
        th = np.stack([-h, np.zeros_like(h)], axis=1)
        return cls(slopes, th, "clipped")

    @classmethod
    def from_bias(cls, kind, h):
        if kind == "relu":
            return cls.relu(h)
        if kind == "clipped":
            return cls.clipped(h)
        raise ValueError(f"no bias parameterisation for activation kind {kind!r}")

    def unit_bias(self):
        """The per-unit vector h the presets are built from."""
        if self.kind == "relu":
            return self.thresholds[:, 0].copy()
        if self.kind == "clipped":
            return -self.thresholds[:, 0]
        raise ValueError("custom activations have no single bias vector")

    def lipschitz(self):
        return np.abs(self.slopes).sum(axis=1)


def activation_eval(spec: PiecewiseLinearSpec, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.N:
        raise ShapeError(f"input has {x.shape[-1]} units, activation expects {spec.N}")
    return np.sum(spec.slopes * np.maximum(x[..., None] - spec.thresholds, 0.0), axis=-1)


def _check_spd(S, name):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"{name} must be square")
    if not np.allclose(S, S.T, rtol=0, atol=1e-10 * max(1.0, np.abs(S).max())):
        raise NotPositiveDefiniteError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(0.5 * (S + S.T)).min() <= 0:
        raise NotPositiveDefiniteError(f"{name} is not positive definite")
    return S


@dataclass(frozen=True)
class LowRankRNN:
    """Discretised stochastic low-rank RNN in latent form.

    z_{t+1} = a z_t + Ntilde^T phi(M z_t + H s_t) + eps,  eps ~ N(0, Sigma_z)

    The time constant is derived from the leak, tau = dt / (1 - a), so a
    learned leak stays consistent with the stored step size.
    """

    M: np.ndarray
    Ntilde: np.ndarray
    a: float
    activation: PiecewiseLinearSpec
    Sigma_z: np.ndarray
    mu_z1: np.ndarray
    Sigma_z1: np.ndarray
    obs_head: ObservationHead
    dt: float = 1.0
    H: Optional[np.ndarray] = None

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        Nt = np.atleast_2d(np.asarray(self.Ntilde, dtype=float))
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "Ntilde", Nt)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "mu_z1", np.atleast_1d(np.asarray(self.mu_z1, dtype=float)))
        object.__setattr__(self, "Sigma_z", np.atleast_2d(np.asarray(self.Sigma_z, dtype=float)))
        object.__setattr__(self, "Sigma_z1", np.atleast_2d(np.asarray(self.Sigma_z1, dtype=float)))
        if self.H is not None:
            object.__setattr__(self, "H", np.atleast_2d(np.asarray(self.H, dtype=float)))
        self.validate()

    def validate(self):
        N, R = self.M.shape
        if self.Ntilde.shape != (N, R):
            raise ShapeError(f"Ntilde {self.Ntilde.shape} must match M {self.M.shape}")
        if not 1 <= R <= N:
            raise ShapeError("need 1 <= R <= N")
        if self.activation.N != N:
            raise ShapeError("activation unit count differs from M")
        if not 0.0 <= self.a < 1.0 + 1e-15:
            raise ValueError(f"leak a={self.a} outside [0, 1]")
        _check_spd(self.Sigma_z, "Sigma_z")
        _check_spd(self.Sigma_z1, "Sigma_z1")
        if self.Sigma_z.shape != (R, R) or self.Sigma_z1.shape != (R, R) or self.mu_z1.shape != (R,):
            raise ShapeError("latent covariance / mean shapes do not match rank")
        if self.H is not None and self.H.shape[0] != N:
            raise ShapeError("H must have N rows")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def N(self):
        return self.M.shape[0]

    @property
    def R(self):
        return self.M.shape[1]

    @property
    def n_inputs(self):
        return 0 if self.H is None else self.H.shape[1]

    @property
    def tau(self):
        return self.dt / (1.0 - self.a) if self.a < 1 else np.inf

    @property
    def N_cont(self):
        """Continuous-time output weights N = Ntilde / (1 - a)."""
        if self.a >= 1.0:
            raise ValueError("a = 1 has no continuous-time equivalent")
        return self.Ntilde / (1.0 - self.a)

    def replace(self, **kw):
        return replace(self, **kw)


def discretize(tau, dt, N_cont, Gamma_z, noise_exponent="euler_maruyama"):
    """Euler-Maruyama discretisation. Returns (a, Ntilde, Sigma_z).

    ``noise_exponent="paper_literal"`` uses (dt/tau)^2 instead of dt/tau^2.
    """
    if not (0 < dt <= tau):
        raise ValueError(f"need 0 < dt <= tau, got dt={dt}, tau={tau}")
    G = np.atleast_2d(np.asarray(Gamma_z, dtype=float))
    GG = G @ G.T
    if noise_exponent == "euler_maruyama":
        scale = dt / tau ** 2
    elif noise_exponent == "paper_literal":
        scale = (dt / tau) ** 2
    else:
        raise ValueError(f"unknown noise_exponent {noise_exponent!r}")
    return 1.0 - dt / tau, (dt / tau) * np.asarray(N_cont, dtype=float), scale * GG


def latent_step_mean(model: LowRankRNN, z, s=None):
    """F(z) = a z + Ntilde^T phi(M z + H s); broadcasts over leading axes."""
    z = np.asarray(z, dtype=float)
    pre = z @ model.M.T
    if model.H is not None:
        if s is None:
            raise ShapeError("model has input weights H but no stimulus was given")
        pre = pre + np.asarray(s, dtype=float) @ model.H.T
    elif s is not None:
        raise ShapeError("stimulus given but model has no input weights")
    return model.a * z + activation_eval(model.activation, pre) @ model.Ntilde


def neuron_step(model: LowRankRNN, x, s=None):
    """Deterministic neuron-space update x' = a x + M Ntilde^T phi(x + H s)."""
    x = np.asarray(x, dtype=float)
    pre = x if model.H is None or s is None else x + np.asarray(s) @ model.H.T
    return model.a * x + activation_eval(model.activation, pre) @ model.Ntilde @ model.M.T


def embed_to_neurons(model: LowRankRNN, z):
    return np.asarray(z, dtype=float) @ model.M.T


def project_to_latent(model: LowRankRNN, x):
    MtM = model.M.T @ model.M
    if np.linalg.cond(MtM) > COND_LIMIT:
        raise RankDeficientError("M^T M is singular; M is rank deficient")
    return np.linalg.solve(MtM, model.M.T @ np.asarray(x, dtype=float).T).T


def transform_latents(model: LowRankRNN, A):
    """Re-express the latents as z' = A z; neuron activity is unchanged."""
    A = np.asarray(A, dtype=float)
    Ainv = np.linalg.inv(A)
    head = model.obs_head
    if head.readout is not None:
        head = head.replace(readout=head.readout @ Ainv)
    return model.replace(
        M=model.M @ Ainv,
        Ntilde=model.Ntilde @ A.T,
        Sigma_z=_sym(A @ model.Sigma_z @ A.T),
        mu_z1=A @ model.mu_z1,
        Sigma_z1=_sym(A @ model.Sigma_z1 @ A.T),
        obs_head=head,
    )


def _sym(S):
    return 0.5 * (S + S.T)


def orthogonalize(model: LowRankRNN):
    """Rotate/scale latents so M has orthonormal columns (the leading left
    singular vectors of J = M Ntilde^T); column signs make the
    largest-magnitude entry of each column positive."""
    R = model.R
    if np.linalg.matrix_rank(model.M) < R:
        raise RankDeficientError("M has collapsed rank")
    U, sv, _ = np.linalg.svd(model.M @ model.Ntilde.T)
    if sv[R - 1] <= sv[0] * 1e-12:
        raise RankDeficientError("J = M Ntilde^T has rank < R")
    U = U[:, :R]
    idx = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[idx, np.arange(R)])
    out = transform_latents(model, U.T @ model.M)
    return out.replace(M=U)


@dataclass(frozen=True)
class StimulusStream:
    """Per-step inputs s (T x N_s). ``semantics`` is informational."""

    s: np.ndarray
    semantics: str = "piecewise-constant"

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.s, dtype=float))
        if not np.all(np.isfinite(s)):
            raise ValueError("stimulus must be finite")
        object.__setattr__(self, "s", s)

    @classmethod
    def pulse(cls, T, value, onset, duration):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        s = np.zeros((T, value.size))
        s[onset:onset + duration] = value
        return cls(s, "pulse")


def stimulus_filter(tau, dt, s):
    """Leaky-integrated input s~ with s~_0 = 0 (diagnostic for s ~ s~)."""
    s = s.s if isinstance(s, StimulusStream) else np.atleast_2d(np.asarray(s, dtype=float))
    a = 1.0 - dt / tau
    out = np.zeros_like(s)
    for t in range(1, s.shape[0]):
        out[t] = a * out[t - 1] + (1.0 - a) * s[t - 1]
    return out


def stimulus_gap(tau, dt, s):
    """Sup-norm distance between s and its leaky-filtered version."""
    s_arr = s.s if isinstance(s, StimulusStream) else np.atleast_2d(np.asarray(s, dtype=float))
    return float(np.max(np.abs(stimulus_filter(tau, dt, s_arr) - s_arr)))


def simulate_latents(model: LowRankRNN, T, rng=None, s=None, z1=None, increments=None, noise=True):
    """Simulate one latent trajectory (T x R).

    ``increments`` (T-1 x R) replaces the Gaussian transition noise, which
    allows common-random-number comparisons between models.
    """
    R = model.R
    z = np.empty((T, R))
    if z1 is None:
        z1 = model.mu_z1 + (np.linalg.cholesky(model.Sigma_z1) @ rng.standard_normal(R) if noise else 0.0)
    z[0] = z1
    if increments is None and noise:
        L = np.linalg.cholesky(model.Sigma_z)
        increments = rng.standard_normal((T - 1, R)) @ L.T
    for t in range(1, T):
        st = None if s is None else s[t - 1]
        z[t] = latent_step_mean(model, z[t - 1], st)
        if increments is not None:
            z[t] += increments[t - 1]
    return z


def generate(model: LowRankRNN, T, n_trials, rng, stimulus=None, burn_in=0, noise=True):
    """Sample trials from the generative model.

    Returns (latents n x T x R, observations n x T x N_y).  ``stimulus`` is
    T x N_s (shared) or n x T x N_s; ``burn_in`` steps are simulated and
    discarded.
    """
    R, Ty = model.R, T + burn_in
    n = int(n_trials)
    if stimulus is not None:
        stimulus = np.asarray(stimulus, dtype=float)
        if stimulus.ndim == 2:
            stimulus = np.broadcast_to(stimulus, (n,) + stimulus.shape)
        if burn_in:
            pad = np.zeros((n, burn_in, stimulus.shape[-1]))
            stimulus = np.concatenate([pad, stimulus], axis=1)
    z = np.empty((n, Ty, R))
    if n == 0:
        dtype = np.int64 if model.obs_head.kind == "poisson" else float
        return np.empty((0, T, R)), np.empty((0, T, model.obs_head.n_obs), dtype=dtype)
    L1 = np.linalg.cholesky(model.Sigma_z1)
    L = np.linalg.cholesky(model.Sigma_z)
    z[:, 0] = model.mu_z1 + (rng.standard_normal((n, R)) @ L1.T if noise else 0.0)
    for t in range(1, Ty):
        st = None if stimulus is None else stimulus[:, t - 1]
        z[:, t] = latent_step_mean(model, z[:, t - 1], st)
        if noise:
            z[:, t] += rng.standard_normal((n, R)) @ L.T
    z = z[:, burn_in:]
    y = obs_sample(model.obs_head, z, model.M, rng)
    return z, y
