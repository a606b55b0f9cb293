"""Sequential Monte Carlo over the latent state of a low-rank RNN.

The sweep resamples (from t=2 on), proposes and reweights, and returns the
particle system together with the log marginal-likelihood estimate
log p_hat(y_{1:T}) = sum_t log(1/K sum_k w_t^k).

All arithmetic in the sweep runs in float64 torch so that the same code
serves inference (no grad) and training (reparameterised gradients with
ancestor indices treated as constants).  Randomness is drawn from a numpy
Generator, which keeps every sweep reproducible from its seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import DegenerateWeightsError, NotPositiveDefiniteError, ShapeError
from .model import LowRankRNN, latent_step_mean
from .observations import LOG_2PI, obs_log_density

DTYPE = torch.float64
PROPOSALS = ("bootstrap", "optimal", "encoder")


# ----------------------------------------------------------------------
# numpy-level building blocks
# ----------------------------------------------------------------------

def normalize_log_weights(logw):
    logw = np.asarray(logw, dtype=float)
    m = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateWeightsError(None, "no finite weight to normalise")
    w = np.exp(logw - m)
    return w / w.sum(axis=-1, keepdims=True)


def resample_multinomial(logw, rng: np.random.Generator, n=None):
    """I.i.d. ancestor draws with probabilities proportional to exp(logw)."""
    w = normalize_log_weights(logw)
    n = w.shape[-1] if n is None else n
    cdf = np.cumsum(w)
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return np.minimum(idx, w.size - 1)


def resample_systematic(logw, rng: np.random.Generator, n=None):
    w = normalize_log_weights(logw)
    n = w.shape[-1] if n is None else n
    cdf = np.cumsum(w)
    u = (np.arange(n) + rng.random()) / n
    return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), w.size - 1)


def kalman_gain(Sigma_z, B, Sigma_y):
    """K = Sigma_z B^T (B Sigma_z B^T + Sigma_y)^-1."""
    Sigma_z = np.atleast_2d(np.asarray(Sigma_z, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Sigma_y = np.asarray(Sigma_y, dtype=float)
    if Sigma_y.ndim == 1:
        Sigma_y = np.diag(Sigma_y)
    S = B @ Sigma_z @ B.T + np.atleast_2d(Sigma_y)
    if np.linalg.cond(S) > 1e14:
        raise np.linalg.LinAlgError("singular innovation covariance")
    return np.linalg.solve(S, B @ Sigma_z).T


def interpolation_weight(Sigma_z, B, Sigma_y):
    """alpha = K B: weight on the data-inferred state in the proposal mean."""
    return kalman_gain(Sigma_z, B, Sigma_y) @ np.atleast_2d(B)


def product_interpolation_weight(p_var, e_var):
    """Diagonal alpha = Sigma_z (Sigma_z + Sigma_e)^-1 of the product proposal."""
    p_var = np.asarray(p_var, dtype=float)
    return p_var / (p_var + np.asarray(e_var, dtype=float))


def _gauss_logpdf_chol(x, mean, L):
    d = np.atleast_1d(x - mean)
    sol = np.linalg.solve(L, d)
    return -0.5 * (sol @ sol + d.size * LOG_2PI) - np.sum(np.log(np.diag(L)))


def _sym_chol_np(P):
    P = 0.5 * (P + P.T)
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            return np.linalg.cholesky(P + jitter * np.eye(P.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError("proposal covariance is not positive definite")


def optimal_proposal_params(model: LowRankRNN, z_prev, y, s=None, initial=False):
    """Mean and covariance of p(z_t | z_{t-1}, y_t) for a linear-Gaussian head."""
    head = model.obs_head
    if head.kind != "gaussian":
        raise ValueError("the optimal proposal needs a linear-Gaussian observation head")
    B = head.readout_matrix(model.M)
    if initial:
        prior_mean, Sig = model.mu_z1, model.Sigma_z1
    else:
        prior_mean, Sig = latent_step_mean(model, z_prev, s), model.Sigma_z
    K = kalman_gain(Sig, B, head.sigma_y)
    mean = prior_mean + K @ (np.asarray(y, dtype=float) - B @ prior_mean)
    cov = (np.eye(model.R) - K @ B) @ Sig
    return mean, 0.5 * (cov + cov.T)


def propose_optimal(model: LowRankRNN, z_prev, y, rng: np.random.Generator, s=None):
    """Draw from the locally optimal proposal; returns (z, log r(z))."""
    mean, cov = optimal_proposal_params(model, z_prev, y, s)
    L = _sym_chol_np(cov)
    z = mean + L @ rng.standard_normal(model.R)
    return z, _gauss_logpdf_chol(z, mean, L)


def propose_product(p_mean, p_var, e_mean, e_var, rng: np.random.Generator):
    """Sample the normalised product of two diagonal Gaussians."""
    p_var = np.asarray(p_var, dtype=float)
    e_var = np.asarray(e_var, dtype=float)
    if np.any(p_var <= 0) or np.any(e_var <= 0):
        raise ValueError("variances must be positive")
    var = 1.0 / (1.0 / p_var + 1.0 / e_var)
    mean = var * (np.asarray(p_mean) / p_var + np.asarray(e_mean) / e_var)
    eps = rng.standard_normal(mean.shape)
    z = mean + np.sqrt(var) * eps
    log_r = -0.5 * np.sum(eps ** 2 + np.log(var) + LOG_2PI, axis=-1)
    return z, log_r


def product_params(p_mean, p_var, e_mean, e_var):
    var = 1.0 / (1.0 / np.asarray(p_var, float) + 1.0 / np.asarray(e_var, float))
    return var * (np.asarray(p_mean) / p_var + np.asarray(e_mean) / e_var), var


def reweight(log_obs, log_trans, log_r):
    """log w = log p(y_t | z_t) + log p(z_t | z_{t-1}) - log r(z_t | .)."""
    return log_obs + (log_trans - log_r)


def transition_log_density(model: LowRankRNN, z_prev, z, s=None):
    return _gauss_logpdf_chol(np.asarray(z, float), latent_step_mean(model, z_prev, s),
                              np.linalg.cholesky(model.Sigma_z))


def optimal_incremental_weight(model: LowRankRNN, z_prev, y, s=None):
    """log p(y_t | z_{t-1}) = log N(y; B F(z_prev), B Sigma_z B^T + Sigma_y)."""
    head = model.obs_head
    B = head.readout_matrix(model.M)
    m = B @ latent_step_mean(model, z_prev, s)
    S = B @ model.Sigma_z @ B.T + np.diag(head.sigma_y)
    return _gauss_logpdf_chol(np.asarray(y, float), m, np.linalg.cholesky(S))


# ----------------------------------------------------------------------
# tensor form of the model
# ----------------------------------------------------------------------

@dataclass
class TensorModel:
    """Model parameters as float64 tensors, possibly carrying gradients."""

    M: torch.Tensor
    Ntilde: torch.Tensor
    a: torch.Tensor
    slopes: torch.Tensor
    thresholds: torch.Tensor
    chol_z: torch.Tensor
    mu_z1: torch.Tensor
    chol_z1: torch.Tensor
    head_kind: str
    readout: torch.Tensor
    sigma_y: Optional[torch.Tensor] = None
    bias: Optional[torch.Tensor] = None
    exposure: float = 1.0
    H: Optional[torch.Tensor] = None

    @property
    def R(self):
        return self.M.shape[1]

    @property
    def Sigma_z(self):
        return self.chol_z @ self.chol_z.T

    @property
    def Sigma_z1(self):
        return self.chol_z1 @ self.chol_z1.T

    @classmethod
    def from_model(cls, model: LowRankRNN):
        t = lambda x: torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)
        head = model.obs_head
        return cls(
            M=t(model.M), Ntilde=t(model.Ntilde), a=t(model.a),
            slopes=t(model.activation.slopes), thresholds=t(model.activation.thresholds),
            chol_z=t(np.linalg.cholesky(model.Sigma_z)), mu_z1=t(model.mu_z1),
            chol_z1=t(np.linalg.cholesky(model.Sigma_z1)),
            head_kind=head.kind, readout=t(head.readout_matrix(model.M)),
            sigma_y=None if head.sigma_y is None else t(head.sigma_y),
            bias=t(head.bias), exposure=float(head.exposure),
            H=None if model.H is None else t(model.H),
        )


def activation_t(slopes, thresholds, x):
    return torch.sum(slopes * torch.relu(x.unsqueeze(-1) - thresholds), dim=-1)


def step_mean_t(tm: TensorModel, z, s=None):
    pre = z @ tm.M.T
    if tm.H is not None and s is not None:
        pre = pre + (s @ tm.H.T).unsqueeze(-2)
    return tm.a * z + activation_t(tm.slopes, tm.thresholds, pre) @ tm.Ntilde


def obs_logpdf_t(tm: TensorModel, z, y):
    """log p(y | z); z (..., K, R), y (..., N_y) broadcast over particles."""
    pre = z @ tm.readout.T
    yk = y.unsqueeze(-2)
    if tm.head_kind == "gaussian":
        r = yk - pre
        return -0.5 * (torch.sum(r * r / tm.sigma_y, -1) + torch.sum(torch.log(tm.sigma_y))
                       + tm.readout.shape[0] * math.log(2 * math.pi))
    lam = tm.exposure * torch.logaddexp(pre - tm.bias, torch.zeros((), dtype=DTYPE))
    return torch.sum(torch.xlogy(yk, lam) - lam - torch.lgamma(yk + 1.0), -1)


def gauss_logpdf_t(x, mean, L):
    diff = (x - mean).unsqueeze(-1)
    sol = torch.linalg.solve_triangular(L, diff, upper=False).squeeze(-1)
    R = x.shape[-1]
    return (-0.5 * (torch.sum(sol * sol, -1) + R * math.log(2 * math.pi))
            - torch.sum(torch.log(torch.diagonal(L))))


def chol_jitter_t(P):
    P = 0.5 * (P + P.T)
    eye = torch.eye(P.shape[0], dtype=P.dtype)
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        L, info = torch.linalg.cholesky_ex(P + jitter * eye)
        if int(info) == 0:
            return L
    raise NotPositiveDefiniteError("proposal covariance is not positive definite")


def _optimal_factors(Sig, B, sigma_y):
    """Gain K and Cholesky factor of (I - K B) Sigma."""
    S = B @ Sig @ B.T + torch.diag(sigma_y)
    K = torch.linalg.solve(S, B @ Sig).T
    P = (torch.eye(Sig.shape[0], dtype=DTYPE) - K @ B) @ Sig
    return K, chol_jitter_t(P)


# ----------------------------------------------------------------------
# the sweep
# ----------------------------------------------------------------------

@dataclass
class SweepResult:
    """Tensor output of :func:`run_smc`; batch axis first."""

    logZ: torch.Tensor            # (B,)
    logw: torch.Tensor            # (B, T, K)
    particles: torch.Tensor       # (B, T, K, R) before ancestry resolution
    ancestors: torch.Tensor       # (B, T-1, K)


def _draw_ancestors(logw, rng, scheme):
    Bn, K = logw.shape
    lw = logw.detach()
    m = lw.max(dim=-1, keepdim=True).values
    w = torch.exp(lw - m)
    cdf = torch.cumsum(w, dim=-1)
    if scheme == "systematic":
        u = (torch.arange(K, dtype=DTYPE) + torch.as_tensor(rng.random((Bn, 1)), dtype=DTYPE)) / K
    else:
        u = torch.as_tensor(rng.random((Bn, K)), dtype=DTYPE)
    idx = torch.searchsorted(cdf, (u * cdf[:, -1:]).contiguous(), right=True)
    return idx.clamp_(max=K - 1)


def run_smc(tm: TensorModel, y, K, rng: np.random.Generator, proposal="bootstrap", s=None,
            encoder_out=None, resampling="multinomial"):
    """Batched SMC sweep.

    y: (B, T, N_y) tensor.  s: (B, T, N_s) or None; z_t is driven by s_{t-1}.
    encoder_out: (means, logvars), each (B, T, R), for the product proposal.
    """
    if proposal not in PROPOSALS:
        raise ValueError(f"unknown proposal {proposal!r}")
    if K < 1:
        raise ValueError("need at least one particle")
    Bn, T, _ = y.shape
    if T < 1:
        raise ValueError("need at least one time step")
    R = tm.R
    if proposal == "optimal":
        if tm.head_kind != "gaussian":
            raise ValueError("the optimal proposal needs a linear-Gaussian observation head")
        K1, L1 = _optimal_factors(tm.Sigma_z1, tm.readout, tm.sigma_y)
        Kt, Lt = _optimal_factors(tm.Sigma_z, tm.readout, tm.sigma_y)
    elif proposal == "encoder":
        if encoder_out is None:
            raise ValueError("the product proposal needs encoder outputs")
        for name, Lc in (("Sigma_z", tm.chol_z), ("Sigma_z1", tm.chol_z1)):
            if torch.any(torch.tril(Lc, -1) != 0):
                raise ValueError(f"the product proposal needs a diagonal {name}")
        e_mean, e_logvar = encoder_out
        pv1 = torch.diagonal(tm.chol_z1) ** 2
        pvt = torch.diagonal(tm.chol_z) ** 2

    logws, parts, ancs = [], [], []
    half_log2pi = 0.5 * R * math.log(2 * math.pi)
    z_prev = None
    for t in range(T):
        eps = torch.as_tensor(rng.standard_normal((Bn, K, R)), dtype=DTYPE)
        yt = y[:, t]
        if t == 0:
            prior_mean = tm.mu_z1.expand(Bn, K, R)
            Lp = tm.chol_z1
        else:
            anc = _draw_ancestors(logws[-1], rng, resampling)
            ancs.append(anc)
            zp = torch.gather(z_prev, 1, anc.unsqueeze(-1).expand(Bn, K, R))
            prior_mean = step_mean_t(tm, zp, None if s is None else s[:, t - 1])
            Lp = tm.chol_z
        if proposal == "bootstrap":
            z = prior_mean + eps @ Lp.T
            log_r = log_p = gauss_logpdf_t(z, prior_mean, Lp)
        elif proposal == "optimal":
            Kg, Lq = (K1, L1) if t == 0 else (Kt, Lt)
            innov = yt.unsqueeze(-2) - prior_mean @ tm.readout.T
            mean = prior_mean + innov @ Kg.T
            z = mean + eps @ Lq.T
            log_r = -0.5 * torch.sum(eps * eps, -1) - half_log2pi - torch.sum(torch.log(torch.diagonal(Lq)))
            log_p = gauss_logpdf_t(z, prior_mean, Lp)
        else:
            pv = pv1 if t == 0 else pvt
            ev = torch.exp(e_logvar[:, t]).unsqueeze(-2)
            em = e_mean[:, t].unsqueeze(-2)
            var = 1.0 / (1.0 / pv + 1.0 / ev)
            mean = var * (prior_mean / pv + em / ev)
            z = mean + torch.sqrt(var) * eps
            log_r = -0.5 * torch.sum(eps * eps + torch.log(var), -1) - half_log2pi
            log_p = gauss_logpdf_t(z, prior_mean, Lp)
        logw = obs_logpdf_t(tm, z, yt) + (log_p - log_r)
        bad = ~torch.isfinite(logw.detach()).any(dim=-1) | torch.isnan(logw.detach()).any(dim=-1)
        if bool(bad.any()):
            raise DegenerateWeightsError(t)
        logws.append(logw)
        parts.append(z)
        z_prev = z
    logw = torch.stack(logws, 1)
    logZ = torch.sum(torch.logsumexp(logw, -1) - math.log(K), -1)
    ancestors = torch.stack(ancs, 1) if ancs else torch.zeros((Bn, 0, K), dtype=torch.long)
    return SweepResult(logZ, logw, torch.stack(parts, 1), ancestors)


# ----------------------------------------------------------------------
# numpy-facing sweep
# ----------------------------------------------------------------------

@dataclass
class ParticleEnsemble:
    """Weighted particle system of one or more sweeps.

    Arrays carry a leading batch axis when the sweep was batched.
    ``z`` holds ancestry-resolved trajectories, ``particles`` the raw
    per-step draws, ``ancestors[t-1, k]`` the parent (at t-1) of particle k
    at t.
    """

    z: np.ndarray
    particles: np.ndarray
    ancestors: np.ndarray
    logw: np.ndarray
    logZ_terms: np.ndarray

    @property
    def K(self):
        return self.logw.shape[-1]

    @property
    def logZ_hat(self):
        return self.logZ_terms.sum(axis=-1)

    def normalized_weights(self):
        return normalize_log_weights(self.logw)

    def filtering_mean(self):
        """Weighted particle mean of z_t given y_{1:t}, per step."""
        w = self.normalized_weights()
        return np.sum(w[..., None] * self.particles, axis=-2)

    def filtering_var(self):
        w = self.normalized_weights()
        m = self.filtering_mean()
        return np.sum(w[..., None] * (self.particles - m[..., None, :]) ** 2, axis=-2)


def resolve_ancestry(particles, ancestors):
    """Trace ancestry back from the final step; (T, K, R) -> (T, K, R)."""
    T, K = particles.shape[:2]
    out = np.empty_like(particles)
    idx = np.arange(K)
    out[T - 1] = particles[T - 1]
    for t in range(T - 2, -1, -1):
        idx = ancestors[t][idx]
        out[t] = particles[t][idx]
    return out


def smc_sweep(model: LowRankRNN, y, K, rng: np.random.Generator, proposal="bootstrap", s=None,
              encoder=None, resampling="multinomial"):
    """Run SMC on y (T x N_y, or B x T x N_y for independent sweeps)."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 2
    if single:
        y = y[None]
    if y.ndim != 3 or y.shape[-1] != model.obs_head.n_obs:
        raise ShapeError("observations must be (T, N_y) or (B, T, N_y)")
    if model.obs_head.kind == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
        raise ValueError("Poisson observations must be non-negative integers")
    st = None
    if s is not None:
        s = np.asarray(s, dtype=float)
        s = np.broadcast_to(s, (y.shape[0],) + s.shape[-2:]).copy() if s.ndim == 2 else s
        st = torch.as_tensor(s, dtype=DTYPE)
    elif model.H is not None:
        raise ShapeError("model has input weights but no stimulus was given")
    yt = torch.as_tensor(y, dtype=DTYPE)
    enc = None
    with torch.no_grad():
        if proposal == "encoder":
            if encoder is None:
                raise ValueError("the product proposal needs an encoder")
            enc = encoder(yt)
        res = run_smc(TensorModel.from_model(model), yt, K, rng, proposal, st, enc, resampling)
    logw = res.logw.numpy()
    parts = res.particles.numpy()
    anc = res.ancestors.numpy()
    from scipy.special import logsumexp
    terms = logsumexp(logw, axis=-1) - np.log(K)
    z = np.stack([resolve_ancestry(p, a) for p, a in zip(parts, anc)])
    ens = ParticleEnsemble(z, parts, anc, logw, terms)
    if single:
        ens = ParticleEnsemble(z[0], parts[0], anc[0], logw[0], terms[0])
    return ens


def elbo_value(ensemble: ParticleEnsemble):
    """The sweep's log p_hat; averaging over sweeps estimates the ELBO."""
    return ensemble.logZ_hat
