"""Emission distributions G(z) and the initial-state Gaussian."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import gammaln

from .errors import NotPositiveDefiniteError, ShapeError

LOG_2PI = np.log(2.0 * np.pi)


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class ObservationHead:
    """Observation model attached to the first ``n_obs`` units of the network.

    ``kind`` is ``"gaussian"`` (y ~ N(Bz, diag(sigma_y))) or ``"poisson"``
    (y_i ~ Pois(exposure * softplus(gain_i (Mz)_i - bias_i))).  For the
    Gaussian head the readout B defaults to ``diag(gain) @ M[:n_obs]``;
    ``readout`` overrides it with an arbitrary N_y x R matrix.
    """

    kind: str
    n_obs: int
    sigma_y: Optional[np.ndarray] = None
    gain: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    exposure: float = 1.0
    readout: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson"):
            raise ValueError(f"unknown observation kind {self.kind!r}")
        n = int(self.n_obs)
        object.__setattr__(self, "n_obs", n)
        gain = np.ones(n) if self.gain is None else np.asarray(self.gain, dtype=float)
        bias = np.zeros(n) if self.bias is None else np.asarray(self.bias, dtype=float)
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "bias", bias)
        if gain.shape != (n,) or bias.shape != (n,):
            raise ShapeError("gain and bias must have shape (n_obs,)")
        if self.kind == "gaussian":
            sig = np.full(n, 0.01) if self.sigma_y is None else np.asarray(self.sigma_y, dtype=float)
            if sig.shape != (n,):
                raise ShapeError("sigma_y holds the diagonal variances, shape (n_obs,)")
            if not np.all(sig > 0):
                raise NotPositiveDefiniteError("observation variances must be > 0")
            object.__setattr__(self, "sigma_y", sig)
        if self.readout is not None:
            B = np.asarray(self.readout, dtype=float)
            if B.ndim != 2 or B.shape[0] != n:
                raise ShapeError("readout must be n_obs x R")
            object.__setattr__(self, "readout", B)
        if not self.exposure > 0:
            raise ValueError("exposure must be positive")

    @classmethod
    def gaussian(cls, n_obs, sigma_y=0.01, gain=None, readout=None):
        sig = np.broadcast_to(np.asarray(sigma_y, dtype=float), (n_obs,)).copy()
        return cls("gaussian", n_obs, sigma_y=sig, gain=gain, readout=readout)

    @classmethod
    def poisson(cls, n_obs, gain=1.0, bias=0.0, exposure=1.0):
        g = np.broadcast_to(np.asarray(gain, dtype=float), (n_obs,)).copy()
        b = np.broadcast_to(np.asarray(bias, dtype=float), (n_obs,)).copy()
        return cls("poisson", n_obs, gain=g, bias=b, exposure=exposure)

    def replace(self, **kw):
        return replace(self, **kw)

    def readout_matrix(self, M):
        """The linear map from latents to the observed units' mean/pre-activation."""
        if self.readout is not None:
            return self.readout
        M = np.asarray(M, dtype=float)
        if M.shape[0] < self.n_obs:
            raise ShapeError(f"head observes {self.n_obs} units but M has {M.shape[0]} rows")
        return self.gain[:, None] * M[: self.n_obs]

    def rate(self, z, M):
        """Poisson rate per bin (Poisson heads only)."""
        pre = np.asarray(z, dtype=float) @ self.readout_matrix(M).T - self.bias
        return self.exposure * softplus(pre)


def _check_counts(y):
    y = np.asarray(y)
    if np.any(y < 0) or np.any(np.asarray(y, dtype=float) != np.round(y)):
        raise ValueError("Poisson observations must be non-negative integers")
    return np.asarray(y, dtype=float)


def obs_log_density(head: ObservationHead, z, M, y):
    """log p(y | z); broadcasts over leading axes of ``z`` and ``y``."""
    z = np.asarray(z, dtype=float)
    if head.kind == "gaussian":
        y = np.asarray(y, dtype=float)
        mean = z @ head.readout_matrix(M).T
        r = y - mean
        return -0.5 * (np.sum(r * r / head.sigma_y, axis=-1)
                       + np.sum(np.log(head.sigma_y)) + head.n_obs * LOG_2PI)
    y = _check_counts(y)
    lam = head.rate(z, M)
    if not np.all(np.isfinite(lam)):
        raise FloatingPointError("non-finite Poisson rate")
    with np.errstate(divide="ignore", invalid="ignore"):
        ylog = np.where(y > 0, y * np.log(lam), 0.0)
    return np.sum(ylog - lam - gammaln(y + 1.0), axis=-1)


def obs_sample(head: ObservationHead, z, M, rng: np.random.Generator):
    z = np.asarray(z, dtype=float)
    if head.kind == "gaussian":
        mean = z @ head.readout_matrix(M).T
        return mean + np.sqrt(head.sigma_y) * rng.standard_normal(mean.shape)
    return rng.poisson(head.rate(z, M)).astype(np.int64)


def _chol(S):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError("covariance must be square")
    if not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise NotPositiveDefiniteError("covariance is not symmetric")
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("covariance is not positive definite") from exc


def initial_sample(mu, Sigma, rng: np.random.Generator, size=()):
    mu = np.asarray(mu, dtype=float)
    L = _chol(Sigma)
    shape = tuple(np.atleast_1d(size)) if size != () else ()
    eps = rng.standard_normal(shape + mu.shape)
    return mu + eps @ L.T


def gaussian_log_density(mu, Sigma, z):
    mu = np.asarray(mu, dtype=float)
    L = _chol(Sigma)
    diff = np.asarray(z, dtype=float) - mu
    sol = np.linalg.solve(L, diff.reshape(-1, mu.size).T).T.reshape(diff.shape)
    return -0.5 * (np.sum(sol ** 2, axis=-1) + mu.size * LOG_2PI) - np.sum(np.log(np.diag(L)))


def initial_log_density(mu, Sigma, z):
    return gaussian_log_density(mu, Sigma, z)
