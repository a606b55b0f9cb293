"""Constrained parameterisation, ELBO gradients, RAdam and the fit loop.

Gradients are reverse-mode through the reparameterised particle paths
(torch autograd); ancestor indices and the normalised weights used for
resampling are constants, so no score-function term enters.
"""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .encoder import CausalConvEncoder, CausalConvSpec
from .errors import ConfigError, ModalityError, NonFiniteGradientError
from .model import LowRankRNN, PiecewiseLinearSpec
from .observations import ObservationHead
from .smc import DTYPE, TensorModel, run_smc

# ----------------------------------------------------------------------
# constraint maps (numpy)
# ----------------------------------------------------------------------


def constrain_leak(a_tilde):
    return np.exp(-np.exp(a_tilde))


def unconstrain_leak(a):
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0) or np.any(a >= 1):
        raise ValueError("leak must lie strictly inside (0, 1)")
    return np.log(-np.log(a))


def chol_from_raw(raw):
    """Lower-triangular C with C_ii = exp(raw_ii / 2)."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    return np.tril(raw, -1) + np.diag(np.exp(np.diag(raw) / 2.0))


def cov_from_raw(raw):
    C = chol_from_raw(raw)
    return C @ C.T


def raw_from_cov(S):
    L = np.linalg.cholesky(np.asarray(S, dtype=float))
    return np.tril(L, -1) + np.diag(2.0 * np.log(np.diag(L)))


def diag_from_raw(raw):
    return np.exp(np.asarray(raw, dtype=float))


def raw_from_diag(v):
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    return np.log(v)


# ----------------------------------------------------------------------
# parameter container
# ----------------------------------------------------------------------

def _p(x):
    return nn.Parameter(torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE).clone())


class LowRankParams(nn.Module):
    """Unconstrained parameters of a LowRankRNN.

    cov="full" stores Sigma_z and Sigma_z1 as raw Cholesky factors,
    cov="diag" as log variances (required by the product proposal).
    """

    def __init__(self, model: LowRankRNN, cov="full", learn_gain=None):
        super().__init__()
        if cov not in ("full", "diag"):
            raise ConfigError(f"cov must be 'full' or 'diag', got {cov!r}")
        self.cov = cov
        self.dt = model.dt
        self.kind = model.activation.kind
        head = model.obs_head
        self.head_kind = head.kind
        self.n_obs = head.n_obs
        self.exposure = head.exposure
        if head.readout is not None:
            raise ConfigError("training supports only M-tied readouts")
        self.M = _p(model.M)
        self.Ntilde = _p(model.Ntilde)
        if self.kind in ("relu", "clipped"):
            self.h = _p(model.activation.unit_bias())
        else:
            self.thresholds = _p(model.activation.thresholds)
            self.register_buffer("slopes", torch.as_tensor(model.activation.slopes))
        self.H = None if model.H is None else _p(model.H)
        self.a_tilde = _p(unconstrain_leak(model.a))
        self.mu_z1 = _p(model.mu_z1)
        if cov == "full":
            self.z_raw = _p(raw_from_cov(model.Sigma_z))
            self.z1_raw = _p(raw_from_cov(model.Sigma_z1))
        else:
            for S, name in ((model.Sigma_z, "Sigma_z"), (model.Sigma_z1, "Sigma_z1")):
                if np.any(S != np.diag(np.diag(S))):
                    raise ConfigError(f"diagonal parameterisation needs a diagonal {name}")
            self.z_raw = _p(raw_from_diag(np.diag(model.Sigma_z)))
            self.z1_raw = _p(raw_from_diag(np.diag(model.Sigma_z1)))
        if learn_gain is None:
            learn_gain = head.kind == "poisson"
        self.learn_gain = learn_gain
        if learn_gain:
            self.gain = _p(head.gain)
        else:
            self.register_buffer("gain", torch.as_tensor(head.gain.copy()))
        if head.kind == "gaussian":
            self.logsig_y = _p(np.log(head.sigma_y))
        else:
            self.bias = _p(head.bias)

    # -- constrained views --------------------------------------------------
    def _chol(self, raw):
        if self.cov == "full":
            return torch.tril(raw, -1) + torch.diag(torch.exp(torch.diagonal(raw) / 2.0))
        return torch.diag(torch.exp(raw / 2.0))

    def _activation(self):
        if self.kind == "relu":
            return torch.ones_like(self.h).unsqueeze(-1), self.h.unsqueeze(-1)
        if self.kind == "clipped":
            sl = torch.tensor([1.0, -1.0], dtype=DTYPE).expand(self.h.shape[0], 2)
            return sl, torch.stack([-self.h, torch.zeros_like(self.h)], -1)
        return self.slopes, self.thresholds

    def tensor_model(self) -> TensorModel:
        slopes, th = self._activation()
        return TensorModel(
            M=self.M, Ntilde=self.Ntilde, a=torch.exp(-torch.exp(self.a_tilde)),
            slopes=slopes, thresholds=th,
            chol_z=self._chol(self.z_raw), mu_z1=self.mu_z1, chol_z1=self._chol(self.z1_raw),
            head_kind=self.head_kind, readout=self.gain.unsqueeze(-1) * self.M[: self.n_obs],
            sigma_y=torch.exp(self.logsig_y) if self.head_kind == "gaussian" else None,
            bias=self.bias if self.head_kind == "poisson" else None,
            exposure=self.exposure, H=self.H,
        )

    def to_model(self) -> LowRankRNN:
        """Constrained numpy model (detached)."""
        n = lambda t: t.detach().numpy().copy()
        slopes, th = self._activation()
        act = PiecewiseLinearSpec(n(slopes), n(th), self.kind)
        Cz, C1 = n(self._chol(self.z_raw)), n(self._chol(self.z1_raw))
        if self.head_kind == "gaussian":
            head = ObservationHead.gaussian(self.n_obs, np.exp(n(self.logsig_y)), gain=n(self.gain))
        else:
            head = ObservationHead.poisson(self.n_obs, n(self.gain), n(self.bias), self.exposure)
        return LowRankRNN(
            M=n(self.M), Ntilde=n(self.Ntilde), a=float(np.exp(-np.exp(n(self.a_tilde)))),
            activation=act, Sigma_z=Cz @ Cz.T, mu_z1=n(self.mu_z1), Sigma_z1=C1 @ C1.T,
            obs_head=head, dt=self.dt, H=None if self.H is None else n(self.H),
        )

    def blocks(self):
        return dict(self.named_parameters())


def unconstrain(model: LowRankRNN, cov="full", learn_gain=None) -> LowRankParams:
    return LowRankParams(model, cov, learn_gain)


def constrain(params: LowRankParams) -> LowRankRNN:
    return params.to_model()


# ----------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------

@dataclass
class ModelInit:
    N: int
    R: int
    n_obs: int
    obs_kind: str = "gaussian"
    activation: str = "relu"
    n_inputs: int = 0
    dt: float = 1.0
    a: float = 0.9
    sigma_z: float = 0.01
    sigma_z1: float = 1.0
    sigma_y: float = 0.01
    exposure: float = 1.0


def init_model(spec: ModelInit, rng: np.random.Generator) -> LowRankRNN:
    N, R = spec.N, spec.R
    if spec.n_obs > N:
        raise ConfigError("n_obs cannot exceed N")
    Nt = rng.uniform(-1, 1, (N, R)) / math.sqrt(N)
    M = rng.uniform(-1, 1, (N, R)) / math.sqrt(R)
    H = rng.uniform(-1, 1, (N, spec.n_inputs)) / math.sqrt(spec.n_inputs) if spec.n_inputs else None
    h = rng.uniform(-1, 1, N) / math.sqrt(N)
    act = PiecewiseLinearSpec.from_bias(spec.activation, h)
    if spec.obs_kind == "gaussian":
        head = ObservationHead.gaussian(spec.n_obs, spec.sigma_y)
    elif spec.obs_kind == "poisson":
        head = ObservationHead.poisson(spec.n_obs, rng.normal(0.0, math.sqrt(2.0 / R), spec.n_obs),
                                       0.0, spec.exposure)
    else:
        raise ConfigError(f"unknown observation kind {spec.obs_kind!r}")
    return LowRankRNN(M=M, Ntilde=Nt, a=spec.a, activation=act, Sigma_z=spec.sigma_z * np.eye(R),
                      mu_z1=np.zeros(R), Sigma_z1=spec.sigma_z1 * np.eye(R), obs_head=head,
                      dt=spec.dt, H=H)


# ----------------------------------------------------------------------
# optimiser and schedule
# ----------------------------------------------------------------------

class RAdam:
    """Rectified Adam over a list of tensors (updated in place)."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @property
    def rho_inf(self):
        return 2.0 / (1.0 - self.b2) - 1.0

    def rho(self, t):
        return self.rho_inf - 2.0 * t * self.b2 ** t / (1.0 - self.b2 ** t)

    @torch.no_grad()
    def step(self, grads, lr):
        self.t += 1
        t, b1, b2 = self.t, self.b1, self.b2
        rho_t = self.rho(t)
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        if rho_t > 5.0:
            ri = self.rho_inf
            rect = math.sqrt((rho_t - 4) * (rho_t - 2) * ri / ((ri - 4) * (ri - 2) * rho_t))
        else:
            rect = None
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            mhat = m / bc1
            if rect is None:
                p.sub_(lr * mhat)
            else:
                p.sub_(lr * rect * mhat * math.sqrt(bc2) / (v.sqrt() + self.eps))

    def state(self):
        return {"t": self.t, "m": [x.numpy().copy() for x in self.m],
                "v": [x.numpy().copy() for x in self.v]}

    def load_state(self, st):
        self.t = int(st["t"])
        for dst, src in zip(self.m + self.v, list(st["m"]) + list(st["v"])):
            dst.copy_(torch.as_tensor(np.asarray(src)))


def optimizer_step(params, grads, state: RAdam, lr):
    """Functional wrapper: ``state`` owns the moment buffers of ``params``."""
    state.step(grads, lr)
    return params


def lr_schedule(epoch, config):
    E = config.epochs
    if E <= 1:
        return config.lr_start
    return config.lr_start * (config.lr_end / config.lr_start) ** (epoch / (E - 1))


# ----------------------------------------------------------------------
# ELBO gradient
# ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batches_per_epoch: int = 40
    batch_size: int = 10
    K: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    seed: int = 0
    proposal: str = "optimal"
    gradient_mode: str = "reparam_stop_resampling"
    resampling: str = "multinomial"
    seq_len: Optional[int] = None
    grad_clip: float = 100.0
    cov: Optional[str] = None
    encoder: Optional[dict] = None

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.gradient_mode != "reparam_stop_resampling":
            raise ConfigError("only gradient_mode='reparam_stop_resampling' is implemented")
        if self.proposal not in ("optimal", "encoder", "bootstrap"):
            raise ConfigError(f"unknown proposal {self.proposal!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.K < 1 or self.batches_per_epoch < 1:
            raise ConfigError("epochs, batch sizes and K must be positive")

    @property
    def cov_kind(self):
        return self.cov or ("diag" if self.proposal == "encoder" else "full")


def _as_t(x):
    return None if x is None else torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def elbo_grad(params: LowRankParams, encoder, y, rng: np.random.Generator, K, proposal="optimal",
              s=None, resampling="multinomial"):
    """Mean log p_hat over the batch and its gradient per parameter block.

    Returns (elbo, grads) with grads a dict name -> tensor; encoder blocks
    are prefixed ``encoder.``.
    """
    modules = [params] + ([encoder] if encoder is not None else [])
    for mod in modules:
        mod.zero_grad(set_to_none=True)
    yt = _as_t(y)
    tm = params.tensor_model()
    enc = encoder(yt) if proposal == "encoder" else None
    res = run_smc(tm, yt, K, rng, proposal, _as_t(s), enc, resampling)
    elbo = res.logZ.mean()
    (-elbo).backward()
    grads = {}
    for prefix, mod in (("", params), ("encoder.", encoder)):
        if mod is None:
            continue
        for name, p in mod.named_parameters():
            g = p.grad
            # grad is ascent direction for the ELBO
            grads[prefix + name] = torch.zeros_like(p) if g is None else -g
    bad = [k for k, g in grads.items() if not torch.all(torch.isfinite(g))]
    if bad or not math.isfinite(elbo.item()):
        raise NonFiniteGradientError(bad or ["elbo"])
    return elbo.item(), grads


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(torch.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [g * scale for g in grads]
    return grads, total


# ----------------------------------------------------------------------
# fit
# ----------------------------------------------------------------------

@dataclass
class FitResult:
    model: LowRankRNN
    params: LowRankParams
    encoder: Optional[CausalConvEncoder]
    log: list
    optimizer: Optional[RAdam] = None
    rollbacks: int = 0
    rng_state: Optional[dict] = None


def _batch(rng, y, s, batch_size, seq_len):
    n, T = y.shape[:2]
    idx = rng.integers(0, n, batch_size)
    if seq_len is None or seq_len >= T:
        return y[idx], None if s is None else s[idx]
    start = rng.integers(0, T - seq_len + 1, batch_size)
    win = start[:, None] + np.arange(seq_len)
    yb = y[idx[:, None], win]
    sb = None if s is None else s[idx[:, None], win]
    return yb, sb


def build_encoder(cfg: TrainConfig, n_obs, R, rng):
    enc_cfg = dict(cfg.encoder or {})
    kernels = tuple(enc_cfg.get("kernels", (21, 11, 1)))
    hidden = tuple(enc_cfg.get("channels", (64, 64)))[: len(kernels) - 1]
    spec = CausalConvSpec(n_in=n_obs, kernels=kernels, channels=hidden + (R,),
                          padding=enc_cfg.get("padding", "zero"))
    return CausalConvEncoder(spec, rng)


def fit(y, init, config: TrainConfig, s=None, modality=None, log_path=None, callback=None):
    """Fit by minibatch ELBO ascent.

    ``init`` is a ModelInit (drawn with the config seed) or a LowRankRNN
    used verbatim as the starting point.  Returns a FitResult whose ``log``
    holds one dict per epoch: epoch, elbo, lr, wall_time.
    """
    rng = np.random.default_rng(config.seed)
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        y = y[None]
    s = None if s is None else np.asarray(s, dtype=float)
    model0 = init if isinstance(init, LowRankRNN) else init_model(init, rng)
    if modality is not None and modality != model0.obs_head.kind:
        raise ModalityError(f"dataset modality {modality!r} does not match head {model0.obs_head.kind!r}")
    if y.shape[-1] != model0.obs_head.n_obs:
        raise ModalityError("observation channel count does not match the head")
    if config.proposal == "optimal" and model0.obs_head.kind != "gaussian":
        raise ConfigError("the optimal proposal needs Gaussian observations")
    params = LowRankParams(model0, config.cov_kind)
    encoder = build_encoder(config, y.shape[-1], model0.R, rng) if config.proposal == "encoder" else None
    if config.epochs == 0:
        return FitResult(model0, params, encoder, [], rng_state=rng.bit_generator.state)
    plist = list(params.parameters()) + ([] if encoder is None else list(encoder.parameters()))
    opt = RAdam(plist)
    lr_scale = 1.0
    rollbacks = 0
    log = []
    t0 = time.perf_counter()
    fh = open(log_path, "w") if log_path else None
    try:
        epoch = 0
        while epoch < config.epochs:
            snap = (copy.deepcopy(params.state_dict()),
                    None if encoder is None else copy.deepcopy(encoder.state_dict()),
                    copy.deepcopy(opt.state()), rng.bit_generator.state)
            lr = lr_schedule(epoch, config) * lr_scale
            elbos = []
            try:
                for _ in range(config.batches_per_epoch):
                    yb, sb = _batch(rng, y, s, config.batch_size, config.seq_len)
                    elbo, grads = elbo_grad(params, encoder, yb, rng, config.K, config.proposal,
                                            sb, config.resampling)
                    gl = [-grads[n] for n, _ in params.named_parameters()]
                    if encoder is not None:
                        gl += [-grads["encoder." + n] for n, _ in encoder.named_parameters()]
                    gl, _ = clip_global_norm(gl, config.grad_clip)
                    opt.step(gl, lr)
                    elbos.append(elbo)
                    if not all(torch.all(torch.isfinite(p)) for p in plist):
                        raise NonFiniteGradientError(["parameters"])
            except (NonFiniteGradientError, FloatingPointError) as exc:
                rollbacks += 1
                if rollbacks > 1:
                    raise
                params.load_state_dict(snap[0])
                if encoder is not None:
                    encoder.load_state_dict(snap[1])
                opt.load_state(snap[2])
                rng.bit_generator.state = snap[3]
                lr_scale *= 0.5
                continue
            rec = {"epoch": epoch, "elbo": float(np.mean(elbos)), "lr": lr,
                   "wall_time": time.perf_counter() - t0}
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if callback is not None:
                callback(rec, params)
            epoch += 1
    finally:
        if fh:
            fh.close()
    return FitResult(params.to_model(), params, encoder, log, opt, rollbacks, rng.bit_generator.state)
