"""Causal 1-D convolutional encoder e(z_t | y_{t-t':t}) for the product proposal."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

LOGVAR_OFFSET = math.log(0.01)
PADDING_MODES = ("zero", "circular", "reflect")


@dataclass(frozen=True)
class CausalConvSpec:
    """Kernel sizes and channel counts; the last entry is shared by both heads.

    kernels=(21, 11, 1), channels=(64, 64, R) gives two GeLU hidden layers
    and two affine output heads of width R.
    """

    n_in: int
    kernels: tuple = (21, 11, 1)
    channels: tuple = (64, 64, 2)
    padding: str = "zero"

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.kernels) != len(self.channels) or not self.kernels:
            raise ShapeError("kernels and channels need the same, nonzero length")
        if min(self.kernels) < 1:
            raise ValueError("kernel sizes must be >= 1")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}")

    @property
    def R(self):
        return self.channels[-1]

    @property
    def receptive_field(self):
        return 1 + sum(k - 1 for k in self.kernels)

    def layers(self):
        """(kernel, in, out) per hidden layer, then the head layer."""
        ins = (self.n_in,) + self.channels[:-1]
        return list(zip(self.kernels, ins, self.channels))


def gelu_tanh(x):
    return F.gelu(x, approximate="tanh")


class CausalConvEncoder(nn.Module):
    """Maps y (B, T, N_y) to (means, logvars), each (B, T, R)."""

    def __init__(self, spec: CausalConvSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        layers = spec.layers()
        self.hidden = nn.ModuleList(
            nn.Conv1d(cin, cout, k, dtype=torch.float64) for k, cin, cout in layers[:-1])
        k, cin, cout = layers[-1]
        self.mean_head = nn.Conv1d(cin, cout, k, dtype=torch.float64)
        self.logvar_head = nn.Conv1d(cin, cout, k, dtype=torch.float64)
        if rng is not None:
            init_encoder(self, rng)

    def _pad(self, x, k):
        if k == 1:
            return x
        mode = self.spec.padding
        if mode == "zero":
            return F.pad(x, (k - 1, 0))
        # circular / reflect wrap from the end or mirror the start; with
        # these modes the first k-1 outputs see samples beyond t
        return F.pad(x, (k - 1, 0), mode=mode)

    def forward(self, y):
        if y.shape[-1] != self.spec.n_in:
            raise ShapeError(f"encoder expects {self.spec.n_in} channels, got {y.shape[-1]}")
        h = y.transpose(1, 2)
        for conv in self.hidden:
            h = gelu_tanh(conv(self._pad(h, conv.kernel_size[0])))
        k = self.mean_head.kernel_size[0]
        hp = self._pad(h, k)
        mean = self.mean_head(hp).transpose(1, 2)
        logvar = self.logvar_head(hp).transpose(1, 2)
        return mean, logvar


def init_encoder(enc: CausalConvEncoder, rng: np.random.Generator):
    """Fan-in uniform init from a numpy Generator; log-var bias + log(0.01)."""
    with torch.no_grad():
        for conv in list(enc.hidden) + [enc.mean_head, enc.logvar_head]:
            fan_in = conv.in_channels * conv.kernel_size[0]
            bound = 1.0 / math.sqrt(fan_in)
            conv.weight.copy_(torch.as_tensor(rng.uniform(-bound, bound, conv.weight.shape)))
            conv.bias.copy_(torch.as_tensor(rng.uniform(-bound, bound, conv.bias.shape)))
        enc.logvar_head.bias.add_(LOGVAR_OFFSET)
    return enc


def encode(enc: CausalConvEncoder, y):
    """numpy convenience: y (T, N_y) or (B, T, N_y) -> (means, logvars)."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 2
    with torch.no_grad():
        m, lv = enc(torch.as_tensor(y[None] if single else y, dtype=torch.float64))
    m, lv = m.numpy(), lv.numpy()
    return (m[0], lv[0]) if single else (m, lv)


def encoder_state(enc: CausalConvEncoder):
    return {k: v.detach().numpy().copy() for k, v in enc.state_dict().items()}


def load_encoder_state(enc: CausalConvEncoder, state):
    enc.load_state_dict({k: torch.as_tensor(np.asarray(v)) for k, v in state.items()})
    return enc
