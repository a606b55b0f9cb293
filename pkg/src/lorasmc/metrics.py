"""Evaluation statistics: state-space KL, spectral Hellinger distance, spike
statistics, correlation and spectral tools, linear decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy.ndimage import gaussian_filter1d
from scipy.special import logsumexp

KDE_MAX_POINTS = 20000


@dataclass(frozen=True)
class MetricConfig:
    kde_sigma: float = 1.0
    mc_samples: int = 1000
    spectral_smooth_sigma: float = 20.0
    hann_window: int = 15
    seed: int = 0

    def __post_init__(self):
        if min(self.kde_sigma, self.mc_samples, self.spectral_smooth_sigma, self.hann_window) <= 0:
            raise ValueError("metric settings must be positive")


def _2d(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _kde_logpdf(points, centers, sigma):
    """log of the mean of isotropic Gaussians at ``centers``, at ``points``."""
    C = centers.shape[1]
    out = np.empty(len(points))
    for i in range(0, len(points), 256):
        p = points[i:i + 256]
        d2 = ((p[:, None, :] - centers[None]) ** 2).sum(-1)
        out[i:i + 256] = logsumexp(-0.5 * d2 / sigma ** 2, axis=1)
    return out - np.log(len(centers)) - 0.5 * C * np.log(2 * np.pi * sigma ** 2)


def d_stsp(truth, gen, cfg: MetricConfig = MetricConfig(), rng=None):
    """Monte Carlo KL(p_truth || p_gen) between Gaussian KDEs of two state sets."""
    x, y = _2d(truth), _2d(gen)
    if x.shape[1] != y.shape[1]:
        raise ValueError("channel counts differ")
    if len(x) < 2 or len(y) < 2:
        raise ValueError("need at least two time points")
    if x is y or (x.shape == y.shape and np.array_equal(x, y)):
        return 0.0
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n = cfg.mc_samples
    idx = rng.choice(len(x), n, replace=len(x) < n)
    samples = x[idx]
    cx = x if len(x) <= KDE_MAX_POINTS else x[rng.choice(len(x), KDE_MAX_POINTS, replace=False)]
    cy = y if len(y) <= KDE_MAX_POINTS else y[rng.choice(len(y), KDE_MAX_POINTS, replace=False)]
    return float(np.mean(_kde_logpdf(samples, cx, cfg.kde_sigma) - _kde_logpdf(samples, cy, cfg.kde_sigma)))


def smoothed_spectrum(x, sigma=20.0):
    """Per-channel one-sided FFT power, Gaussian-smoothed and normalised."""
    x = _2d(x)
    p = np.abs(np.fft.rfft(x - x.mean(0), axis=0)) ** 2
    p = gaussian_filter1d(p, sigma, axis=0, mode="nearest")
    tot = p.sum(0)
    if np.any(tot <= 0):
        raise ValueError("zero-power channel")
    return p / tot


def d_h(truth, gen, cfg: MetricConfig = MetricConfig()):
    """Mean over channels of the Hellinger distance between smoothed spectra."""
    x, y = _2d(truth), _2d(gen)
    if x.shape[1] != y.shape[1]:
        raise ValueError("channel counts differ")
    if min(len(x), len(y)) < 64:
        raise ValueError("need T >= 64")
    T = min(len(x), len(y))
    p = smoothed_spectrum(x[:T], cfg.spectral_smooth_sigma)
    q = smoothed_spectrum(y[:T], cfg.spectral_smooth_sigma)
    hd = np.sqrt(np.sum((np.sqrt(p) - np.sqrt(q)) ** 2, axis=0)) / np.sqrt(2.0)
    return float(np.clip(hd, 0.0, 1.0).mean())


def hann_smooth(x, window=15):
    """Same-length Hann smoothing; partial windows at the edges are renormalised."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x = _2d(x)
    if window > len(x):
        raise ValueError("window longer than the signal")
    w = np.hanning(window + 2)[1:-1] if window > 2 else np.ones(window)
    num = np.stack([np.convolve(c, w, mode="same") for c in x.T], 1)
    den = np.convolve(np.ones(len(x)), w, mode="same")[:, None]
    out = num / den
    return out[:, 0] if squeeze else out


def _isis(train, multi_spike="zero_gap"):
    """ISIs in bins of one count train."""
    bins = np.flatnonzero(train > 0)
    gaps = np.diff(bins).astype(float)
    if multi_spike == "zero_gap":
        extra = np.repeat(0.0, int(np.sum(np.maximum(train[bins] - 1, 0))))
        gaps = np.concatenate([gaps, extra])
    return gaps, len(bins)


def spike_stats(spikes, bin_s, multi_spike="zero_gap"):
    """Per channel: rate (Hz), mean ISI (s), ISI CV.  NaN where < 2 spike bins."""
    x = np.asarray(spikes)
    x = x[:, None] if x.ndim == 1 else x
    if np.any(x < 0) or np.any(x != np.round(x)):
        raise ValueError("spike counts must be non-negative integers")
    T, C = x.shape
    rate = x.sum(0) / (T * bin_s)
    mean_isi = np.full(C, np.nan)
    cv = np.full(C, np.nan)
    for c in range(C):
        gaps, nb = _isis(x[:, c], multi_spike)
        if nb < 2:
            continue
        gaps = gaps * bin_s
        mean_isi[c] = gaps.mean()
        cv[c] = gaps.std() / gaps.mean() if gaps.mean() > 0 else np.nan
    return {"rate": rate, "mean_isi": mean_isi, "isi_cv": cv}


def pairwise_correlations(x):
    """Pearson matrix; zero-variance channels get NaN rows/cols (flagged)."""
    x = _2d(x)
    sd = x.std(0)
    flat = sd == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.corrcoef(x, rowvar=False)
    r = np.atleast_2d(r)
    r[flat, :] = np.nan
    r[:, flat] = np.nan
    np.fill_diagonal(r, np.where(flat, np.nan, 1.0))
    return r


def autocorrelation(x, max_lag, return_std=False):
    """Average normalised autocorrelation over segments of length 2*max_lag."""
    x = np.asarray(x, dtype=float).ravel()
    L = 2 * max_lag
    if len(x) < L:
        raise ValueError("signal shorter than 2 * max_lag")
    x = x - x.mean()
    nseg = len(x) // L
    acfs = []
    for k in range(nseg):
        seg = x[k * L:(k + 1) * L]
        full = np.correlate(seg, seg, mode="full")[L - 1:L - 1 + max_lag + 1]
        full = full / (L - np.arange(max_lag + 1))  # unbiased per-lag average
        if full[0] <= 0:
            continue
        acfs.append(full / full[0])
    acfs = np.array(acfs)
    if return_std:
        return acfs.mean(0), acfs.std(0)
    return acfs.mean(0)


def autocorrelation_trials(x, max_lag):
    """Mean autocorrelation over trials (n, T) with the segment rule per trial."""
    x = np.asarray(x, dtype=float)
    return np.mean([autocorrelation(row, max_lag) for row in x], axis=0)


def acf_peak_lag(acf, min_lag=1):
    """First local maximum after the first zero crossing, refined parabolically."""
    acf = np.asarray(acf, dtype=float)
    neg = np.flatnonzero(acf[min_lag:] < 0)
    start = min_lag + (neg[0] if len(neg) else 0)
    seg = acf[start:]
    if len(seg) < 3:
        return np.nan
    k = start + int(np.argmax(seg))
    if 0 < k < len(acf) - 1:
        y0, y1, y2 = acf[k - 1], acf[k], acf[k + 1]
        den = y0 - 2 * y1 + y2
        if den != 0:
            return k + 0.5 * (y0 - y2) / den
    return float(k)


def power_spectrum(x, fs=1.0, welch_nperseg=None):
    """One-sided power spectral density per channel."""
    x = _2d(x)
    if welch_nperseg is None:
        f, p = signal.periodogram(x, fs=fs, axis=0)
    else:
        f, p = signal.welch(x, fs=fs, nperseg=welch_nperseg, axis=0)
    return f, p


def peak_frequencies(freqs, power, n_peaks=1, exclude_dc=False):
    p = np.asarray(power, dtype=float)
    p = p[:, None] if p.ndim == 1 else p
    out = []
    for c in range(p.shape[1]):
        col = p[:, c].copy()
        if exclude_dc:
            col[0] = -np.inf
        pk, _ = signal.find_peaks(np.concatenate([[-np.inf], col, [-np.inf]]))
        pk = pk - 1
        order = pk[np.argsort(col[pk])[::-1]][:n_peaks]
        out.append(np.sort(freqs[order]))
    return out if len(out) > 1 else out[0]


def coherence(x, y, fs=1.0, nperseg=256):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if nperseg > len(x):
        raise ValueError("nperseg longer than the signal")
    f, c = signal.coherence(x, y, fs=fs, nperseg=nperseg)
    return f, np.clip(c, 0.0, 1.0)


@dataclass
class DecodeResult:
    weights: np.ndarray   # (F + 1, G), intercept first
    r2: float
    ridge: bool


def _r2(y, yhat):
    ss_res = np.sum((y - yhat) ** 2)
    ss_tot = np.sum((y - y.mean(0)) ** 2)
    return float(1.0 - ss_res / ss_tot)


def linear_decode(features, targets, test_features=None, test_targets=None, ridge=1e-6):
    """OLS with intercept; R^2 on the held-out split when given."""
    X, Y = _2d(features), _2d(targets)
    if len(X) <= X.shape[1]:
        raise ValueError("need more samples than features")
    Xa = np.hstack([np.ones((len(X), 1)), X])
    used_ridge = np.linalg.matrix_rank(Xa) < Xa.shape[1]
    if used_ridge:
        W = np.linalg.solve(Xa.T @ Xa + ridge * np.eye(Xa.shape[1]), Xa.T @ Y)
    else:
        W = np.linalg.lstsq(Xa, Y, rcond=None)[0]
    if test_features is not None:
        Xt, Yt = _2d(test_features), _2d(test_targets)
    else:
        Xt, Yt = X, Y
    pred = np.hstack([np.ones((len(Xt), 1)), Xt]) @ W
    return DecodeResult(W, _r2(Yt, pred), bool(used_ridge))


def metric_report(truth, gen, names, cfg: MetricConfig = MetricConfig()):
    """Flat key/value report; truth and gen are (T, C) or (n, T, C)."""
    truth = np.asarray(truth, dtype=float)
    gen = np.asarray(gen, dtype=float)
    out = {}
    for name in names:
        if name == "d_stsp":
            out[name] = d_stsp(truth.reshape(-1, truth.shape[-1]), gen.reshape(-1, gen.shape[-1]), cfg)
        elif name == "d_h":
            if truth.ndim == 3:
                T = min(truth.shape[1], gen.shape[1])
                if T >= 64:
                    vals = [d_h(a[:T], b[:T], cfg) for a, b in zip(truth, gen)]
                else:
                    vals = [d_h(truth.reshape(-1, truth.shape[-1]), gen.reshape(-1, gen.shape[-1]), cfg)]
                out[name] = float(np.mean(vals))
            else:
                out[name] = d_h(truth, gen, cfg)
        elif name == "mean_corr_error":
            ct = pairwise_correlations(truth.reshape(-1, truth.shape[-1]))
            cg = pairwise_correlations(gen.reshape(-1, gen.shape[-1]))
            iu = np.triu_indices_from(ct, 1)
            out[name] = float(np.nanmean(np.abs(ct[iu] - cg[iu])))
        else:
            raise ValueError(f"unknown metric {name!r}")
    return out
