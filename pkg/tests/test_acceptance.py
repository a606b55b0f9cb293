"""Acceptance criteria 1-9.  Each test carries ``acceptance(n)``; the run
ends with one PASS/FAIL line per criterion (see conftest)."""
import time

import numpy as np
import pytest
import torch
import yaml
from scipy import stats

from conftest import ACCEPTANCE, note, random_model
from gradcheck import fd_errors
from oracles import brute_force_points, dense_sign_patterns, kalman_loglik, linear_lgssm_model
from lorasmc.cli import main
from lorasmc.encoder import CausalConvEncoder, CausalConvSpec
from lorasmc.fixed_points import (approximate_search, candidate_regions, expand_basis, find_all_fixed_points,
                                  match_point_sets, region_bound)
from lorasmc.metrics import coherence, d_h, d_stsp, linear_decode
from lorasmc.model import generate, latent_step_mean, orthogonalize, simulate_latents
from lorasmc.smc import smc_sweep
from lorasmc.teacher import TeacherSpec, build_teacher, dynamics_summary, generate_dataset
from lorasmc.training import LowRankParams, ModelInit, TrainConfig, fit, init_model


for _n in range(1, 10):
    ACCEPTANCE.setdefault(_n, [None, []])


def _lgssm(seed=0, T=50):
    r = np.random.default_rng(seed)
    model, A, c = linear_lgssm_model(r, R=2, N=10, n_obs=10, sz=0.05, sy=0.1)
    _, y = generate(model, T, 1, r)
    B = model.obs_head.readout_matrix(model.M)
    Ry = np.diag(model.obs_head.sigma_y)
    exact, _ = kalman_loglik(A, c, model.Sigma_z, model.mu_z1, model.Sigma_z1, B, Ry, y[0])
    return model, y[0], exact, (A, c, B, Ry)


# -- 1: Kalman oracle ---------------------------------------------------

@pytest.mark.acceptance(1)
def test_c1_kalman_oracle():
    t0 = time.perf_counter()
    model, y, exact, _ = _lgssm(0)
    n = 200
    z = smc_sweep(model, np.repeat(y[None], n, 0), 512, np.random.default_rng(1), "optimal").logZ_hat
    elapsed = time.perf_counter() - t0
    se = z.std(ddof=1) / np.sqrt(n)
    rel = abs(z.mean() - exact) / abs(exact)
    note(1, f"exact {exact:.3f}, mean {z.mean():.3f} (rel {rel:.2e}), SE {se:.3g}, {elapsed:.1f}s")
    assert rel < 0.005
    assert z.mean() <= exact + 3 * se
    assert elapsed < 60


# -- 2: optimal-proposal weights ----------------------------------------

def _predictive_logpdf(parents, y, model, B, Ry):
    mean = np.array([B @ latent_step_mean(model, p) for p in parents])
    S = B @ model.Sigma_z @ B.T + Ry
    return np.array([stats.multivariate_normal(m, S).logpdf(y) for m in mean])


def _normalise(lw):
    w = np.exp(lw - lw.max())
    return w / w.sum()


@pytest.mark.acceptance(2)
def test_c2_optimal_weights():
    model, y, _, (A, c, B, Ry) = _lgssm(2, T=20)
    K = 512
    ens = smc_sweep(model, y, K, np.random.default_rng(3), "optimal")
    w = ens.normalized_weights()
    dev0 = np.max(np.abs(w[0] - 1.0 / K))
    worst_ref, worst_sib = 0.0, 0.0
    for t in range(1, len(y)):
        parents = ens.particles[t - 1][ens.ancestors[t - 1]]
        ref = _normalise(_predictive_logpdf(parents, y[t], model, B, Ry))
        worst_ref = max(worst_ref, np.max(np.abs(w[t] - ref)))
        # particles sharing a parent carry identical weights
        for a in np.unique(ens.ancestors[t - 1]):
            ws = w[t][ens.ancestors[t - 1] == a]
            worst_sib = max(worst_sib, ws.max() - ws.min())
    note(2, f"t=1 max|w-1/K| {dev0:.1e}; weight = parent predictive to {worst_ref:.1e}; "
            f"sibling spread {worst_sib:.1e}")
    assert dev0 < 1e-10
    assert worst_ref < 1e-10
    assert worst_sib < 1e-10


@pytest.mark.xfail(strict=True, reason="after t=1 the weights follow p(y_t | parent), which differs between parents")
def test_c2_literal_uniform_weights_every_step():
    model, y, _, _ = _lgssm(2, T=20)
    ens = smc_sweep(model, y, 512, np.random.default_rng(3), "optimal")
    assert np.max(np.abs(ens.normalized_weights() - 1.0 / 512)) < 1e-10


# -- 3: fixed-point exactness -------------------------------------------

@pytest.mark.acceptance(3)
def test_c3_fixed_point_exactness():
    t0 = time.perf_counter()
    mismatches = []
    n_points = 0
    for i in range(100):
        r = np.random.default_rng(i)
        R, D = 1 + i % 3, 1 + (i // 3) % 2
        N = int(r.integers(max(R, 2), 13)) if D == 1 else int(r.integers(max(R, 2), 11))   # N*D <= 20
        m = random_model(r, N=N, R=R, D=D)
        exact = find_all_fixed_points(m).zs()
        ref = brute_force_points(m.M, m.N_cont, m.activation.slopes, m.activation.thresholds)
        n_points += len(ref)
        if not match_point_sets(exact, ref, atol=1e-8):
            mismatches.append(i)
    elapsed = time.perf_counter() - t0
    note(3, f"100 nets, {n_points} points, mismatches {mismatches}, {elapsed:.0f}s")
    assert not mismatches
    assert elapsed < 300


# -- 4: region-count law ------------------------------------------------

@pytest.mark.acceptance(4)
def test_c4_region_count_law():
    t0 = time.perf_counter()
    over = 0
    for i in range(200):
        r = np.random.default_rng(i)
        R, D = int(r.integers(1, 4)), int(r.integers(1, 4))
        N = int(r.integers(R, 13))
        m = random_model(r, N=N, R=R, D=D)
        ex = expand_basis(m.M, m.N_cont, m.activation)
        over += len(candidate_regions(ex.M, ex.h, ex.family)) > region_bound(N, R, D)
    eq = []
    for N in range(2, 11):
        r = np.random.default_rng(100 + N)
        M, h = r.normal(size=(N, 2)), r.normal(size=N)
        pats = {tuple(p) for p in candidate_regions(M, h)}
        eq.append(len(pats) == region_bound(N, 2) and pats == dense_sign_patterns(M, h))
    ang = np.array([0.1, 1.2, 2.3])
    lines = np.stack([np.cos(ang), np.sin(ang)], 1)
    anchors = (len(candidate_regions(np.array([[1.0], [1.0]]), np.array([0.0, 1.0]))),
               len(candidate_regions(lines, np.array([0.3, -0.2, 0.5]))),
               len(candidate_regions(lines, np.zeros(3))))
    elapsed = time.perf_counter() - t0
    note(4, f"bound violations {over}/200; general-position equality {sum(eq)}/{len(eq)}; "
            f"anchors {anchors}; {elapsed:.0f}s")
    assert over == 0 and all(eq)
    assert anchors == (3, 7, 6)
    assert elapsed < 60


# -- 5: gradient fidelity -----------------------------------------------

def _tiny(seed, obs):
    r = np.random.default_rng(seed)
    m = random_model(r, N=8, R=2, obs=obs, sigma_y=0.3, sigma_z=0.1)
    _, y = generate(m, 10, 2, r)
    return m, y.astype(float)


@pytest.mark.acceptance(5)
def test_c5_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    m, y = _tiny(0, "gaussian")
    for prop in ("optimal", "bootstrap"):
        worst[prop] = max(fd_errors(LowRankParams(m, "full"), None, y, prop, 11).values())
    m, y = _tiny(1, "poisson")
    enc = CausalConvEncoder(CausalConvSpec(8, (3, 2, 1), (4, 4, 2)), np.random.default_rng(0))
    worst["encoder"] = max(fd_errors(LowRankParams(m, "diag"), enc, y, "encoder", 5).values())
    elapsed = time.perf_counter() - t0
    note(5, "worst block rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f}s")
    assert max(worst.values()) < 1e-4
    assert elapsed < 60


# -- 6: teacher-student recovery ----------------------------------------

C6_SEEDS = (0, 1, 2)
C6_EPOCHS = 200


@pytest.fixture(scope="module")
def c6_runs():
    spec = TeacherSpec(kind="oscillator", N=20, sigma_z=0.04, obs_kind="gaussian", sigma_y=0.01,
                       T=75, n_trials=400)
    teacher = build_teacher(spec, np.random.default_rng(0))
    ref = dynamics_summary(teacher.model, np.random.default_rng(1))
    init = ModelInit(N=20, R=2, n_obs=20)
    runs = []
    for seed in C6_SEEDS:
        data = generate_dataset(teacher, spec, np.random.default_rng(100 + seed)).observations
        train, held = data[:360], data[360:]
        cfg = TrainConfig(epochs=C6_EPOCHS, batches_per_epoch=36, batch_size=10, K=64,
                          lr_start=1e-2, lr_end=1e-4, seed=seed)
        held_elbo = lambda m: smc_sweep(m, held, 64, np.random.default_rng(7), "optimal").logZ_hat.mean()
        early = {}

        def cb(rec, p, early=early):
            if rec["epoch"] == C6_EPOCHS // 10 - 1:
                early["elbo"] = held_elbo(p.to_model())

        elbo0 = held_elbo(init_model(init, np.random.default_rng(seed)))   # fit draws the same init
        t0 = time.perf_counter()
        res = fit(train, init, cfg, callback=cb)
        s = dynamics_summary(res.model, np.random.default_rng(1))
        runs.append({"seed": seed, "lag": s["peak_lag"], "trace": s["noise_trace"], "elbo0": elbo0,
                     "elbo_early": early["elbo"], "minutes": (time.perf_counter() - t0) / 60})
    return ref, runs


@pytest.mark.slow
@pytest.mark.acceptance(6)
def test_c6_teacher_student(c6_runs):
    ref, runs = c6_runs
    ok = []
    for r in runs:
        f_err = abs(r["lag"] / ref["peak_lag"] - 1)
        n_err = abs(r["trace"] / ref["noise_trace"] - 1)
        ok.append(f_err < 0.05 and n_err < 0.25)
        note(6, f"seed {r['seed']}: lag {r['lag']:.2f}/{ref['peak_lag']:.2f} ({f_err:.1%}), "
                f"trace {r['trace']:.4f}/{ref['noise_trace']:.4f} ({n_err:.1%}), {r['minutes']:.0f} min "
                f"-> {'ok' if ok[-1] else 'miss'}")
    assert sum(ok) >= 2


@pytest.mark.slow
def test_heldout_elbo_improves_early(c6_runs):
    _, runs = c6_runs
    for r in runs:
        assert r["elbo_early"] > r["elbo0"]


# -- 7: ring attractor --------------------------------------------------

C7_BUDGETS = (10, 25, 50, 75)


@pytest.mark.acceptance(7)
def test_c7_ring_attractor():
    t0 = time.perf_counter()
    teacher = build_teacher(TeacherSpec(kind="ring_attractor", N=60, n_inputs=2), np.random.default_rng(0))
    rep = find_all_fixed_points(teacher.model)
    stable = np.array([p.z for p in rep.points if p.stability == "stable"])
    ang = np.degrees(np.arctan2(stable[:, 1], stable[:, 0]))
    tgt = np.degrees(np.arctan2(teacher.targets[:, 1], teacher.targets[:, 0]))
    off = max(np.min(np.abs((ang - a + 180) % 360 - 180)) for a in tgt)
    wins = {}
    for budget in C7_BUDGETS:
        w = 0
        for run in range(20):
            c = approximate_search(teacher.model, 50, 10 ** 6, "constrained", np.random.default_rng(run),
                                   budget=budget)
            u = approximate_search(teacher.model, 50, 10 ** 6, "uniform", np.random.default_rng(1000 + run),
                                   budget=budget)
            w += len(c.report.points) >= len(u.report.points)
        wins[budget] = w
    elapsed = time.perf_counter() - t0
    note(7, f"{len(rep.points)} points, {len(stable)} stable, worst target offset {off:.2f} deg; "
            f"constrained >= uniform in {wins} of 20 runs per budget; {elapsed:.0f}s")
    assert len(stable) >= 8 and off < 10.0
    assert all(w >= 15 for w in wins.values())
    assert elapsed < 600


# -- 8: metric self-consistency -----------------------------------------

@pytest.mark.acceptance(8)
def test_c8_metric_self_consistency():
    r = np.random.default_rng(0)
    x = r.normal(size=(2000, 3))
    f, coh = coherence(x[:, 0], x[:, 0], nperseg=256)
    a, b = r.normal(size=(10_000, 2)), r.normal(size=(10_000, 2)) + [2.0, 0.0]
    kl = d_stsp(a, b)
    X = r.normal(size=(20_000, 2))
    Y = X @ (np.array([1.0, -1.0]) * np.sqrt(2.0)) + r.normal(size=20_000)   # SNR 4
    r2 = linear_decode(X[:10_000], Y[:10_000], X[10_000:], Y[10_000:]).r2
    vals = (d_stsp(x, x), d_h(x, x), float(np.min(coh)))
    note(8, f"d_stsp(x,x) {vals[0]}, d_h(x,x) {vals[1]}, min coherence(x,x) {vals[2]:.12f}, "
            f"shifted KL {kl:.3f} (1.0), planted R2 {r2:.3f} (0.8)")
    assert vals[0] == 0.0 and vals[1] == 0.0
    assert abs(vals[2] - 1.0) < 1e-10
    assert abs(kl - 1.0) <= 0.15
    assert abs(r2 - 0.8) <= 0.05


# -- 9: reproducibility -------------------------------------------------

@pytest.mark.acceptance(9)
def test_c9_reproducibility(tmp_path):
    cfg = {"seed": 11, "teacher": {"kind": "oscillator", "N": 10, "T": 30, "n_trials": 12},
           "model": {"N": 10, "R": 2},
           "train": {"epochs": 3, "batches_per_epoch": 3, "batch_size": 4, "K": 16}}
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg))
    for d in ("a", "b"):
        assert main(["train", "--config", str(p), "--out", str(tmp_path / d)]) == 0
    same = (tmp_path / "a" / "checkpoint.lrs").read_bytes() == (tmp_path / "b" / "checkpoint.lrs").read_bytes()

    worst = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        m = random_model(r, N=10, R=2, sigma_z=0.5)
        o = orthogonalize(m)
        A = o.M.T @ m.M
        eps = r.multivariate_normal(np.zeros(2), m.Sigma_z, 199)
        z1 = r.normal(size=2)
        xa = simulate_latents(m, 200, z1=z1, increments=eps) @ m.M.T
        xb = simulate_latents(o, 200, z1=A @ z1, increments=eps @ A.T) @ o.M.T
        worst = max(worst, np.max(np.abs(xa - xb)))
    note(9, f"checkpoints byte-identical: {same}; orthogonalization max |dx| {worst:.1e}")
    assert same
    assert worst < 1e-6
