"""Command-line entry point: ``lorasmc <command> [options]``.

Commands: teacher, train, generate, filter, fixed-points, eval.  Every
command writes ``manifest.json`` into ``--out`` next to its outputs.

Exit codes: 0 ok, 1 other library error, 2 usage, 3 schema/file mismatch,
4 modality/head mismatch, 5 malformed config.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import io
from .encoder import CausalConvEncoder, CausalConvSpec, encoder_state, load_encoder_state
from .errors import ConfigError, LoraSMCError, ModalityError, SchemaError
from .fixed_points import approximate_search, find_all_fixed_points
from .metrics import MetricConfig, metric_report
from .model import generate
from .smc import smc_sweep
from .teacher import DatasetBundle, build_teacher, generate_dataset
from .training import fit

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_SCHEMA, EXIT_MODALITY, EXIT_CONFIG = 0, 1, 2, 3, 4, 5


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Bookkeeping shared by all commands: output dir, inputs, manifest."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = []
        self.t0 = time.perf_counter()

    def input(self, path):
        if path is None:
            return None
        if not os.path.exists(path):
            raise SchemaError(f"input file not found: {path}")
        self.inputs[str(path)] = _sha256(path)
        return path

    def path(self, name):
        self.outputs.append(name)
        return self.out / name

    def manifest(self, seed, extra=None):
        body = {"command": self.args.command, "argv": sys.argv[1:], "inputs": self.inputs,
                "outputs": sorted(self.outputs), "seed": seed, "versions": io.versions(),
                "wall_time_s": time.perf_counter() - self.t0, "threads": torch.get_num_threads()}
        body.update(extra or {})
        io.write_json(self.out / "manifest.json", body)


def _seed(args, cfg):
    return int(args.seed) if args.seed is not None else int(cfg.get("seed", 0))


def _config(args):
    return cfgmod.load_config(args.config)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_teacher(args):
    run = Run(args)
    run.input(args.config)
    cfg = _config(args)
    seed = _seed(args, cfg)
    spec = cfgmod.teacher_spec(cfg)
    rng = np.random.default_rng(seed)
    teacher = build_teacher(spec, rng)
    data = generate_dataset(teacher, spec, rng)
    extra_arrays = {} if teacher.targets is None else {"targets": teacher.targets}
    spec_d = {k: v for k, v in dataclasses.asdict(spec).items() if k != "f_target"}
    ck = io.Checkpoint(teacher.model, config=cfg, rng_state=rng.bit_generator.state,
                       extra={"residual": teacher.residual, "cycle_radius": teacher.cycle_radius,
                              "teacher_spec": spec_d}, extra_arrays=extra_arrays)
    io.save_checkpoint(run.path("teacher.lrs"), ck)
    io.save_bundle(run.path("data.lrs"), data)
    run.manifest(seed, {"residual": teacher.residual})
    return EXIT_OK


def _load_data(run, cfg, args, seed):
    """Dataset from --data, the config's data.path, or a teacher section."""
    path = args.data or (cfg.get("data") or {}).get("path")
    if path is not None:
        return io.load_bundle(run.input(path))
    if "teacher" in cfg:
        spec = cfgmod.teacher_spec(cfg)
        rng = np.random.default_rng(seed + 1)
        return generate_dataset(build_teacher(spec, rng), spec, rng)
    raise ConfigError("no dataset: give --data, data.path or a teacher section")


def cmd_train(args):
    run = Run(args)
    run.input(args.config)
    cfg = _config(args)
    seed = _seed(args, cfg)
    data = _load_data(run, cfg, args, seed)
    tc = cfgmod.train_config(cfg, seed=seed, particles=args.particles)
    mcfg = dict(cfg.get("model") or {})
    if mcfg.get("obs_kind", data.modality) != data.modality:
        raise ModalityError(f"config head {mcfg['obs_kind']!r} vs dataset modality {data.modality!r}")
    n_obs = data.observations.shape[-1]
    if mcfg.get("n_obs", n_obs) != n_obs:
        raise ModalityError(f"config n_obs {mcfg['n_obs']} vs dataset channels {n_obs}")
    mcfg.update(n_obs=n_obs, obs_kind=data.modality)
    if data.stimulus is not None:
        mcfg.setdefault("n_inputs", data.stimulus.shape[-1])
    init = cfgmod.model_init({"model": mcfg})
    res = fit(data.observations, init, tc, s=data.stimulus, modality=data.modality)
    # timing goes to its own file so the log is reproducible byte for byte
    with open(run.path("train_log.jsonl"), "w") as fh:
        for rec in res.log:
            fh.write(json.dumps({k: rec[k] for k in ("epoch", "elbo", "lr")}) + "\n")
    io.write_rows(run.path("timing.csv"), [{"epoch": r["epoch"], "wall_time": r["wall_time"]} for r in res.log])
    io.write_rows(run.path("train_log.csv"), [{k: r[k] for k in ("epoch", "elbo", "lr")} for r in res.log])
    enc_spec = None if res.encoder is None else dataclasses.asdict(res.encoder.spec)
    ck = io.Checkpoint(
        res.model,
        unconstrained={k: v.detach().numpy() for k, v in res.params.state_dict().items()},
        encoder_state={} if res.encoder is None else encoder_state(res.encoder),
        encoder_spec=enc_spec,
        optimizer=None if res.optimizer is None else res.optimizer.state(),
        config={"config": cfg, "train": dataclasses.asdict(tc), "model": mcfg},
        rng_state=res.rng_state,
        extra={"epochs": len(res.log), "rollbacks": res.rollbacks, "cov": tc.cov_kind,
               "final_elbo": res.log[-1]["elbo"] if res.log else None})
    io.save_checkpoint(run.path("checkpoint.lrs"), ck)
    run.manifest(seed, {"final_elbo": ck.extra["final_elbo"]})
    return EXIT_OK


def _load_ckpt(run, path):
    return io.load_checkpoint(run.input(path))


def _encoder_from(ck):
    if ck.encoder_spec is None:
        raise ConfigError("checkpoint has no encoder; use another proposal")
    spec = dict(ck.encoder_spec)
    spec["kernels"], spec["channels"] = tuple(spec["kernels"]), tuple(spec["channels"])
    enc = CausalConvEncoder(CausalConvSpec(**spec), np.random.default_rng(0))
    load_encoder_state(enc, ck.encoder_state)
    return enc


def cmd_generate(args):
    run = Run(args)
    cfg = _config(args) if args.config else {}
    seed = _seed(args, cfg)
    ck = _load_ckpt(run, args.checkpoint)
    gen = dict(cfg.get("generate") or {})
    T = args.T if args.T is not None else gen.get("T", 100)
    n = args.trials if args.trials is not None else gen.get("trials", 1)
    burn = args.burn_in if args.burn_in is not None else gen.get("burn_in", 0)
    stim = None
    if args.stimulus:
        sb = io.load_bundle(run.input(args.stimulus))
        if sb.stimulus is None:
            raise SchemaError(f"{args.stimulus} holds no stimulus")
        stim = sb.stimulus[:n, :T]
        if len(stim) < n or stim.shape[1] < T:
            raise SchemaError("stimulus bundle is smaller than the requested trials x T")
    elif ck.model.H is not None:
        stim = np.zeros((n, T, ck.model.H.shape[1]))
    rng = np.random.default_rng(seed)
    z, y = generate(ck.model, T, n, rng, stimulus=stim, burn_in=burn, noise=gen.get("noise", True))
    bundle = DatasetBundle(y, ck.model.obs_head.kind, 1.0, stim, z, None, {"source": str(args.checkpoint)})
    io.save_bundle(run.path("samples.lrs"), bundle)
    run.manifest(seed, {"T": T, "trials": n, "burn_in": burn})
    return EXIT_OK


def cmd_filter(args):
    run = Run(args)
    cfg = _config(args) if args.config else {}
    seed = _seed(args, cfg)
    ck = _load_ckpt(run, args.checkpoint)
    data = io.load_bundle(run.input(args.data))
    head = ck.model.obs_head
    if data.modality != head.kind:
        raise ModalityError(f"dataset modality {data.modality!r} vs head {head.kind!r}")
    if data.observations.shape[-1] != head.n_obs:
        raise ModalityError(f"dataset has {data.observations.shape[-1]} channels, head expects {head.n_obs}")
    fcfg = dict(cfg.get("filter") or {})
    K = args.particles or fcfg.get("particles", 256)
    proposal = args.proposal or fcfg.get("proposal", "optimal" if head.kind == "gaussian" else "bootstrap")
    encoder = _encoder_from(ck) if proposal == "encoder" else None
    rng = np.random.default_rng(seed)
    n, T = data.observations.shape[:2]
    means = np.empty((n, T, ck.model.R))
    vars_ = np.empty_like(means)
    logz = np.empty(n)
    for i in range(n):
        s = None if data.stimulus is None else data.stimulus[i]
        ens = smc_sweep(ck.model, data.observations[i], K, rng, proposal, s, encoder,
                        fcfg.get("resampling", "multinomial"))
        means[i], vars_[i], logz[i] = ens.filtering_mean(), ens.filtering_var(), ens.logZ_hat
    io.write_archive(run.path("posterior.lrs"), "posterior",
                     {"particles": K, "proposal": proposal}, {"mean": means, "var": vars_, "logZ": logz})
    rows = [{"trial": i, "t": t, "dim": r, "mean": means[i, t, r], "var": vars_[i, t, r]}
            for i in range(n) for t in range(T) for r in range(ck.model.R)]
    io.write_rows(run.path("posterior.csv"), rows)
    io.write_rows(run.path("logz.csv"), [{"trial": i, "logZ": v} for i, v in enumerate(logz)])
    run.manifest(seed, {"particles": K, "proposal": proposal, "mean_logZ": float(logz.mean()) if n else None})
    return EXIT_OK


def cmd_fixed_points(args):
    run = Run(args)
    cfg = _config(args) if args.config else {}
    seed = _seed(args, cfg)
    ck = _load_ckpt(run, args.checkpoint)
    fp = dict(cfg.get("fixed_points") or {})
    mode = args.mode or fp.get("mode", "exact")
    out = {"mode": mode}
    rows = []
    if mode in ("exact", "both"):
        rep = find_all_fixed_points(ck.model, tol=fp.get("tol", 1e-8))
        out["exact"] = rep.to_dict()
        rows += [dict(r, method="exact") for r in rep.rows()]
    if mode in ("approximate", "both"):
        rng = np.random.default_rng(seed)
        res = approximate_search(ck.model, fp.get("max_iters", 50), fp.get("restarts", 100),
                                 fp.get("init_mode", "uniform"), rng, args.budget or fp.get("budget"),
                                 tol=fp.get("tol", 1e-8))
        d = res.report.to_dict()
        d.update(n_inverses=res.n_inverses, precompute_solves=res.precompute_solves)
        out["approximate"] = d
        rows += [dict(r, method="approximate") for r in res.report.rows()]
    if mode not in ("exact", "approximate", "both"):
        raise ConfigError(f"unknown fixed-point mode {mode!r}")
    io.write_json(run.path("fixed_points.json"), out)
    io.write_rows(run.path("fixed_points.csv"), rows)
    run.manifest(seed, {"mode": mode})
    return EXIT_OK


def cmd_eval(args):
    run = Run(args)
    cfg = _config(args) if args.config else {}
    ecfg = dict(cfg.get("eval") or {})
    seed = _seed(args, cfg)
    a = io.load_bundle(run.input(args.a))
    b = io.load_bundle(run.input(args.b))
    if a.modality != b.modality:
        raise ModalityError(f"cannot compare {a.modality!r} with {b.modality!r} data")
    if a.observations.shape[-1] != b.observations.shape[-1]:
        raise ModalityError("channel counts differ")
    names = args.metrics.split(",") if args.metrics else ecfg.pop("metrics", ["d_stsp", "d_h"])
    ecfg.pop("metrics", None)
    ecfg.setdefault("seed", seed)
    try:
        mc = MetricConfig(**ecfg)
        rep = metric_report(a.observations, b.observations, names, mc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    io.write_json(run.path("metrics.json"), {"metrics": rep, "a": str(args.a), "b": str(args.b)})
    io.write_rows(run.path("metrics.csv"), [{"metric": k, "value": v} for k, v in rep.items()])
    run.manifest(seed, {"metrics": rep})
    return EXIT_OK


# ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lorasmc", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)
        sp.add_argument("--threads", type=int, default=None,
                        help="torch intra-op threads (default: logical cores)")
        return sp

    common(sub.add_parser("teacher", help="build a teacher and simulate a dataset"), True)
    sp = common(sub.add_parser("train", help="fit a model by SMC ELBO ascent"), True)
    sp.add_argument("--data")
    sp.add_argument("--particles", type=int)
    sp = common(sub.add_parser("generate", help="sample from a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--T", type=int)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--burn-in", type=int, dest="burn_in")
    sp.add_argument("--stimulus", help="dataset archive whose stimulus drives the samples")
    sp = common(sub.add_parser("filter", help="filtering posterior of a dataset"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--particles", type=int)
    sp.add_argument("--proposal", choices=["bootstrap", "optimal", "encoder"])
    sp = common(sub.add_parser("fixed-points", help="fixed points of a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=["exact", "approximate", "both"])
    sp.add_argument("--budget", type=int)
    sp = common(sub.add_parser("eval", help="compare two datasets"))
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--metrics", help="comma-separated metric names")
    return p


COMMANDS = {"teacher": cmd_teacher, "train": cmd_train, "generate": cmd_generate,
            "filter": cmd_filter, "fixed-points": cmd_fixed_points, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    torch.set_num_threads(args.threads or os.cpu_count() or 1)
    codes = ((SchemaError, EXIT_SCHEMA), (ModalityError, EXIT_MODALITY), (ConfigError, EXIT_CONFIG),
             (LoraSMCError, EXIT_ERROR))
    try:
        return COMMANDS[args.command](args)
    except LoraSMCError as exc:
        print(f"lorasmc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return next(c for kind, c in codes if isinstance(exc, kind))


if __name__ == "__main__":
    sys.exit(main())
