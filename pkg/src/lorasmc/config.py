"""YAML experiment configs.

A config is a nested mapping with optional sections ``teacher``, ``model``,
``train``, ``data``, ``generate``, ``filter``, ``fixed_points`` and ``eval``
plus top-level ``seed`` and ``threads``.  Any key can be overridden from the
environment: ``LORASMC_TRAIN__EPOCHS=5`` sets ``train.epochs`` (double
underscore separates levels, values are parsed as YAML scalars).
"""
from __future__ import annotations

import copy
import dataclasses
import os

import yaml

from .errors import ConfigError
from .teacher import TeacherSpec
from .training import ModelInit, TrainConfig

ENV_PREFIX = "LORASMC_"

SECTIONS = {
    "seed": None, "threads": None, "name": None,
    "teacher": TeacherSpec, "model": ModelInit, "train": TrainConfig,
    "data": {"path", "val_fraction", "stimulus"},
    "generate": {"T", "trials", "burn_in", "noise"},
    "filter": {"particles", "proposal", "resampling"},
    "fixed_points": {"mode", "budget", "restarts", "max_iters", "init_mode", "tol"},
    "eval": {"metrics", "kde_sigma", "mc_samples", "spectral_smooth_sigma", "hann_window", "seed"},
}


def _check_section(name, body):
    kind = SECTIONS[name]
    if kind is None:
        return
    if not isinstance(body, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(kind)} if dataclasses.is_dataclass(kind) else kind
    extra = set(body) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")


def validate(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    extra = set(cfg) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    for name, body in cfg.items():
        _check_section(name, body)
    for key in ("seed", "threads"):
        if cfg.get(key) is not None and not isinstance(cfg[key], int):
            raise ConfigError(f"{key} must be an integer")
    return cfg


def _scalar(key, text):
    try:
        val = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    if isinstance(val, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            val = float(val)
        except ValueError:
            pass
    return val


def apply_env(cfg, environ=None):
    environ = os.environ if environ is None else environ
    cfg = copy.deepcopy(cfg)
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        val = _scalar(key, environ[key])
        node = cfg
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p!r} is not a section")
        node[path[-1]] = val
    return cfg


def load_config(path=None, environ=None):
    cfg = {}
    if path is not None:
        try:
            with open(path) as fh:
                cfg = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return validate(apply_env(cfg, environ))


def _build(kind, body, **fixed):
    kw = dict(body or {})
    kw.update({k: v for k, v in fixed.items() if v is not None})
    for f in dataclasses.fields(kind):
        if f.name in kw and isinstance(kw[f.name], list) and f.name in ("angles", "kernels"):
            kw[f.name] = tuple(kw[f.name])
        if isinstance(kw.get(f.name), str) and isinstance(f.default, float):
            kw[f.name] = _scalar(f.name, kw[f.name])
    try:
        return kind(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{kind.__name__}: {exc}") from exc


def teacher_spec(cfg) -> TeacherSpec:
    if "teacher" not in cfg:
        raise ConfigError("missing 'teacher' section")
    return _build(TeacherSpec, cfg["teacher"])


def train_config(cfg, seed=None, particles=None) -> TrainConfig:
    seed = cfg.get("seed", 0) if seed is None else seed
    return _build(TrainConfig, cfg.get("train"), seed=seed, K=particles)


def model_init(cfg, **fixed) -> ModelInit:
    if "model" not in cfg and not fixed:
        raise ConfigError("missing 'model' section")
    return _build(ModelInit, cfg.get("model"), **fixed)
