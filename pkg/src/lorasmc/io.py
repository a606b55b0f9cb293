"""Archive formats for datasets, checkpoints and reports.

An archive is a zip file holding ``meta.json`` plus one raw array per
entry (little-endian float64, or int32 for counts/indices, row-major).
Entry timestamps are fixed, so equal content gives byte-identical files.
"""
from __future__ import annotations

import csv
import io as _io
import json
import platform
import sys
import zipfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .errors import SchemaError
from .model import LowRankRNN, PiecewiseLinearSpec
from .observations import ObservationHead
from .teacher import DatasetBundle

SCHEMA_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_DTYPES = {"f8": "<f8", "i4": "<i4"}


def _entry(name):
    zi = zipfile.ZipInfo(name, date_time=_EPOCH)
    zi.compress_type = zipfile.ZIP_DEFLATED
    zi.external_attr = 0o644 << 16
    return zi


def _encode(arr):
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        if arr.size and (arr.max() > np.iinfo(np.int32).max or arr.min() < np.iinfo(np.int32).min):
            raise ValueError("integer array does not fit in int32")
        code = "i4"
    else:
        code = "f8"
    return code, np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def write_archive(path, kind, meta, arrays):
    header = {"schema_version": SCHEMA_VERSION, "kind": kind, "meta": meta, "arrays": {}}
    blobs = []
    for name in sorted(arrays):
        arr = arrays[name]
        if arr is None:
            continue
        code, raw = _encode(arr)
        header["arrays"][name] = {"dtype": code, "shape": list(np.shape(arr))}
        blobs.append((name, raw))
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("meta.json"), json.dumps(header, sort_keys=True, indent=1))
        for name, raw in blobs:
            zf.writestr(_entry(f"arrays/{name}.bin"), raw)


def read_archive(path, kind=None):
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise SchemaError(f"{path}: not a readable archive ({exc})") from exc
    with zf:
        try:
            header = json.loads(zf.read("meta.json"))
        except KeyError as exc:
            raise SchemaError(f"{path}: missing meta.json") from exc
        ver = header.get("schema_version")
        if ver != SCHEMA_VERSION:
            raise SchemaError(f"{path}: schema version {ver}, expected {SCHEMA_VERSION}")
        if kind is not None and header.get("kind") != kind:
            raise SchemaError(f"{path}: archive holds a {header.get('kind')!r}, expected {kind!r}")
        arrays = {}
        for name, info in header["arrays"].items():
            raw = zf.read(f"arrays/{name}.bin")
            arrays[name] = np.frombuffer(raw, dtype=_DTYPES[info["dtype"]]).reshape(info["shape"]).copy()
    return header["meta"], arrays


# ----------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------

def save_bundle(path, b: DatasetBundle):
    meta = {"modality": b.modality, "bin_s": b.bin_s, "channel_names": list(b.channel_names),
            "shape": list(b.observations.shape), "extra": b.meta}
    write_archive(path, "dataset", meta, {"observations": b.observations, "stimulus": b.stimulus,
                                          "latents": b.latents})


def load_bundle(path) -> DatasetBundle:
    meta, arr = read_archive(path, "dataset")
    obs = arr["observations"]
    if meta["modality"] == "poisson":
        obs = obs.astype(np.int64)
    return DatasetBundle(obs.reshape(meta["shape"]), meta["modality"], meta["bin_s"],
                         arr.get("stimulus"), arr.get("latents"), meta["channel_names"],
                         meta.get("extra", {}))


# ----------------------------------------------------------------------
# models and checkpoints
# ----------------------------------------------------------------------

def model_to_arrays(model: LowRankRNN, prefix="model."):
    head = model.obs_head
    arrays = {
        "M": model.M, "Ntilde": model.Ntilde, "a": np.array([model.a]),
        "slopes": model.activation.slopes, "thresholds": model.activation.thresholds,
        "Sigma_z": model.Sigma_z, "mu_z1": model.mu_z1, "Sigma_z1": model.Sigma_z1,
        "H": model.H, "dt": np.array([model.dt]),
        "head.gain": head.gain, "head.bias": head.bias, "head.sigma_y": head.sigma_y,
        "head.readout": head.readout, "head.exposure": np.array([head.exposure]),
    }
    meta = {"activation_kind": model.activation.kind, "head_kind": head.kind, "n_obs": head.n_obs}
    return meta, {prefix + k: v for k, v in arrays.items() if v is not None}


def model_from_arrays(meta, arrays, prefix="model."):
    g = lambda k: arrays.get(prefix + k)
    if meta["head_kind"] == "gaussian":
        head = ObservationHead("gaussian", meta["n_obs"], sigma_y=g("head.sigma_y"), gain=g("head.gain"),
                               bias=g("head.bias"), exposure=float(g("head.exposure")[0]),
                               readout=g("head.readout"))
    else:
        head = ObservationHead("poisson", meta["n_obs"], gain=g("head.gain"), bias=g("head.bias"),
                               exposure=float(g("head.exposure")[0]), readout=g("head.readout"))
    act = PiecewiseLinearSpec(g("slopes"), g("thresholds"), meta["activation_kind"])
    return LowRankRNN(M=g("M"), Ntilde=g("Ntilde"), a=float(g("a")[0]), activation=act,
                      Sigma_z=g("Sigma_z"), mu_z1=g("mu_z1"), Sigma_z1=g("Sigma_z1"), obs_head=head,
                      dt=float(g("dt")[0]), H=g("H"))


@dataclass
class Checkpoint:
    model: LowRankRNN
    unconstrained: dict = field(default_factory=dict)
    encoder_state: dict = field(default_factory=dict)
    encoder_spec: Optional[dict] = None
    optimizer: Optional[dict] = None
    config: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    extra_arrays: dict = field(default_factory=dict)


def save_checkpoint(path, ck: Checkpoint):
    mmeta, arrays = model_to_arrays(ck.model)
    for k, v in ck.unconstrained.items():
        arrays["unconstrained." + k] = v
    for k, v in ck.encoder_state.items():
        arrays["encoder." + k] = v
    opt_meta = None
    if ck.optimizer is not None:
        opt_meta = {"t": int(ck.optimizer["t"]), "n": len(ck.optimizer["m"])}
        for i, (m, v) in enumerate(zip(ck.optimizer["m"], ck.optimizer["v"])):
            arrays[f"optimizer.m.{i:04d}"] = m
            arrays[f"optimizer.v.{i:04d}"] = v
    for k, v in ck.extra_arrays.items():
        arrays["extra." + k] = v
    meta = {"model": mmeta, "encoder_spec": ck.encoder_spec, "optimizer": opt_meta,
            "config": ck.config, "rng_state": ck.rng_state, "extra": ck.extra}
    write_archive(path, "checkpoint", meta, arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arr = read_archive(path, "checkpoint")
    model = model_from_arrays(meta["model"], arr)
    pick = lambda p: {k[len(p):]: v for k, v in arr.items() if k.startswith(p)}
    opt = None
    if meta.get("optimizer"):
        n = meta["optimizer"]["n"]
        opt = {"t": meta["optimizer"]["t"],
               "m": [arr[f"optimizer.m.{i:04d}"] for i in range(n)],
               "v": [arr[f"optimizer.v.{i:04d}"] for i in range(n)]}
    return Checkpoint(model, pick("unconstrained."), pick("encoder."), meta.get("encoder_spec"), opt,
                      meta.get("config") or {}, meta.get("rng_state"), meta.get("extra") or {},
                      pick("extra."))


# ----------------------------------------------------------------------
# text outputs
# ----------------------------------------------------------------------

def write_json(path, obj):
    body = dict(obj)
    body.setdefault("schema_version", SCHEMA_VERSION)
    with open(path, "w") as fh:
        json.dump(body, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        body = json.load(fh)
    if body.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema version {body.get('schema_version')}, expected {SCHEMA_VERSION}")
    return body


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def write_rows(path, rows):
    """Tidy CSV, one row per record; a leading comment carries the schema."""
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def versions():
    import scipy
    import torch
    return {"lorasmc": __version__, "python": sys.version.split()[0], "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "platform": platform.platform()}
