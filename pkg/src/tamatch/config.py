"""TOML experiment configs: ``[dataset]``, ``[debiaser]``, ``[trainer]``, ``[sim]``, ``[logistic]``.

Every section is optional and falls back to dataclass defaults. Unknown keys
are rejected so typos surface as config errors instead of silently doing
nothing.
"""

import dataclasses
import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .bias_sim import CategoricalSimConfig, GaussianMixture, LogisticSimConfig, StandardNormal
from .debiaser import DebiaserConfig
from .errors import ConfigError
from .synth_ssl import SynthDatasetSpec, TrainConfig

SECTIONS = ("dataset", "debiaser", "trainer", "sim", "logistic")
TOP_LEVEL = ("name", "seed", "variants")
DEFAULT_NS = (2, 4, 8, 16, 64)


def load(path):
    """Read a TOML config, or the resolved config echoed in a run's ``manifest.json``."""
    try:
        if str(path).endswith(".json"):
            with open(path) as fh:
                manifest = json.load(fh)
            raw = _drop_none({**manifest["config"], "seed": manifest["seed"]})
        else:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(raw) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config sections/keys: {sorted(unknown)}")
    return raw


def dumps(raw):
    return tomli_w.dumps(_drop_none(raw))


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


def _build(cls, section, values, **fixed):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**{**values, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def dataset_spec(raw, seed):
    values = dict(raw.get("dataset", {}))
    values.setdefault("seed", seed)
    return _build(SynthDatasetSpec, "dataset", values)


def debiaser_config(raw, n_classes, imbalanced=False):
    values = dict(raw.get("debiaser", {}))
    values.pop("n_classes", None)
    if imbalanced:
        values.setdefault("lambda_target", 0.99999)
    return _build(DebiaserConfig, "debiaser", values, n_classes=n_classes)


def train_config(raw, dcfg, seed):
    values = dict(raw.get("trainer", {}))
    values["seeds"] = tuple(int(s) for s in values.get("seeds", [seed]))
    if not values["seeds"]:
        raise ConfigError("[trainer] seeds must not be empty")
    return _build(TrainConfig, "trainer", values, debiaser=dcfg)


def sim_config(raw, seed):
    values = dict(raw.get("sim", {}))
    ns = values.pop("n_list", list(DEFAULT_NS))
    points = values.pop("grid_points", None)
    if points is not None:
        step = 0.9 / (points - 1) if points > 1 else 0.0
        values.setdefault("p1_init_grid", [0.05 + i * step for i in range(points)])
    values.setdefault("seed", seed)
    return _build(CategoricalSimConfig, "sim", values), [int(n) for n in ns]


def logistic_config(raw):
    values = dict(raw.get("logistic", {}))
    dens = dict(values.pop("density", {"kind": "standard_normal"}))
    kind = dens.pop("kind", "standard_normal")
    if kind == "standard_normal":
        density = _build(StandardNormal, "logistic.density", dens)
    elif kind == "two_component_mixture":
        density = _build(GaussianMixture, "logistic.density", dens)
    else:
        raise ConfigError(f"[logistic.density] unknown kind {kind!r}")
    return _build(LogisticSimConfig, "logistic", values, density=density)


def density_record(density):
    kind = "standard_normal" if isinstance(density, StandardNormal) else "two_component_mixture"
    return {"kind": kind, **dataclasses.asdict(density)}


def echo(**parts):
    """Fully resolved config as a plain nested dict (what goes into a manifest)."""
    out = {}
    for key, obj in parts.items():
        if obj is None:
            continue
        if dataclasses.is_dataclass(obj):
            rec = dataclasses.asdict(obj)
            if key == "trainer":
                rec.pop("debiaser", None)
                rec["seeds"] = list(rec["seeds"])
            if key == "logistic":
                rec["density"] = density_record(obj.density)
            out[key] = rec
        else:
            out[key] = obj
    return out
