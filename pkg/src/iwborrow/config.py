"""Configuration loading, merging and conversion to library objects.

Configs are nested YAML mappings.  The packaged ``defaults.yaml`` is the
base; a user file is deep-merged on top and ``key.path=value`` overrides
(values parsed as YAML scalars) are applied last.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .analysis import AnalysisSpec, WeightingConfig
from .bundled import BUNDLED, bundled_path
from .dataset import Formula, TrialDataset, load_dataset, schema_from_config
from .estimand import DecisionRule
from .inference import SamplerConfig

__all__ = ["ConfigError", "load_defaults", "load_config", "apply_override", "deep_merge",
           "resolve_path", "load_data", "analysis_spec", "sampler_config", "decision_rule",
           "nu_grid", "file_digest", "jsonable"]


class ConfigError(ValueError):
    """The configuration is malformed or references missing inputs."""


def load_defaults() -> dict:
    text = (resources.files("iwborrow") / "defaults.yaml").read_text()
    return yaml.safe_load(text)


def deep_merge(base: Mapping, update: Mapping) -> dict:
    """Recursively merge ``update`` into a copy of ``base``; mappings merge, all else replaces."""
    out = copy.deepcopy(dict(base))
    for k, v in update.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(config: dict, assignment: str) -> dict:
    """Apply one ``a.b.c=value`` override in place and return ``config``."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {assignment!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {assignment!r}: {exc}") from None
    node = config
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return config


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> tuple[dict, Path]:
    """Merged configuration and the directory relative paths resolve against."""
    config = load_defaults()
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} not found")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(user, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        config = deep_merge(config, user)
        base_dir = path.resolve().parent
    for item in overrides:
        apply_override(config, item)
    return config, base_dir


def resolve_path(ref: str, base_dir: Path) -> Path:
    ref = str(ref)
    if ref.startswith("bundled:"):
        name = ref.split(":", 1)[1]
        if name not in BUNDLED:
            raise ConfigError(f"unknown bundled data set {name!r}; choose from {BUNDLED}")
        return bundled_path(name)
    p = Path(ref)
    p = p if p.is_absolute() else base_dir / p
    if not p.is_file():
        raise ConfigError(f"data file {ref!r} not found")
    return p


def _source_id(ref: str) -> str:
    return ref.split(":", 1)[1] if str(ref).startswith("bundled:") else Path(ref).stem


def load_data(config: Mapping, base_dir: Path) -> tuple[TrialDataset, list[TrialDataset], dict[str, Path]]:
    """Internal and external data sets plus the resolved input paths (for digests)."""
    data = config.get("data") or {}
    try:
        schema = schema_from_config(data.get("schema") or [])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data.schema: {exc}") from None
    if "internal" not in data:
        raise ConfigError("data.internal is required")
    ext_refs = data.get("external") or []
    if isinstance(ext_refs, str):
        ext_refs = [ext_refs]
    paths = {"internal": resolve_path(data["internal"], base_dir)}
    internal = load_dataset(paths["internal"], schema, source_id=_source_id(data["internal"]))
    external = []
    for i, ref in enumerate(ext_refs):
        paths[f"external[{i}]"] = resolve_path(ref, base_dir)
        external.append(load_dataset(paths[f"external[{i}]"], schema, source_id=_source_id(ref)))
    return internal, external, paths


def _pick(cls, d: Mapping | None, section: str) -> dict:
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    return d


def sampler_config(d: Mapping | None, seed: int = 0, base: Mapping | None = None) -> SamplerConfig:
    merged = deep_merge(base or {}, d or {})
    merged.pop("seed", None)
    try:
        return SamplerConfig(**_pick(SamplerConfig, merged, "sampler"), seed=seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sampler: {exc}") from None


def weighting_config(d: Mapping | None) -> WeightingConfig:
    try:
        return WeightingConfig.from_dict(_pick(WeightingConfig, d, "weighting"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"weighting: {exc}") from None


def analysis_spec(config: Mapping, weighting: Mapping | None = None,
                  sampler: Mapping | None = None) -> AnalysisSpec:
    """AnalysisSpec from the ``formula``, ``subgroup``, ``weighting``, ``prior``, ``sampler`` and ``estimand`` sections."""
    try:
        formula = Formula.from_dict(config["formula"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"formula: {exc}") from None
    subgroup = dict(config.get("subgroup") or {})
    if set(subgroup) != set(formula.modifiers):
        raise ConfigError(f"subgroup must fix exactly the effect modifiers {list(formula.modifiers)}")
    prior = config.get("prior") or {}
    est = config.get("estimand") or {}
    w = deep_merge(config.get("weighting") or {}, weighting or {})
    return AnalysisSpec(
        formula=formula, subgroup=subgroup, weighting=weighting_config(w),
        prior_scale=float(prior.get("scale", 2.5)), prior_loc=float(prior.get("loc", 0.0)),
        sampler=sampler_config(sampler if sampler is not None else config.get("sampler")),
        reference=str(est.get("reference", "internal")),
        restrict_reference=bool(est.get("restrict", True)),
        bootstrap=bool(est.get("bootstrap", True)))


def decision_rule(config: Mapping) -> DecisionRule:
    d = config.get("decision") or {}
    lo = d.get("lower", 0.0)
    hi = d.get("upper", math.inf)
    try:
        return DecisionRule(-math.inf if lo is None else float(lo), math.inf if hi is None else float(hi),
                            float(d.get("threshold", 0.95)))
    except ValueError as exc:
        raise ConfigError(f"decision: {exc}") from None


def nu_grid(d: Mapping | Sequence) -> np.ndarray:
    """Threshold grid from ``{start, stop, step}`` (inclusive, rounded) or an explicit list."""
    if isinstance(d, Mapping):
        start, stop, step = float(d["start"]), float(d["stop"]), float(d["step"])
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        digits = max(0, -int(math.floor(math.log10(step)))) + 1
        return np.round(start + step * np.arange(n), digits)
    return np.asarray(d, dtype=float)


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(obj, Mapping):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, Path):
        return str(obj)
    return obj
