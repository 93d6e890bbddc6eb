"""YAML run configuration with strict keys and line-numbered errors.

A config file is a mapping. Only ``dataset.kind`` and ``objective.kind`` are
required; every other key has a default. Unknown keys are rejected so that a
typo in a sweep file fails loudly instead of silently using a default::

    N: 5
    iterations: 2000
    mode: full
    dataset: {kind: gmm_circle, M: 8}
    objective: {kind: wgan_gp}
    network: {hidden: [512, 512, 512], lr: 1.0e-5}
    output: {dir: runs/example, sample_dump_every: 100}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .data import DatasetSpec
from .ensemble import NetworkConfig, SganConfig
from .errors import ConfigError
from .metrics import MetricSettings
from .objectives import ObjectiveSpec


@dataclass(frozen=True)
class OutputSettings:
    dir: str = "runs/default"
    sample_dump_every: int = 0
    grid_resolution: int = 64
    checkpoint_every: int = 0
    n_dump: int = 500


@dataclass(frozen=True)
class RunConfig:
    sgan: SganConfig
    metrics: MetricSettings = field(default_factory=MetricSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir)

    def to_dict(self) -> dict:
        s = asdict(self.sgan)
        out = {k: v for k, v in s.items() if k not in ("objective", "dataset", "network")}
        out["dataset"] = s["dataset"]
        out["objective"] = s["objective"]
        out["network"] = {**s["network"], "hidden": list(s["network"]["hidden"])}
        m = asdict(self.metrics)
        if m["bandwidths"] is not None:
            m["bandwidths"] = list(m["bandwidths"])
        out["metrics"] = m
        out["output"] = asdict(self.output)
        return out

    def echo(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        """Digest of everything that shapes a training step or a metric.

        The output location and the iteration budget are excluded, so a run can
        be resumed elsewhere or extended.
        """
        d = self.to_dict()
        d.pop("output")
        d.pop("iterations")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, *, seed: int | None = None, mode: str | None = None,
                       deterministic: bool | None = None, out: str | None = None) -> "RunConfig":
        sg = self.sgan
        if seed is not None:
            sg = replace(sg, master_seed=int(seed))
        if mode is not None:
            n = 1 if mode == "single_pair" else sg.N
            sg = replace(sg, mode=mode, N=n)
        if deterministic:
            sg = replace(sg, deterministic=True)
        output = replace(self.output, dir=str(out)) if out is not None else self.output
        return replace(self, sgan=sg, output=output)


# key -> (type tag, required)
_TOP = {
    "N": "int", "iterations": "int", "batch_size": "int", "z_dim": "int", "mode": "str",
    "master_seed": "int", "eval_every": "int", "aggregation": "str", "messenger_state": "str",
    "shared_batches": "bool", "global_init": "str", "workers": "int", "deterministic": "bool",
    "verify_isolation": "bool",
}
_SECTIONS = {
    "dataset": {"kind": "str!", "M": "int", "radius": "float?", "grid_extent": "float?",
                "std": "float?", "swiss_noise": "float?"},
    "objective": {"kind": "str!", "penalty_coeff": "float?", "dragan_noise_scale": "float?",
                  "d_steps": "int?", "g_loss_variant": "str"},
    "network": {"hidden": "list[int]", "slope": "float", "optimizer": "str", "lr": "float",
                "beta1": "float", "beta2": "float", "eps": "float", "rms_decay": "float"},
    "metrics": {"eps": "float?", "threshold": "int?", "n_gen": "int", "n_probe": "int",
                "bandwidths": "list[float]?", "folds": "int", "coverage_t": "float?",
                "burn_in": "float", "curve_points": "int"},
    "output": {"dir": "str", "sample_dump_every": "int", "grid_resolution": "int",
               "checkpoint_every": "int", "n_dump": "int"},
}


def _line_map(node, path=(), out=None) -> dict:
    """Map key paths to 1-based line numbers of their YAML nodes."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
    return out


def _check_type(value, tag: str, key: str, line: int | None):
    optional = tag.endswith("?")
    base = tag.rstrip("?!")
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} must not be empty", key=key, line=line)

    def scalar(v, t):
        if t == "int" and isinstance(v, int) and not isinstance(v, bool):
            return v
        if t == "float" and isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
        if t == "bool" and isinstance(v, bool):
            return v
        if t == "str" and isinstance(v, str):
            return v
        raise ConfigError(f"{key} must be of type {t}, got {type(v).__name__} {v!r}", key=key, line=line)

    if base.startswith("list["):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}", key=key, line=line)
        return [scalar(v, base[5:-1]) for v in value]
    return scalar(value, base)


def from_dict(data, lines: dict | None = None) -> RunConfig:
    """Validate a plain mapping (as produced by YAML) into a RunConfig."""
    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level", line=1)
    top, sections = {}, {name: {} for name in _SECTIONS}
    for key, value in data.items():
        line = lines.get((key,))
        if key in _SECTIONS:
            if value is None:
                value = {}
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be a mapping", key=key, line=line)
            schema = _SECTIONS[key]
            for sub, v in value.items():
                dotted = f"{key}.{sub}"
                sub_line = lines.get((key, sub))
                if sub not in schema:
                    raise ConfigError(f"unknown key {dotted!r}", key=dotted, line=sub_line)
                sections[key][sub] = _check_type(v, schema[sub], dotted, sub_line)
        elif key in _TOP:
            top[key] = _check_type(value, _TOP[key], key, line)
        else:
            raise ConfigError(f"unknown key {key!r}", key=str(key), line=line)
    for name, schema in _SECTIONS.items():
        for sub, tag in schema.items():
            if tag.endswith("!") and sub not in sections[name]:
                line = lines.get((name,))
                raise ConfigError(f"missing required key '{name}.{sub}'", key=f"{name}.{sub}", line=line)

    def build(cls, kwargs, section):
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            key = exc.key
            if section and key and not key.startswith(section + "."):
                key = f"{section}.{key}"
            line = lines.get(tuple((key or "").split(".")), lines.get((section,)))
            raise ConfigError(exc.message, key=key, line=line) from None

    net = dict(sections["network"])
    if "hidden" in net:
        net["hidden"] = tuple(net["hidden"])
    metrics = dict(sections["metrics"])
    if metrics.get("bandwidths") is not None:
        metrics["bandwidths"] = tuple(metrics["bandwidths"])
    sgan = build(SganConfig, dict(
        top,
        dataset=build(DatasetSpec, sections["dataset"], "dataset"),
        objective=build(ObjectiveSpec, sections["objective"], "objective"),
        network=build(NetworkConfig, net, "network"),
    ), "")
    return RunConfig(sgan, build(MetricSettings, metrics, "metrics"),
                     build(OutputSettings, sections["output"], "output"))


def parse_text(text: str) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {exc}", line=mark.line + 1 if mark else None) from None
    if data is None:
        raise ConfigError("config is empty; dataset.kind and objective.kind are required", line=1)
    return from_dict(data, _line_map(node))


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text())

