"""Model and run configuration, YAML loading and config hashing.

A config file is a two-level YAML mapping: sections (``model``, ``kernels``,
``run``, ``verify``, ``density``) holding scalar keys. Unknown sections or
keys are hard errors reported with their line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Physical and kernel parameters of the particle system."""

    d: int = 2
    N: int = 3
    R: float = 1.0
    beta: float = 0.1
    v_min: float = 0.5
    v_max: float = 2.0
    t_max: float = 0.8
    I_c: int = 16
    I_r: int = 16
    tie_tol: float = 1e-12
    # kernel parameters
    delta_angle: float = 0.05
    r0: float = 0.05
    eps_cone: float = 0.1
    eps_gamma: float = 0.1
    s_x: float = 0.5
    beta_margin: float = 0.0
    quad_order: int = 64
    rejection_cap: int = 100000

    def __post_init__(self) -> None:
        problems = []
        if self.d not in (2, 3):
            problems.append("d must be 2 or 3")
        if self.N < 1:
            problems.append("N must be >= 1")
        if not self.R > 0:
            problems.append("R must be > 0")
        if not 0 < self.beta < self.R:
            problems.append("beta must lie in (0, R)")
        if not 0 <= self.v_min < self.v_max:
            problems.append("need 0 <= v_min < v_max")
        if not self.t_max > 0:
            problems.append("t_max must be > 0")
        if self.I_c < 0 or self.I_r < 0:
            problems.append("event caps must be >= 0")
        if not 0 < self.delta_angle < 0.5:
            problems.append("delta_angle must lie in (0, 1/2)")
        if not self.r0 > 0:
            problems.append("r0 must be > 0")
        if not 0 < self.eps_cone < 1:
            problems.append("eps_cone must lie in (0, 1)")
        if not 0 < self.eps_gamma < 0.5:
            problems.append("eps_gamma must lie in (0, 1/2)")
        if not self.s_x > 0:
            problems.append("s_x must be > 0")
        if self.quad_order < 2:
            problems.append("quad_order must be >= 2")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class VerifyConfig:
    """Tolerances, sample sizes and finite-difference settings of the suites."""

    exercise_samples: int = 1000
    tol_inverse: float = 1e-12
    tol_divergence: float = 1e-6
    tol_product_rule: float = 1e-5
    ibp2_pairs: int = 20
    tol_ibp2: float = 1e-6
    ibp2_order: int = 400
    flow_paths: int = 1000
    fd_step: float = 1e-4
    tol_flow_derivative: float = 1e-4
    tol_flow_roundtrip: float = 1e-12
    duality_paths: int = 100000
    n_sigma: float = 3.0


@dataclass(frozen=True)
class DensityConfig:
    n_min: int = 1000
    grid_points: int = 25
    axis: int = 0
    max_depth: int = 3
    pilot_paths: int = 20000


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    n_paths: int = 10000
    seed: int = 1
    workers: int = 1
    out: str = "out"
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    density: DensityConfig = field(default_factory=DensityConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": dataclasses.asdict(self.model),
            "kernels": {},
            "run": {"n_paths": self.n_paths, "seed": self.seed, "workers": self.workers, "out": self.out},
            "verify": dataclasses.asdict(self.verify),
            "density": dataclasses.asdict(self.density),
        }


_KERNEL_KEYS = (
    "delta_angle",
    "r0",
    "eps_cone",
    "eps_gamma",
    "s_x",
    "beta_margin",
    "quad_order",
    "rejection_cap",
)
_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name not in _KERNEL_KEYS)
_RUN_KEYS = ("n_paths", "seed", "workers", "out")


def _field_types(cls) -> Dict[str, type]:
    hints = {"int": int, "float": float, "str": str}
    return {f.name: hints.get(f.type, object) if isinstance(f.type, str) else f.type for f in fields(cls)}


def _coerce(value: Any, typ: type, where: str) -> Any:
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _line_map(text: str) -> Dict[Tuple[str, ...], int]:
    """Map (section,) and (section, key) to 1-based line numbers."""
    lines: Dict[Tuple[str, ...], int] = {}
    root = yaml.compose(text)
    if not isinstance(root, yaml.MappingNode):
        return lines
    for knode, vnode in root.value:
        sec = str(knode.value)
        lines[(sec,)] = knode.start_mark.line + 1
        if isinstance(vnode, yaml.MappingNode):
            for k2, _ in vnode.value:
                lines[(sec, str(k2.value))] = k2.start_mark.line + 1
    return lines


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse YAML config text into a :class:`RunConfig`."""
    try:
        data = yaml.safe_load(text) or {}
        lines = _line_map(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping of sections")

    def loc(*key: str) -> str:
        line = lines.get(tuple(key))
        return f"{source}:{line}: {'.'.join(key)}" if line else f"{source}: {'.'.join(key)}"

    sections = {
        "model": (ModelConfig, _MODEL_KEYS),
        "kernels": (ModelConfig, _KERNEL_KEYS),
        "run": (RunConfig, _RUN_KEYS),
        "verify": (VerifyConfig, tuple(f.name for f in fields(VerifyConfig))),
        "density": (DensityConfig, tuple(f.name for f in fields(DensityConfig))),
    }
    values: Dict[str, Dict[str, Any]] = {k: {} for k in ("model", "run", "verify", "density")}
    for sec, body in data.items():
        if sec not in sections:
            raise ConfigError(f"{loc(str(sec))}: unknown section (expected one of {sorted(sections)})")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{loc(sec)}: section must be a mapping")
        cls, allowed = sections[sec]
        types = _field_types(cls)
        target = values["model" if sec == "kernels" else sec]
        for key, val in body.items():
            if key not in allowed:
                raise ConfigError(f"{loc(sec, str(key))}: unknown key (allowed: {', '.join(allowed)})")
            target[key] = _coerce(val, types[key], loc(sec, key))
    try:
        model = ModelConfig(**values["model"])
    except ConfigError as exc:
        raise ConfigError(f"{source}: model: {exc}") from exc
    return RunConfig(
        model=model,
        verify=VerifyConfig(**values["verify"]),
        density=DensityConfig(**values["density"]),
        **values["run"],
    )


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), source=str(p))


def config_hash(cfg: Union[ModelConfig, RunConfig]) -> str:
    """16-hex-digit hash of the canonical JSON form of a config."""
    payload = dataclasses.asdict(cfg)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def dump_config(cfg: RunConfig) -> str:
    """YAML text that :func:`parse_config` reads back to an equal config."""
    data = cfg.to_dict()
    model = data["model"]
    data["kernels"] = {k: model.pop(k) for k in _KERNEL_KEYS}
    return yaml.safe_dump(data, sort_keys=False)
