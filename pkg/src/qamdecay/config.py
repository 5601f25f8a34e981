"""
Experiment configuration: a JSON document with fixed sections, validated
against the dataclass schema below, plus the code version hash that every
output embeds.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .exceptions import ConfigError

# per-mode resource caps
MODE_CAPS = {
    "ci": {"nu_max": 2048, "log2_size": 14, "wavepacket_steps": 2000},
    "desk": {"nu_max": 4096, "log2_size": 17, "wavepacket_steps": 16000},
}
METHODS = ("truncated", "complex_scaling", "wavepacket")


@dataclass
class MapSection:
    kick: float = 2.5
    drift: float = 1.0
    sign: str = "minus"


@dataclass
class SweepSection:
    inv_hbar_min: float = 4.0
    inv_hbar_max: float = 20.0
    points: int = 60
    values: Optional[list] = None     # explicit grid; overrides the range
    n_max: int = 16
    snap_tolerance: float = 0.02      # relative distance allowed when snapping to m/n

    def grid(self) -> list:
        if self.values is not None:
            return [float(v) for v in self.values]
        if self.points == 1:
            return [float(self.inv_hbar_min)]
        step = (self.inv_hbar_max - self.inv_hbar_min) / (self.points - 1)
        return [self.inv_hbar_min + k * step for k in range(self.points)]


@dataclass
class ChainSeed:
    """An r:s chain; seeds are located automatically when left empty."""

    r: int
    s: int = 1
    inner_seed: Optional[list] = None
    outer_seed: Optional[list] = None
    orbit_seed: Optional[list] = None
    reference: Optional[dict] = None  # known {i_rs, coupling, mass}, recorded next to the fit


@dataclass
class Tolerances:
    stabilization: float = 1e-6
    compare_factor: float = 2.0


@dataclass
class CachePolicy:
    enabled: bool = True
    directory: str = ".qamcache"


@dataclass
class Numerics:
    mode: str = "ci"
    nu_sequence: list = field(default_factory=lambda: [128, 256])
    dense_max: int = 1024
    rho_list: list = field(default_factory=lambda: [0.90, 0.92, 0.94, 0.96, 0.98])
    nu_complex_scaling: int = 256
    wavepacket_steps: Optional[int] = None
    log2_size: Optional[int] = None
    hbar: float = 0.25                # single-point runs (propagate, spectrum, fig9, fig10)
    grid_step: float = 0.02
    island_grid_step: float = 0.05
    escape_horizon: int = 2000        # island box (coarse grid)
    area_horizon: int = 10000         # island area and chain areas (fine grid)
    portrait_steps: int = 400
    workers: int = 1


@dataclass
class ExperimentConfig:
    map: MapSection = field(default_factory=MapSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    methods: list = field(default_factory=lambda: ["truncated"])
    chains: list = field(default_factory=list)
    output_dir: str = "out"
    tolerances: Tolerances = field(default_factory=Tolerances)
    cache: CachePolicy = field(default_factory=CachePolicy)
    numerics: Numerics = field(default_factory=Numerics)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved(self) -> "ExperimentConfig":
        """Copy with the mode caps applied (basis sizes clipped, wavepacket defaults filled)."""
        cfg = from_dict(self.to_dict())
        caps = MODE_CAPS[cfg.numerics.mode]
        nus = sorted({int(n) for n in cfg.numerics.nu_sequence if n <= caps["nu_max"]})
        if len(nus) < 2:
            raise ConfigError(f"nu_sequence needs two sizes <= {caps['nu_max']} in "
                              f"{cfg.numerics.mode} mode")
        cfg.numerics.nu_sequence = nus
        if cfg.numerics.wavepacket_steps is None:
            cfg.numerics.wavepacket_steps = caps["wavepacket_steps"]
        if cfg.numerics.log2_size is None:
            cfg.numerics.log2_size = caps["log2_size"]
        cfg.numerics.wavepacket_steps = min(cfg.numerics.wavepacket_steps,
                                            caps["wavepacket_steps"])
        cfg.numerics.log2_size = min(cfg.numerics.log2_size, caps["log2_size"])
        return cfg


_SECTIONS = {"map": MapSection, "sweep": SweepSection, "tolerances": Tolerances,
             "cache": CachePolicy, "numerics": Numerics}


def _check_type(where: str, value: Any, annotation: str):
    ann = annotation.replace("Optional[", "").rstrip("]")
    if value is None:
        if "Optional" not in annotation:
            raise ConfigError(f"{where} may not be null")
        return value
    if ann == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if ann == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if ann == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if ann == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if ann in ("list", "dict"):
        if not isinstance(value, list if ann == "list" else dict):
            raise ConfigError(f"{where} must be a {ann}, got {type(value).__name__}")
        return value
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, f in names.items():
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"{where}.{name} is required")
            continue
        if name in _SECTIONS and cls is ExperimentConfig:
            kwargs[name] = _build(_SECTIONS[name], data[name], name)
        else:
            kwargs[name] = _check_type(f"{where}.{name}", data[name], str(f.type))
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.map.sign not in ("plus", "minus"):
        raise ConfigError(f"map.sign must be 'plus' or 'minus', got {cfg.map.sign!r}")
    if cfg.map.kick < 0 or cfg.map.drift < 0:
        raise ConfigError("map.kick and map.drift must be >= 0")
    sw = cfg.sweep
    if sw.values is None and (sw.points < 1 or sw.inv_hbar_max < sw.inv_hbar_min):
        raise ConfigError("sweep range is empty")
    if any(not isinstance(v, (int, float)) or v <= 0 for v in (sw.values or [])):
        raise ConfigError("sweep.values must be positive numbers")
    if not 0 < sw.snap_tolerance < 0.5:
        raise ConfigError("sweep.snap_tolerance must lie in (0, 0.5)")
    if sw.inv_hbar_min <= 0 or sw.n_max < 1:
        raise ConfigError("sweep.inv_hbar_min must be > 0 and sweep.n_max >= 1")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {METHODS}")
    if cfg.numerics.mode not in MODE_CAPS:
        raise ConfigError(f"numerics.mode must be one of {tuple(MODE_CAPS)}")
    if cfg.numerics.workers < 1:
        raise ConfigError("numerics.workers must be >= 1")
    if cfg.tolerances.compare_factor <= 1.0 or cfg.tolerances.stabilization <= 0:
        raise ConfigError("tolerances.compare_factor must exceed 1 and stabilization be > 0")


def from_dict(data: dict) -> ExperimentConfig:
    """Validate a JSON-like mapping and build the config; raises ConfigError."""
    cfg = _build(ExperimentConfig, data, "config")
    cfg.chains = [c if isinstance(c, ChainSeed) else _build(ChainSeed, c, f"chains[{i}]")
                  for i, c in enumerate(cfg.chains)]
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data)


def merge(base: dict, overrides: dict) -> dict:
    """Recursive dict merge; ``overrides`` wins."""
    out = dict(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def dotted(key: str, value) -> dict:
    """``dotted('numerics.mode', 'desk')`` -> ``{'numerics': {'mode': 'desk'}}``."""
    out: dict = {}
    node = out
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def code_version() -> str:
    """sha256 over the package sources, in sorted path order."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()
