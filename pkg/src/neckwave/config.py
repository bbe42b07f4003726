"""Experiment configuration: a YAML file validated into nested dataclasses."""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    bump: str = "gaussian"
    r2: float = 4.0
    amplitude: float = 1.0
    eps0: Optional[float] = None


@dataclass
class WaveConfig:
    end: str = "plus"
    direction: float = float(np.pi)
    h_list: List[float] = field(default_factory=lambda: [0.05, 0.02, 0.01])


@dataclass
class PressureConfig:
    eps: float = 0.03
    eps_list: List[float] = field(default_factory=lambda: [0.1, 0.03, 0.01])
    t_max: float = 60.0


@dataclass
class PropagationConfig:
    N: int = 40
    gamma_uns: float = 0.05
    amp_floor: float = 1e-6
    branch_budget: int = 1_000_000


@dataclass
class GridConfig:
    # r range and angle range relative to the incoming side
    bounds: List[float] = field(default_factory=lambda: [-0.9, 0.9, -0.7, 0.7])
    cells_per_h: float = 10.0


@dataclass
class VerifyConfig:
    enabled: List[str] = field(default_factory=lambda: [
        "residual", "supnorm", "equidist", "nodal", "nodal-identity", "phase-decay"])
    centers: int = 20
    ball_factor: float = 10.0
    band: float = 10.0
    sup_spread: float = 2.0
    cl_spread: float = 3.0
    nodal_spread: float = 1.25
    identity_tol: float = 0.05
    identity_h: float = 0.02
    residual_slope: List[float] = field(default_factory=lambda: [1.7, 2.3])
    refinement_tol: float = 0.10
    decay_slope: float = -3.0
    nodal_window: List[float] = field(default_factory=lambda: [-0.3, 0.3, -0.2, 0.2])


CHECKS = ("residual", "supnorm", "equidist", "nodal", "nodal-identity", "phase-decay")


@dataclass
class ExperimentConfig:
    seed: int
    output: str = "out"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    wave: WaveConfig = field(default_factory=WaveConfig)
    pressure: PressureConfig = field(default_factory=PressureConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)

    def validate(self):
        h = self.wave.h_list
        if len(h) == 0:
            raise ConfigError("wave.h_list is empty")
        if any(b >= a for a, b in zip(h, h[1:])):
            raise ConfigError("wave.h_list must be strictly decreasing")
        if min(h) <= 0:
            raise ConfigError("wave.h_list entries must be positive")
        if self.grid.cells_per_h < 10:
            raise ConfigError("grid.cells_per_h = %g violates the resolution rule (>= 10)"
                              % self.grid.cells_per_h)
        if len(self.grid.bounds) != 4:
            raise ConfigError("grid.bounds needs r_lo, r_hi, dtheta_lo, dtheta_hi")
        r_lo, r_hi, t_lo, t_hi = self.grid.bounds
        if not (r_lo < r_hi and t_lo < t_hi):
            raise ConfigError("grid.bounds must be increasing pairs")
        if self.wave.end not in ("plus", "minus"):
            raise ConfigError("wave.end must be 'plus' or 'minus'")
        if not 0 < self.propagation.gamma_uns <= 0.2:
            raise ConfigError("propagation.gamma_uns must lie in (0, 0.2]")
        if not 0 < self.propagation.N <= 60:
            raise ConfigError("propagation.N must lie in [1, 60]")
        if self.propagation.amp_floor <= 0:
            raise ConfigError("propagation.amp_floor must be positive")
        unknown = [c for c in self.verify.enabled if c not in CHECKS]
        if unknown:
            raise ConfigError("unknown checks %s" % unknown)
        return self

    def to_dict(self):
        return asdict(self)

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


_SECTIONS = {"geometry": GeometryConfig, "wave": WaveConfig, "pressure": PressureConfig,
             "propagation": PropagationConfig, "grid": GridConfig, "verify": VerifyConfig}


def from_dict(data):
    data = dict(data or {})
    if data.get("seed") is None:
        raise ConfigError("seed is mandatory")
    kw = {"seed": int(data.pop("seed")), "output": str(data.pop("output", "out"))}
    for name, cls in _SECTIONS.items():
        sec = data.pop(name, None) or {}
        allowed = set(cls.__dataclass_fields__)
        bad = set(sec) - allowed
        if bad:
            raise ConfigError("unknown keys in %s: %s" % (name, sorted(bad)))
        kw[name] = cls(**sec)
    if data:
        raise ConfigError("unknown top-level keys: %s" % sorted(data))
    return ExperimentConfig(**kw).validate()


def load_config(path):
    with open(path) as fh:
        return from_dict(yaml.safe_load(fh))


def default_config_path():
    return Path(__file__).with_name("default_config.yaml")


def default_config():
    return load_config(default_config_path())
