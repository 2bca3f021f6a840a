"""Experiment configuration: one TOML document drives every run.

All values default to the twin-experiment reference setup; the TOML file
overrides selectively.  Paths inside the file resolve relative to the file's
own directory.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .routing import PolicyConfig
from .windfield import WindConfig


@dataclass
class DomainConfig:
    geojson: str = "plant.geojson"
    h: float = 10.0


@dataclass
class TimeConfig:
    total: float = 100.0
    dt: float = 1.0

    def __post_init__(self):
        if self.dt <= 0 or self.total <= 0:
            raise ValueError("time parameters must be positive")
        steps = self.total / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("total time must be a multiple of dt")

    @property
    def steps(self) -> int:
        return int(round(self.total / self.dt))


@dataclass
class ModelParams:
    w_in: float = 5.0
    w_dir: float = math.pi
    epsilon: float = 0.8


@dataclass
class EnsembleConfig:
    n_members: int = 10
    sigma_in: float = 3.0
    sigma_dir: float = math.pi / 2
    epsilon_spurious: float = 1e-6
    # per-member flow-solve budget; warm starts keep polishing a capped
    # solve across successive assimilation steps
    wind_max_iterations: int = 1200


@dataclass
class ObservationConfig:
    sigma_ob: float = 1e-3
    r_inverse_mode: str = "variance"


@dataclass
class GatingConfig:
    tr_intensity: float = 0.10
    tr_direction: float = 0.05


@dataclass
class ReleaseConfig:
    center: tuple = (450.0, 300.0)
    sigma0: float = 30.0


@dataclass
class DroneConfig:
    start: tuple = (150.0, 150.0)
    speed: float = 10.0


@dataclass
class GammaConfig:
    polyline: tuple = ((310.0, 160.0), (590.0, 440.0))
    n_stations: int = 40
    times: tuple = (0.0, 20.0, 40.0, 60.0, 80.0, 100.0)


@dataclass
class RunConfig:
    seed: int = 2024
    out_dir: str = "runs/default"
    theta: tuple = (0.0, 0.2, 0.3)
    snapshot_times: tuple = (0.0, 100.0)
    krylov_rtol: float = 1e-8


@dataclass
class ExperimentConfig:
    domain: DomainConfig = field(default_factory=DomainConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    truth: ModelParams = field(default_factory=ModelParams)
    belief: ModelParams = field(default_factory=lambda: ModelParams(
        w_in=2.5, w_dir=3 * math.pi / 2, epsilon=0.4))
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    gating: GatingConfig = field(default_factory=GatingConfig)
    release: ReleaseConfig = field(default_factory=ReleaseConfig)
    drone: DroneConfig = field(default_factory=DroneConfig)
    gamma: GammaConfig = field(default_factory=GammaConfig)
    run: RunConfig = field(default_factory=RunConfig)
    wind_solver: WindConfig = field(default_factory=lambda: WindConfig(max_iterations=1500))
    sectors: int = 8
    base_dir: Path = field(default_factory=Path.cwd)

    def policy_config(self, theta) -> PolicyConfig:
        return PolicyConfig(sectors=self.sectors, theta=theta,
                            speed=self.drone.speed, dt=self.time.dt)

    def geojson_path(self) -> Path:
        return (self.base_dir / self.domain.geojson).resolve()

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        payload = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_SECTION_TYPES = {
    "domain": DomainConfig,
    "time": TimeConfig,
    "truth": ModelParams,
    "belief": ModelParams,
    "ensemble": EnsembleConfig,
    "observation": ObservationConfig,
    "gating": GatingConfig,
    "release": ReleaseConfig,
    "drone": DroneConfig,
    "gamma": GammaConfig,
    "run": RunConfig,
    "wind_solver": WindConfig,
}


def load_config(path) -> ExperimentConfig:
    """Read a TOML experiment file, filling anything omitted with defaults."""
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        if section in doc:
            body = doc.pop(section)
            if not isinstance(body, dict):
                raise ValueError(f"[{section}] must be a table")
            try:
                kwargs[section] = cls(**body)
            except TypeError as exc:
                raise ValueError(f"bad [{section}] settings: {exc}") from exc
    if "sectors" in doc:
        kwargs["sectors"] = int(doc.pop("sectors"))
    if doc:
        raise ValueError(f"unknown config keys: {sorted(doc)}")
    return ExperimentConfig(base_dir=path.parent.resolve(), **kwargs)
