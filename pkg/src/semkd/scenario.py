"""Scenario configuration: typed settings, YAML persistence, validation, seeded streams.

A scenario file is a YAML mapping; see ``scenarios/default.yaml`` for every key.
Keys left out take the defaults of the dataclasses below. When ``devices`` is
omitted, one profile per device is drawn from ``device_defaults`` where a
two-element list ``[lo, hi]`` means "uniform in [lo, hi]" and a scalar means
"fixed". Each device draws from its own stream keyed by (seed, device index).
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .compute import EXTRACTION_MODES
from .distill import DistillSchedule
from .nn import TaskSpec

SCHEMA_VERSION = 1
POLICIES = ("single", "all")

# stream purposes; values are part of the determinism contract, never renumber
STREAMS = {
    "device": 1,
    "teacher": 2,
    "shard": 3,
    "student": 4,
    "no_kd": 5,
    "channel": 6,
    "capture": 7,
}


def rng_stream(seed: int, purpose: str, *ids: int) -> np.random.Generator:
    """Independent generator for ``purpose`` and the given ids (device, slot, ...)."""
    return np.random.default_rng([int(seed), STREAMS[purpose], *map(int, ids)])


class ScenarioError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class DeviceProfile:
    transmit_power_w: float
    path_gain: float
    shadowing: float
    distance_m: float
    pathloss_exponent: float
    compute_flops: float
    sensor_pixels: float
    readout_rate: float
    pipeline_efficiency: float
    capture_power_w: float
    extraction_power_w: float
    payload_bits: float
    deadline_s: float
    energy_budget_j: float


def _uniform(value):
    return tuple(value) if isinstance(value, (list, tuple)) else value


@dataclass(frozen=True)
class DeviceDefaults:
    """Generators for device profiles: scalars are fixed, (lo, hi) pairs are uniform draws."""

    transmit_power_w: float | tuple = (0.2, 0.5)
    path_gain: float | tuple = 1e-3
    shadowing: float | tuple = 1.0
    distance_m: float | tuple = (50.0, 150.0)
    pathloss_exponent: float | tuple = 3.0
    compute_flops: float | tuple = (0.5e9, 2.0e9)
    sensor_pixels: float | tuple = 1048576.0
    readout_rate: float | tuple = 1e8
    pipeline_efficiency: float | tuple = 0.9
    capture_power_w: float | tuple = 0.1
    extraction_power_w: float | tuple = 0.5
    payload_bits: float | tuple = 8e5
    deadline_s: float | tuple = 0.5
    energy_budget_j: float | tuple = 0.5

    def draw(self, rng: np.random.Generator) -> DeviceProfile:
        values = {}
        for f in dataclasses.fields(DeviceProfile):
            spec = getattr(self, f.name)
            if isinstance(spec, tuple):
                values[f.name] = float(rng.uniform(spec[0], spec[1]))
            else:
                values[f.name] = float(spec)
        return DeviceProfile(**values)

    def bounds(self, name: str) -> tuple[float, float]:
        spec = getattr(self, name)
        return (float(spec[0]), float(spec[1])) if isinstance(spec, tuple) else (float(spec), float(spec))


@dataclass(frozen=True)
class TeacherSettings:
    n_blocks: int = 4
    width: int = 64
    max_epochs: int = 50
    warmup_epochs: int = 2
    patience: int = 5
    batch_size: int = 32
    learning_rate: float = 0.001


@dataclass(frozen=True)
class PlannerSettings:
    max_iterations: int = 60
    epsilon: float = 0.0
    policy: str = "single"


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 7
    num_devices: int = 10
    num_slots: int = 1
    num_tasks: int = 1
    total_bandwidth_hz: float = 10e6
    noise_power_w: float = 1.1e-11
    omega_min: float = 0.8
    weights: tuple[float, ...] | None = None
    lam: float = 1.0
    compression_threshold: float = 0.3
    feature_map_shape: tuple[int, int] = (2, 2)
    importance: str = "activation"
    extraction_mode: str = "inference"
    static_kd_blocks: int | None = None
    planner: PlannerSettings = field(default_factory=PlannerSettings)
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    distill: DistillSchedule = field(default_factory=DistillSchedule)
    task: TaskSpec = field(default_factory=TaskSpec)
    device_defaults: DeviceDefaults = field(default_factory=DeviceDefaults)
    devices: tuple[DeviceProfile, ...] = ()

    @property
    def device_weights(self) -> tuple[float, ...]:
        if self.weights is None:
            return (1.0 / self.num_devices,) * self.num_devices
        return self.weights

    @property
    def static_blocks(self) -> int:
        return self.teacher.n_blocks if self.static_kd_blocks is None else self.static_kd_blocks

    def bandwidths(self) -> list[float]:
        """Equal split of the total bandwidth.

        The last share absorbs the rounding so the shares fsum exactly to the total.
        """
        total = self.total_bandwidth_hz
        shares = [total / self.num_devices] * self.num_devices
        if math.fsum(shares) != total:
            shares[-1] = total - math.fsum(shares[:-1])
        while (s := math.fsum(shares)) != total:
            shares[-1] = math.nextafter(shares[-1], math.inf if s < total else -math.inf)
        return shares

    def digest(self) -> str:
        return hashlib.sha256(dump_scenario(self).encode()).hexdigest()[:16]


_NESTED = {
    "planner": PlannerSettings,
    "teacher": TeacherSettings,
    "distill": DistillSchedule,
    "task": TaskSpec,
    "device_defaults": DeviceDefaults,
}
# YAML keys that differ from attribute names
_RENAMES = {"lambda": "lam"}


def _to_tuple(value):
    if isinstance(value, list):
        return tuple(_to_tuple(v) for v in value)
    return value


def _build(cls, data, where: str, errors: list[str]):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        errors.append(f"{where} must be a mapping")
        return cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        attr = _RENAMES.get(key, key)
        if attr not in names:
            errors.append(f"unknown key {where + '.' if where else ''}{key}")
            continue
        if attr in _NESTED and cls is ScenarioConfig:
            value = _build(_NESTED[attr], value, attr, errors)
        elif attr == "devices":
            value = tuple(_build(DeviceProfile, d, f"devices[{i}]", errors) for i, d in enumerate(value or []))
        else:
            value = _to_tuple(value)
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        errors.append(f"{where or 'scenario'}: {exc}")
        return None


def generate_devices(cfg: ScenarioConfig) -> tuple[DeviceProfile, ...]:
    return tuple(cfg.device_defaults.draw(rng_stream(cfg.seed, "device", u)) for u in range(cfg.num_devices))


def scenario_from_dict(data: dict, seed: int | None = None) -> ScenarioConfig:
    """Build and validate a config; fills in devices when the mapping lists none."""
    if not isinstance(data, dict):
        raise ScenarioError(["scenario must be a mapping"])
    data = dict(data)
    version = data.pop("version", SCHEMA_VERSION)
    errors: list[str] = []
    if version != SCHEMA_VERSION:
        errors.append(f"unsupported scenario version {version}")
    cfg = _build(ScenarioConfig, data, "", errors)
    if errors or cfg is None:
        raise ScenarioError(errors)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    if not cfg.devices and isinstance(cfg.num_devices, int) and cfg.num_devices >= 1:
        try:
            cfg = dataclasses.replace(cfg, devices=generate_devices(cfg))
        except (TypeError, ValueError) as exc:
            raise ScenarioError([f"cannot draw device profiles: {exc}"]) from exc
    violations = validate(cfg)
    if violations:
        raise ScenarioError(violations)
    return cfg


def default_scenario_path() -> Path:
    return Path(str(resources.files("semkd") / "scenarios" / "default.yaml"))


def load_scenario(path, seed: int | None = None) -> ScenarioConfig:
    """Load a YAML scenario; ``"default"`` names the packaged default."""
    path = default_scenario_path() if str(path) == "default" else Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError([f"cannot parse {path}: {exc}"]) from exc
    return scenario_from_dict(data or {}, seed=seed)


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    def plain(value):
        if dataclasses.is_dataclass(value):
            return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        return value

    out = {"version": SCHEMA_VERSION}
    for key, value in plain(cfg).items():
        out["lambda" if key == "lam" else key] = value
    return out


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(scenario_to_dict(cfg), sort_keys=False)


def _positive(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value) and value > 0


def validate(cfg: ScenarioConfig) -> list[str]:
    """Every violated invariant, in a stable order."""
    v: list[str] = []
    if not isinstance(cfg.num_devices, int) or cfg.num_devices < 1:
        v.append("num_devices must be ≥ 1")
    if cfg.num_tasks != 1:
        v.append("num_tasks must be 1")
    if not isinstance(cfg.num_slots, int) or cfg.num_slots < 1:
        v.append("num_slots must be ≥ 1")
    if not _positive(cfg.total_bandwidth_hz):
        v.append("total_bandwidth_hz must be > 0")
    if not _positive(cfg.noise_power_w):
        v.append("noise_power_w must be > 0")
    if not (isinstance(cfg.omega_min, (int, float)) and 0 < cfg.omega_min <= 1):
        v.append("omega_min out of (0,1]")
    if cfg.weights is not None:
        if isinstance(cfg.num_devices, int) and len(cfg.weights) != cfg.num_devices:
            v.append("weights must list one value per device")
        if any(w < 0 for w in cfg.weights):
            v.append("weights must be ≥ 0")
    if cfg.lam < 0:
        v.append("lambda must be ≥ 0")
    if not 0 <= cfg.compression_threshold < 1:
        v.append("compression_threshold out of [0,1)")
    if cfg.importance not in ("activation", "gradient"):
        v.append("importance must be 'activation' or 'gradient'")
    if cfg.extraction_mode not in EXTRACTION_MODES:
        v.append(f"extraction_mode must be one of {list(EXTRACTION_MODES)}")

    p = cfg.planner
    if p.max_iterations < 1:
        v.append("planner.max_iterations must be ≥ 1")
    if p.epsilon < 0:
        v.append("planner.epsilon must be ≥ 0")
    if p.policy not in POLICIES:
        v.append(f"planner.policy must be one of {list(POLICIES)}")

    t = cfg.teacher
    if t.n_blocks < 1:
        v.append("teacher.n_blocks must be ≥ 1")
    if t.width < 1:
        v.append("teacher.width must be ≥ 1")
    if t.max_epochs < 1 or t.batch_size < 1 or t.patience < 1:
        v.append("teacher.max_epochs, batch_size and patience must be ≥ 1")
    if not 1 <= t.warmup_epochs <= t.max_epochs:
        v.append("teacher.warmup_epochs must lie in [1, max_epochs]")
    if t.learning_rate < 0:
        v.append("teacher.learning_rate must be ≥ 0")
    if not 1 <= cfg.static_blocks <= max(t.n_blocks, 1):
        v.append("static_kd_blocks must lie in [1, teacher.n_blocks]")
    h, w = cfg.feature_map_shape
    if h < 1 or w < 1 or t.width % (h * w):
        v.append("feature_map_shape must tile teacher.width")

    v.extend(cfg.task.validate())
    v.extend(cfg.distill.validate())
    if isinstance(cfg.num_devices, int) and cfg.num_devices >= 1 and cfg.task.n_train < cfg.num_devices:
        v.append("task.n_train must give every device a non-empty shard")

    if isinstance(cfg.num_devices, int) and len(cfg.devices) != cfg.num_devices:
        v.append(f"expected {cfg.num_devices} device profiles, got {len(cfg.devices)}")
    p_lo, p_hi = cfg.device_defaults.bounds("transmit_power_w")
    for i, d in enumerate(cfg.devices):
        for f in dataclasses.fields(DeviceProfile):
            if not _positive(getattr(d, f.name)):
                v.append(f"devices[{i}].{f.name} must be > 0")
        if not 0 < d.pipeline_efficiency <= 1:
            v.append(f"devices[{i}].pipeline_efficiency out of (0,1]")
        if not p_lo <= d.transmit_power_w <= p_hi:
            v.append(f"devices[{i}].transmit_power_w outside configured range [{p_lo}, {p_hi}]")

    if isinstance(cfg.num_devices, int) and cfg.num_devices >= 1 and _positive(cfg.total_bandwidth_hz):
        total = math.fsum(cfg.bandwidths())
        if total > cfg.total_bandwidth_hz * (1 + 1e-15):
            v.append("allocated bandwidth exceeds total_bandwidth_hz")
    return v
