"""Scenario files, topology construction and synthetic per-device datasets.

Scenario files are line-oriented ``key = value`` text with ``#`` comments.
Lists are comma separated; the failure plan is a ``;``-separated list of
``round:kind:id`` entries, e.g. ``failure_plan = 10:aggregator:2; 12:device:7``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import rng as streams
from .adaptation import oracle_mcs, oracle_power
from .channel import KT_W_PER_HZ, MCS_TABLE, ChannelModel, ChannelObservation, dbm_to_w
from .errors import ParseError, ValidationError
from .mobility_traffic import TrafficKind, assign_traffic_kind

SNR_RANGE_DB = (-5.0, 30.0)
SNR_OFFSET_DB = 5.0  # per-device shift drawn from [-5, 5]
INTERFERENCE_RANGE_DBM = (-110.0, -80.0)


class Mode(str, Enum):
    AITP = "AITP"
    CAIP = "CAIP"
    NAP = "NAP"


@dataclass(frozen=True)
class FailureEvent:
    round: int
    kind: str  # "device" | "aggregator"
    target: int

    def __str__(self):
        return f"{self.round}:{self.kind}:{self.target}"


@dataclass(frozen=True)
class ScenarioConfig:
    area_m: float = 1000.0
    n_devices: int = 50
    n_aggregators: int = 5
    mode: Mode = Mode.AITP
    rounds: int = 20
    local_epochs: int = 2
    learning_rate: float = 0.05
    batch_size: int = 16
    dp_enabled: bool = True
    dp_epsilon_round: float = 0.5
    dp_epsilon_max: float = 50.0
    dp_clip: float = 1.0
    objective_weights: tuple[float, float, float] = (0.4, 0.4, 0.2)
    bandwidth_max: float = 100e6
    power_max: float = 0.2
    accuracy_target: float = 0.6
    channel_model: ChannelModel = ChannelModel.RAYLEIGH
    traffic_mix: tuple[float, float, float] = (0.4, 0.2, 0.4)
    failure_plan: tuple[FailureEvent, ...] = ()
    seed: int = 42
    speed_min: float = 1.0
    speed_max: float = 15.0
    mobile_fraction: float = 0.5
    dataset_rows: int = 64
    validation_rows: int = 2000
    codebook_size: int = 8
    participation_fraction: float = 1.0
    strict_paper_combine: bool = False
    dt: float = 1.0
    c_train: float = 1e-8
    c_agg: float = 1e-9
    c_comp: float = 1e-7
    control_rate: float = 1e6
    c_central: float = 1e-6
    c_central_j: float = 1e-5
    latency_cap: float = 1.0
    wall_clock_limit: float = 600.0
    workers: int = 1

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    @property
    def epsilon_round_effective(self) -> float:
        return self.dp_epsilon_round if self.dp_enabled else math.inf


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(ScenarioConfig))


def validate(cfg: ScenarioConfig) -> None:
    def need(cond, name, msg):
        if not cond:
            raise ValidationError(name, msg)

    need(cfg.n_aggregators >= 1, "n_aggregators", "must be >= 1")
    need(cfg.n_devices >= cfg.n_aggregators, "n_devices", "must be >= n_aggregators")
    need(cfg.area_m > 0, "area_m", "must be positive")
    need(cfg.rounds >= 0, "rounds", "must be >= 0")
    need(cfg.local_epochs >= 1, "local_epochs", "must be >= 1")
    need(cfg.learning_rate > 0, "learning_rate", "must be positive")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.dp_epsilon_round > 0, "dp_epsilon_round", "must be positive")
    need(cfg.dp_epsilon_max > 0, "dp_epsilon_max", "must be positive")
    need(cfg.dp_epsilon_round <= cfg.dp_epsilon_max, "dp_epsilon_round", "must not exceed dp_epsilon_max")
    need(cfg.dp_clip > 0, "dp_clip", "must be positive")
    w = cfg.objective_weights
    need(len(w) == 3 and all(x >= 0 for x in w), "objective_weights", "need three non-negative weights")
    need(sum(w) > 0, "objective_weights", "must not all be zero")
    need(cfg.bandwidth_max > 0, "bandwidth_max", "must be positive")
    need(cfg.power_max > 0, "power_max", "must be positive")
    need(0.0 <= cfg.accuracy_target <= 1.0, "accuracy_target", "must lie in [0, 1]")
    mix = cfg.traffic_mix
    need(len(mix) == 3 and all(x >= 0 for x in mix), "traffic_mix", "need three non-negative fractions")
    need(abs(sum(mix) - 1.0) <= 1e-9, "traffic_mix", "fractions must sum to 1")
    need(0 <= cfg.seed < 2 ** 64, "seed", "must be a 64-bit unsigned integer")
    need(0 < cfg.speed_min <= cfg.speed_max, "speed_min", "need 0 < speed_min <= speed_max")
    need(0.0 <= cfg.mobile_fraction <= 1.0, "mobile_fraction", "must lie in [0, 1]")
    need(cfg.dataset_rows >= 1, "dataset_rows", "must be >= 1")
    need(cfg.validation_rows >= 1, "validation_rows", "must be >= 1")
    need(cfg.codebook_size >= 1, "codebook_size", "must be >= 1")
    need(0.0 < cfg.participation_fraction <= 1.0, "participation_fraction", "must lie in (0, 1]")
    need(cfg.dt > 0, "dt", "must be positive")
    for name in ("c_train", "c_agg", "c_comp", "control_rate", "c_central", "c_central_j",
                 "latency_cap", "wall_clock_limit"):
        need(getattr(cfg, name) > 0, name, "must be positive")
    need(cfg.workers >= 1, "workers", "must be >= 1")
    for ev in cfg.failure_plan:
        need(ev.kind in ("device", "aggregator"), "failure_plan", f"unknown kind {ev.kind!r}")
        need(ev.round >= 0, "failure_plan", f"negative round in {ev}")
        limit = cfg.n_devices if ev.kind == "device" else cfg.n_aggregators
        need(0 <= ev.target < limit, "failure_plan", f"no {ev.kind} with id {ev.target}")


# --------------------------------------------------------------------------
# Parsing

def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(","))


def parse_failure_plan(s: str) -> tuple[FailureEvent, ...]:
    events = []
    for part in s.split(";"):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) != 3:
            raise ValueError(f"failure entry {part!r} is not round:kind:id")
        events.append(FailureEvent(int(bits[0]), bits[1].strip().lower(), int(bits[2])))
    return tuple(events)


def _converter(name: str):
    default = getattr(ScenarioConfig, name, None)
    if name == "mode":
        return lambda s: Mode(s.strip().upper())
    if name == "channel_model":
        return lambda s: ChannelModel(s.strip().upper())
    if name == "failure_plan":
        return parse_failure_plan
    if name in ("objective_weights", "traffic_mix"):
        return _parse_floats
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return lambda s: int(s.strip(), 0)
    return lambda s: float(s.strip())


def parse_scenario(text: str, source: str = "<scenario>") -> ScenarioConfig:
    """Parse scenario text; unknown keys and malformed lines raise ``ParseError``."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in FIELD_NAMES:
            raise ParseError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ParseError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _converter(key)(value)
        except ValueError as exc:
            raise ParseError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return ScenarioConfig(**values)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from None
    return parse_scenario(text, str(path))


def format_value(v) -> str:
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], FailureEvent):
            return "; ".join(str(e) for e in v)
        return ", ".join(format_value(x) for x in v)
    return str(v)


def dump_scenario(cfg: ScenarioConfig) -> str:
    return "".join(f"{name} = {format_value(getattr(cfg, name))}\n" for name in FIELD_NAMES)


def config_echo(cfg: ScenarioConfig) -> dict:
    return {name: format_value(getattr(cfg, name)) for name in FIELD_NAMES}


# --------------------------------------------------------------------------
# Topology

@dataclass
class LocalDataset:
    features: np.ndarray  # (rows, 4): snr_db, interference_db, load, speed_mps
    labels: np.ndarray  # (rows, 2): normalized MCS index, power fraction

    @property
    def rows(self) -> int:
        return len(self.features)


@dataclass
class DeviceState:
    id: int
    cluster_id: int
    position: tuple[float, float]
    waypoint: tuple[float, float]
    speed: float
    mobile: bool
    traffic: TrafficKind
    snr_offset_db: float = 0.0
    dataset: LocalDataset | None = None
    local_model: np.ndarray | None = None
    tx_power: float = 0.0
    bandwidth: float = 0.0
    energy_spent: float = 0.0
    epsilon_spent: float = 0.0
    alive: bool = True


@dataclass
class AggregatorState:
    id: int
    position: tuple[float, float]
    member_ids: list[int] = field(default_factory=list)
    alive: bool = True


def aggregator_anchors(area_m: float, m: int) -> list[tuple[float, float]]:
    """Centers of the first ``m`` cells (row-major) of a ceil(sqrt m)-wide grid."""
    cols = math.ceil(math.sqrt(m))
    rows = math.ceil(m / cols)
    cw, ch = area_m / cols, area_m / rows
    return [((k % cols + 0.5) * cw, (k // cols + 0.5) * ch) for k in range(m)]


def nearest_anchor(pos, anchors, candidates) -> int:
    x, y = pos
    return min(candidates, key=lambda a: (math.hypot(anchors[a][0] - x, anchors[a][1] - y), a))


def build_topology(cfg: ScenarioConfig, rng: np.random.Generator):
    """Place devices uniformly and attach each to the nearest aggregator anchor."""
    anchors = aggregator_anchors(cfg.area_m, cfg.n_aggregators)
    aggs = [AggregatorState(a, anchors[a]) for a in range(cfg.n_aggregators)]
    devices = []
    for i in range(cfg.n_devices):
        pos = (float(rng.uniform(0.0, cfg.area_m)), float(rng.uniform(0.0, cfg.area_m)))
        mobile = bool(rng.random() < cfg.mobile_fraction)
        if mobile:
            waypoint = (float(rng.uniform(0.0, cfg.area_m)), float(rng.uniform(0.0, cfg.area_m)))
            speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        else:
            waypoint, speed = pos, 0.0
        kind = assign_traffic_kind(cfg.traffic_mix, rng)
        offset = float(rng.uniform(-SNR_OFFSET_DB, SNR_OFFSET_DB))
        cluster = nearest_anchor(pos, anchors, range(cfg.n_aggregators))
        devices.append(DeviceState(
            id=i, cluster_id=cluster, position=pos, waypoint=waypoint, speed=speed,
            mobile=mobile, traffic=kind, snr_offset_db=offset,
            tx_power=cfg.power_max, bandwidth=cfg.bandwidth_max,
        ))
        aggs[cluster].member_ids.append(i)
    return devices, aggs


# --------------------------------------------------------------------------
# Datasets

def observation_from_features(snr_db: float, interference_dbm: float, cfg: ScenarioConfig) -> ChannelObservation:
    """Rebuild the link state implied by a feature row (SNR measured at ``P_max``)."""
    noise = KT_W_PER_HZ * cfg.bandwidth_max
    interference = dbm_to_w(interference_dbm)
    gain = 10.0 ** (snr_db / 10.0) * (noise + interference) / cfg.power_max
    return ChannelObservation(gain, noise, interference, cfg.power_max)


def oracle_labels(features: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    n_last = len(MCS_TABLE) - 1
    out = np.empty((len(features), 2))
    for r, (snr, i_dbm, _load, _speed) in enumerate(features):
        obs = observation_from_features(float(snr), float(i_dbm), cfg)
        mcs = oracle_mcs(obs, MCS_TABLE)
        out[r, 0] = mcs.index / n_last
        out[r, 1] = oracle_power(obs, cfg.power_max, mcs) / cfg.power_max
    return out


def _speed_draws(mobile: bool, cfg: ScenarioConfig, rng, n: int) -> np.ndarray:
    if not mobile:
        return np.zeros(n)
    return rng.uniform(cfg.speed_min, cfg.speed_max, size=n)


def synth_dataset(cfg: ScenarioConfig, device: DeviceState, rng: np.random.Generator, n_rows: int) -> LocalDataset:
    """Synthetic link rows for one device, labelled by the MCS/power oracles."""
    if n_rows < 1:
        raise ValueError("n_rows must be >= 1")
    lo, hi = SNR_RANGE_DB
    snr = rng.uniform(lo, hi, size=n_rows) + device.snr_offset_db
    interf = rng.uniform(*INTERFERENCE_RANGE_DBM, size=n_rows)
    load = rng.uniform(0.0, 1.0, size=n_rows)
    speed = _speed_draws(device.mobile, cfg, rng, n_rows)
    X = np.column_stack([snr, interf, load, speed])
    return LocalDataset(X, oracle_labels(X, cfg))


def validation_set(cfg: ScenarioConfig, n_rows: int | None = None) -> LocalDataset:
    """Held-out rows spanning every device's offset range, from a reserved stream."""
    n = cfg.validation_rows if n_rows is None else n_rows
    rng = streams.stream(cfg.seed, streams.VALIDATION)
    lo, hi = SNR_RANGE_DB
    snr = rng.uniform(lo, hi, size=n) + rng.uniform(-SNR_OFFSET_DB, SNR_OFFSET_DB, size=n)
    interf = rng.uniform(*INTERFERENCE_RANGE_DBM, size=n)
    load = rng.uniform(0.0, 1.0, size=n)
    mobile = rng.random(n) < cfg.mobile_fraction
    speed = np.where(mobile, rng.uniform(cfg.speed_min, cfg.speed_max, size=n), 0.0)
    X = np.column_stack([snr, interf, load, speed])
    return LocalDataset(X, oracle_labels(X, cfg))


def attach_datasets(cfg: ScenarioConfig, devices) -> None:
    for d in devices:
        d.dataset = synth_dataset(cfg, d, streams.stream(cfg.seed, streams.DATASET, d.id), cfg.dataset_rows)
