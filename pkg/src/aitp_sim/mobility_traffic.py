"""Random Waypoint mobility (no pause time) and per-class Poisson traffic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class TrafficKind(str, Enum):
    EMBB = "eMBB"
    URLLC = "URLLC"
    MMTC = "mMTC"


@dataclass(frozen=True)
class TrafficClass:
    kind: TrafficKind
    arrival_rate: float  # packets/s
    packet_bits: int
    latency_budget: float  # s


TRAFFIC_CLASSES = {
    TrafficKind.EMBB: TrafficClass(TrafficKind.EMBB, 50.0, 12_000, 20e-3),
    TrafficKind.URLLC: TrafficClass(TrafficKind.URLLC, 200.0, 256, 1e-3),
    TrafficKind.MMTC: TrafficClass(TrafficKind.MMTC, 1.0, 256, 1.0),
}

KIND_ORDER = (TrafficKind.EMBB, TrafficKind.URLLC, TrafficKind.MMTC)


def assign_traffic_kind(mix, rng: np.random.Generator) -> TrafficKind:
    """Draw a class from ``(eMBB, URLLC, mMTC)`` fractions."""
    u = rng.random()
    acc = 0.0
    for kind, frac in zip(KIND_ORDER, mix):
        acc += frac
        if u < acc and frac > 0:
            return kind
    # u landed in the rounding gap above the cumulative sum
    for kind, frac in reversed(list(zip(KIND_ORDER, mix))):
        if frac > 0:
            return kind
    raise ValueError("traffic mix has no positive fraction")


def random_waypoint_step(device, dt: float, rng: np.random.Generator, area_m: float,
                         speed_range: tuple[float, float]):
    """Move ``device`` toward its waypoint for ``dt`` seconds (in place; returns it).

    When the waypoint is reachable within ``speed * dt`` the device lands on
    it and draws a fresh waypoint and speed. Static devices never move.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not device.mobile or device.speed <= 0:
        return device
    x, y = device.position
    wx, wy = device.waypoint
    dist = math.hypot(wx - x, wy - y)
    step = device.speed * dt
    if dist <= step:
        device.position = (wx, wy)
        device.waypoint = (float(rng.uniform(0.0, area_m)), float(rng.uniform(0.0, area_m)))
        device.speed = float(rng.uniform(*speed_range))
    else:
        f = step / dist
        nx = min(area_m, max(0.0, x + (wx - x) * f))
        ny = min(area_m, max(0.0, y + (wy - y) * f))
        device.position = (nx, ny)
    return device


def traffic_for(device, dt: float, rng: np.random.Generator) -> tuple[float, int]:
    """Arrival rate of the device's class and the bits offered in a ``dt`` window."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    cls = TRAFFIC_CLASSES[device.traffic]
    packets = int(rng.poisson(cls.arrival_rate * dt))
    return cls.arrival_rate, packets * cls.packet_bits
