"""Latency, energy and efficiency formulas plus the scalarized objective.

``privacy_loss`` and ``robustness`` have no published definition; the forms
used here are documented in the run manifest (see ``METRIC_DEFINITIONS``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import DomainError, UnstableQueueError

RHO_MAX = 0.999

METRIC_DEFINITIONS = {
    "privacy_loss": (
        "mean over participating devices of epsilon_spent / epsilon_max; "
        "AITP counts DP spend, CAIP counts full exposure (1.0) from the first raw upload, "
        "NAP is 0 (no learning traffic)"
    ),
    "robustness": (
        "mean network throughput over the rounds after the first failure event "
        "divided by the same quantity in the failure-free run with the same seed"
    ),
    "latency_fl_share": (
        "per-round learning overhead (train + update transfer + aggregation, or raw "
        "upload + central compute for CAIP) divided by packets served network-wide that round"
    ),
    "energy_efficiency": "T_network * window / (sum of device energy + central server energy)",
}


def queueing_delay_mm1(lam: float, mu: float) -> float:
    """Mean M/M/1 sojourn time ``1 / (mu - lam)``."""
    if not mu > 0:
        raise DomainError(f"service rate must be positive, got {mu}")
    if lam < 0:
        raise DomainError(f"arrival rate must be non-negative, got {lam}")
    if lam >= RHO_MAX * mu:
        raise UnstableQueueError(f"utilization {lam / mu:.4f} >= {RHO_MAX}")
    return 1.0 / (mu - lam)


def transmission_latency(bits: float, throughput: float) -> float:
    if not throughput > 0:
        raise DomainError("throughput must be positive")
    return bits / throughput


def fl_latency(rounds: int, t_train: float, t_update_tx: float, t_agg: float) -> float:
    """Cumulative learning latency ``R * (t_train + t_update_tx + t_agg)``."""
    if min(rounds, t_train, t_update_tx, t_agg) < 0:
        raise DomainError("inputs must be non-negative")
    return rounds * (t_train + t_update_tx + t_agg)


def fl_round_components(c_train: float, c_agg: float, control_rate: float, epochs: int,
                        rows: int, dim: int, cluster_size: int) -> tuple[float, float, float]:
    """Per-round (train, update transfer, aggregation) times in seconds."""
    t_train = c_train * epochs * rows * dim
    t_update_tx = dim * 64 / control_rate
    t_agg = c_agg * cluster_size * dim
    return t_train, t_update_tx, t_agg


def total_latency(l_tx: float, l_proc: float, l_queue: float, l_fl_share: float) -> float:
    return l_tx + l_proc + l_queue + l_fl_share


def device_energy(power_w: float, t_tx: float, e_comp: float) -> float:
    return power_w * t_tx + e_comp


def computation_energy(c_comp: float, epochs: int, rows: int, dim: int) -> float:
    return c_comp * epochs * rows * dim


def energy_efficiency(t_network: float, energies: Sequence[float], window: float) -> float:
    """Bits delivered per joule over ``window`` seconds."""
    total = math.fsum(energies)
    if not total > 0:
        raise DomainError("total energy must be positive")
    return t_network * window / total


def objective(alpha: float, beta: float, gamma: float, l_norm: float, t_norm: float, e_norm: float) -> float:
    if min(alpha, beta, gamma) < 0 or alpha + beta + gamma == 0:
        raise DomainError("weights must be non-negative and not all zero")
    return alpha * l_norm + beta * (1.0 - t_norm) + gamma * e_norm


def privacy_loss(mode: str, spent: Sequence[float], epsilon_max: float, round_index: int | None = None) -> float:
    """Mean normalized privacy spend over participating devices (see module notes)."""
    mode = str(getattr(mode, "value", mode)).upper()
    if mode == "NAP" or not spent:
        return 0.0
    if mode == "CAIP":
        return 1.0 if round_index is None or round_index >= 0 else 0.0
    return math.fsum(s / epsilon_max for s in spent) / len(spent)


def robustness(throughput_with_failures: float, throughput_baseline: float) -> float:
    if not throughput_baseline > 0:
        raise DomainError("baseline throughput must be positive")
    return throughput_with_failures / throughput_baseline


@dataclass
class DeviceRecord:
    device_id: int
    throughput: float
    l_tx: float
    l_proc: float
    l_queue: float
    l_fl_share: float
    energy: float
    epsilon_spent: float
    outage: bool

    @property
    def l_total(self) -> float:
        return total_latency(self.l_tx, self.l_proc, self.l_queue, self.l_fl_share)


@dataclass
class RoundMetrics:
    round: int
    devices: list[DeviceRecord] = field(default_factory=list)
    t_network: float = 0.0
    mean_latency: float = 0.0
    energy_efficiency: float = 0.0
    total_energy: float = 0.0
    central_energy: float = 0.0
    privacy_loss: float = 0.0
    live_devices: int = 0
    live_aggregators: int = 0
    mcs_violations: int = 0
    learning_skipped: bool = False
    fl_round_latency: float = 0.0
    excluded_devices: int = 0
    objective: float = 0.0
    accuracy: float = float("nan")
    aggregator_messages: dict[int, int] = field(default_factory=dict)
    message_kinds: tuple[str, ...] = ()
