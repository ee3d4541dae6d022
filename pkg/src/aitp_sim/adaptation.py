"""Transmission parameter selection for the three protocol modes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import MCS_TABLE, ChannelObservation, McsEntry
from . import fl_core

G_MAX = 10.0  # 10 dBi main lobe
G_FLOOR = 0.01
POWER_MARGIN_DB = 1.0
MIN_POWER_FRACTION = 0.01
NAP_MCS_INDEX = 3
FLOAT_BYTES = 8


@dataclass(frozen=True)
class TxParams:
    mcs: McsEntry
    power: float
    beam_index: int
    beam_gain: float


def oracle_mcs(obs: ChannelObservation, table: Sequence[McsEntry] = MCS_TABLE) -> McsEntry:
    """Highest entry whose threshold the observed SNR meets; entry 0 if none does."""
    if not table:
        raise ValueError("empty MCS table")
    snr = obs.snr_db
    best = table[0]
    for entry in table:
        if entry.min_snr_db <= snr:
            best = entry
    return best


def oracle_power(obs: ChannelObservation, p_max: float, target_mcs: McsEntry) -> float:
    """Smallest power putting the SNR 1 dB above ``target_mcs``'s threshold, capped at ``p_max``."""
    if not p_max > 0:
        raise ValueError(f"p_max must be positive, got {p_max}")
    needed = (obs.noise_w + obs.interference_w) / obs.gain * 10.0 ** ((target_mcs.min_snr_db + POWER_MARGIN_DB) / 10.0)
    return min(needed, p_max)


def beam_centers(codebook_size: int) -> np.ndarray:
    b = np.arange(codebook_size)
    return -math.pi + (b + 0.5) * 2.0 * math.pi / codebook_size


def angular_distance(a, b):
    """Absolute wrapped difference in ``[0, pi]``."""
    d = np.mod(np.asarray(a) - np.asarray(b) + math.pi, 2.0 * math.pi) - math.pi
    return np.abs(d)


def beam_pattern(offset_rad: float, codebook_size: int) -> float:
    """Gain of a beam ``offset_rad`` away from its center."""
    return G_MAX * max(math.cos(offset_rad * codebook_size / 2.0) ** 2, G_FLOOR)


def select_beam(aoa_rad: float, codebook_size: int) -> tuple[int, float]:
    """Codebook beam closest to ``aoa_rad`` (ties go to the lower index) and its gain."""
    if codebook_size < 1:
        raise ValueError("codebook needs at least one beam")
    dist = angular_distance(aoa_rad, beam_centers(codebook_size))
    b = int(np.argmin(dist))
    return b, beam_pattern(float(dist[b]), codebook_size)


def beam_gain_for(beam_index: int, aoa_rad: float, codebook_size: int) -> float:
    """Gain delivered by a fixed beam when the device sits at ``aoa_rad``."""
    center = beam_centers(codebook_size)[beam_index]
    off = float(angular_distance(aoa_rad, center))
    if off > math.pi / codebook_size:
        # outside the beam's sector the far sidelobe floor applies
        return G_MAX * G_FLOOR
    return beam_pattern(off, codebook_size)


def qos_level(latency_budget_s: float) -> float:
    """Map a latency budget onto [0, 1]: 1 ms -> 0, 1 s -> 1 (log scale)."""
    return float(min(1.0, max(0.0, math.log10(latency_budget_s / 1e-3) / 3.0)))


INTERFERENCE_DBM_RANGE = (-110.0, -80.0)


def link_features(obs: ChannelObservation, qos: float, speed_mps: float) -> np.ndarray:
    """Model input row ``[snr_db, interference_db, load, speed_mps]``.

    The ``load`` slot carries the traffic-class QoS level. Interference is
    clamped to the measurement range so an interference-free link stays finite.
    """
    lo, hi = INTERFERENCE_DBM_RANGE
    i_dbm = obs.interference_dbm
    i_dbm = lo if not math.isfinite(i_dbm) else min(hi, max(lo, i_dbm))
    return np.array([obs.snr_db, i_dbm, qos, speed_mps], dtype=float)


def params_from_output(y: np.ndarray, p_max: float, table: Sequence[McsEntry] = MCS_TABLE) -> tuple[McsEntry, float]:
    idx = int(fl_core.mcs_index_from_output(np.array([y[0]]), len(table))[0])
    frac = float(y[1])
    if not math.isfinite(frac):
        frac = 1.0
    frac = min(1.0, max(MIN_POWER_FRACTION, frac))
    return table[idx], frac * p_max


def select_tx_params_aitp(W: np.ndarray, obs: ChannelObservation, features: np.ndarray,
                          beam: tuple[int, float], p_max: float,
                          table: Sequence[McsEntry] = MCS_TABLE) -> TxParams:
    """Run the learned model on one device's features and denormalize its outputs."""
    y = fl_core.predict(W, features[None, :])[0]
    mcs, power = params_from_output(y, p_max, table)
    return TxParams(mcs, power, beam[0], beam[1])


def nap_params(p_max: float, table: Sequence[McsEntry] = MCS_TABLE) -> TxParams:
    """Fixed parameters: middle MCS entry, half power, no beamforming."""
    return TxParams(table[NAP_MCS_INDEX], 0.5 * p_max, 0, 1.0)


def dataset_upload_bits(rows: int, feature_dim: int = fl_core.FEATURE_DIM,
                        label_dim: int = fl_core.LABEL_DIM) -> int:
    return rows * (feature_dim + label_dim) * FLOAT_BYTES * 8


def model_update_bits(dim: int = fl_core.PARAM_DIM) -> int:
    return dim * FLOAT_BYTES * 8


def caip_round_costs(devices, c_central_s: float) -> tuple[dict[int, int], float]:
    """Raw-data upload bits per live device and the central server's compute time."""
    live = [d for d in devices if d.alive]
    upload = {d.id: dataset_upload_bits(d.dataset.rows) for d in live}
    compute = c_central_s * sum(d.dataset.rows for d in live)
    return upload, compute
