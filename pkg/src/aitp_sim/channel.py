"""Link model: path loss, SINR observation, MCS table and Shannon throughput.

Path loss is log-distance, ``PL(d) = PL0 + 10 n log10(d / 1 m)``:

==============  =====  ====
band            PL0    n
==============  =====  ====
28 GHz mmWave   61.4   2.0
140 GHz THz     75.4   2.2
==============  =====  ====

The Rayleigh model reuses the 28 GHz deterministic part and scales the
linear gain by an exponential(1) power-fading draw.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError

KT_W_PER_HZ = 4.0e-21  # thermal noise density at 290 K
CROSS_CLUSTER_FRACTION = 0.05


class ChannelModel(str, Enum):
    MMWAVE_28GHZ = "MMWAVE_28GHZ"
    THZ_140GHZ = "THZ_140GHZ"
    RAYLEIGH = "RAYLEIGH"


BAND_CONSTANTS = {
    ChannelModel.MMWAVE_28GHZ: (61.4, 2.0),
    ChannelModel.THZ_140GHZ: (75.4, 2.2),
}


@dataclass(frozen=True)
class McsEntry:
    index: int
    modulation_order: int  # bits per symbol
    code_rate: float
    min_snr_db: float

    @property
    def spectral_efficiency(self) -> float:
        return self.modulation_order * self.code_rate


# QPSK 1/2 ... 256QAM 3/4. Code rates are non-decreasing so that the highest
# feasible entry is also the one with the largest Shannon throughput.
MCS_TABLE: tuple[McsEntry, ...] = (
    McsEntry(0, 2, 0.50, -1.0),
    McsEntry(1, 4, 0.50, 3.0),
    McsEntry(2, 4, 0.60, 7.0),
    McsEntry(3, 6, 0.60, 11.0),
    McsEntry(4, 6, 0.65, 15.0),
    McsEntry(5, 6, 0.70, 19.0),
    McsEntry(6, 8, 0.70, 23.0),
    McsEntry(7, 8, 0.75, 27.0),
)


def check_mcs_table(table: Sequence[McsEntry]) -> None:
    """Raise ``ValueError`` unless ``table`` satisfies the ordering invariants."""
    if not table:
        raise ValueError("MCS table is empty")
    for pos, e in enumerate(table):
        if e.index != pos:
            raise ValueError(f"entry {pos} carries index {e.index}")
        if e.modulation_order not in (2, 4, 6, 8):
            raise ValueError(f"entry {pos}: modulation order {e.modulation_order}")
        if not 0.0 < e.code_rate <= 1.0:
            raise ValueError(f"entry {pos}: code rate {e.code_rate}")
    for a, b in zip(table, table[1:]):
        if not b.min_snr_db > a.min_snr_db:
            raise ValueError(f"thresholds not increasing at entry {b.index}")
        if not b.spectral_efficiency > a.spectral_efficiency:
            raise ValueError(f"spectral efficiency not increasing at entry {b.index}")


def mcs_table_csv(table: Sequence[McsEntry] = MCS_TABLE) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "modulation_order", "code_rate", "min_snr_db"])
    for e in table:
        w.writerow([e.index, e.modulation_order, repr(e.code_rate), repr(e.min_snr_db)])
    return buf.getvalue()


def read_mcs_csv(text: str) -> tuple[McsEntry, ...]:
    rows = csv.DictReader(io.StringIO(text))
    table = tuple(
        McsEntry(
            int(r["index"]),
            int(r["modulation_order"]),
            float(r["code_rate"]),
            float(r["min_snr_db"]),
        )
        for r in rows
    )
    check_mcs_table(table)
    return table


def cqi_from_snr(snr_db: float) -> int:
    """Quantize SNR to a 4-bit CQI: ``clamp(floor((snr + 6) / 2.5), 0, 15)``."""
    if math.isnan(snr_db):
        return 0
    if math.isinf(snr_db):
        return 15 if snr_db > 0 else 0
    return int(min(15, max(0, math.floor((snr_db + 6.0) / 2.5))))


def to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


def from_db(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def dbm_to_w(x_dbm: float) -> float:
    return 10.0 ** ((x_dbm - 30.0) / 10.0)


def w_to_dbm(x_w: float) -> float:
    return to_db(x_w) + 30.0


@dataclass(frozen=True)
class ChannelObservation:
    """Link state of one device towards its serving point.

    ``snr_db`` and ``cqi`` are evaluated at ``ref_power_w``, the sounding
    power (``P_max`` in the engine), so they describe what the link can
    support rather than what the current power setting achieves.
    """

    gain: float
    noise_w: float
    interference_w: float
    ref_power_w: float

    def __post_init__(self):
        if not self.gain > 0:
            raise DomainError(f"channel gain must be positive, got {self.gain}")
        if not self.noise_w > 0:
            raise DomainError(f"noise power must be positive, got {self.noise_w}")
        if self.interference_w < 0:
            raise DomainError(f"interference must be non-negative, got {self.interference_w}")

    def sinr(self, power_w: float | None = None) -> float:
        p = self.ref_power_w if power_w is None else power_w
        return p * self.gain / (self.noise_w + self.interference_w)

    def achieved_snr_db(self, power_w: float) -> float:
        return to_db(self.sinr(power_w))

    @property
    def snr_db(self) -> float:
        return to_db(self.sinr())

    @property
    def cqi(self) -> int:
        return cqi_from_snr(self.snr_db)

    @property
    def interference_dbm(self) -> float:
        return w_to_dbm(self.interference_w)


def path_loss_db(model: ChannelModel | str, distance_m: float, rng: np.random.Generator | None = None) -> float:
    """Path loss in dB at ``distance_m``; Rayleigh adds one fading draw from ``rng``."""
    model = ChannelModel(model)
    if not distance_m > 0:
        raise DomainError(f"distance must be positive, got {distance_m}")
    base = ChannelModel.MMWAVE_28GHZ if model is ChannelModel.RAYLEIGH else model
    pl0, n = BAND_CONSTANTS[base]
    pl = pl0 + 10.0 * n * math.log10(distance_m)
    if model is ChannelModel.RAYLEIGH:
        if rng is None:
            raise ValueError("Rayleigh path loss needs a generator")
        h = rng.exponential(1.0)
        # exponential(1) can return exactly 0.0 with vanishing probability
        h = max(h, 1e-300)
        pl -= 10.0 * math.log10(h)
    return pl


def path_gain(model: ChannelModel | str, distance_m: float, rng: np.random.Generator | None = None) -> float:
    return 10.0 ** (-path_loss_db(model, distance_m, rng) / 10.0)


def cross_cluster_interference(
    anchors: Sequence[tuple[float, float]],
    serving: int,
    live: Iterable[int],
    ref_power_w: float,
    model: ChannelModel | str = ChannelModel.MMWAVE_28GHZ,
) -> float:
    """Interference at aggregator ``serving`` from the other live clusters.

    Each other cluster contributes ``0.05`` of the power a transmitter at its
    anchor would deliver to ``serving``. The deterministic band loss is used
    even under Rayleigh so the term does not consume fading draws.
    """
    model = ChannelModel(model)
    base = ChannelModel.MMWAVE_28GHZ if model is ChannelModel.RAYLEIGH else model
    sx, sy = anchors[serving]
    total = 0.0
    for a in sorted(live):
        if a == serving:
            continue
        ax, ay = anchors[a]
        d = max(math.hypot(ax - sx, ay - sy), 1.0)
        total += CROSS_CLUSTER_FRACTION * ref_power_w * path_gain(base, d)
    return total


def observe(
    device,
    distance_m: float,
    model: ChannelModel | str,
    rng: np.random.Generator | None,
    *,
    beam_gain: float = 1.0,
    interference_w: float = 0.0,
    ref_power_w: float | None = None,
) -> ChannelObservation:
    """Observe ``device``'s link to a serving point ``distance_m`` away.

    Noise is ``kT * B_i`` over the device's allocated bandwidth. Distances
    under 1 m are clamped to the reference distance.
    """
    d = max(float(distance_m), 1.0)
    g = path_gain(model, d, rng) * beam_gain
    p = device.tx_power if ref_power_w is None else ref_power_w
    return ChannelObservation(
        gain=g,
        noise_w=KT_W_PER_HZ * device.bandwidth,
        interference_w=interference_w,
        ref_power_w=p,
    )


def shannon_throughput(B_o: float, P_o: float, obs: ChannelObservation, C_o: float) -> float:
    """``B_o * log2(1 + P_o G_o / (N + I)) * C_o`` in bits/s."""
    if not B_o > 0:
        raise DomainError(f"bandwidth must be positive, got {B_o}")
    if not 0.0 < C_o <= 1.0:
        raise DomainError(f"code rate must lie in (0, 1], got {C_o}")
    if P_o < 0:
        raise DomainError(f"power must be non-negative, got {P_o}")
    return B_o * math.log2(1.0 + P_o * obs.gain / (obs.noise_w + obs.interference_w)) * C_o


def network_throughput(per_device: Iterable[float]) -> float:
    """Correctly rounded sum of per-device throughputs (0 for no devices)."""
    return math.fsum(per_device)
