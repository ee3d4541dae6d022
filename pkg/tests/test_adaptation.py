import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aitp_sim import fl_core
from aitp_sim.adaptation import (
    G_FLOOR, G_MAX, TxParams, beam_gain_for, caip_round_costs, dataset_upload_bits, link_features,
    model_update_bits, nap_params, oracle_mcs, oracle_power, params_from_output, qos_level,
    select_beam, select_tx_params_aitp,
)
from aitp_sim.channel import MCS_TABLE, ChannelObservation, McsEntry, shannon_throughput
from aitp_sim.scenario import LocalDataset, ScenarioConfig, observation_from_features, validation_set


def _obs_db(snr_db, noise=1e-12):
    return ChannelObservation(10 ** (snr_db / 10) * noise, noise, 0.0, 1.0)


# -- MCS oracle --------------------------------------------------------------

def test_oracle_mcs_fallback_and_top():
    assert oracle_mcs(_obs_db(-10)).index == 0
    assert oracle_mcs(_obs_db(30)).index == 7


def test_oracle_mcs_threshold_inclusive():
    table = (McsEntry(0, 2, 0.5, -5.0), McsEntry(1, 4, 0.5, 0.0), McsEntry(2, 4, 0.6, 10.0))
    unit = ChannelObservation(1e-12, 1e-12, 0.0, 1.0)
    assert unit.snr_db == 0.0
    assert oracle_mcs(unit, table).index == 1
    ten = ChannelObservation(1e-11, 1e-12, 0.0, 1.0)
    assert ten.snr_db == 10.0
    assert oracle_mcs(ten, table).index == 2


def test_oracle_mcs_empty_table():
    with pytest.raises(ValueError):
        oracle_mcs(_obs_db(3), ())


def test_oracle_mcs_maximizes_throughput_on_grid():
    for snr in np.round(np.arange(-10.0, 35.0 + 1e-9, 0.1), 1):
        obs = _obs_db(snr)
        feasible = [e for e in MCS_TABLE if e.min_snr_db <= obs.snr_db]
        if not feasible:
            assert oracle_mcs(obs) is MCS_TABLE[0]
            continue
        best = max(feasible, key=lambda e: (shannon_throughput(1e8, 1.0, obs, e.code_rate), e.index))
        assert oracle_mcs(obs) == best


# -- power oracle ------------------------------------------------------------

def test_oracle_power_closed_form():
    obs = ChannelObservation(1e-10, 1e-12, 0.0, 1.0)
    target = McsEntry(0, 2, 0.5, 9.0)
    assert oracle_power(obs, 1.0, target) == pytest.approx(0.1, rel=1e-12)


def test_oracle_power_clamps_and_limits():
    weak = ChannelObservation(1e-20, 1e-12, 1e-12, 1.0)
    assert oracle_power(weak, 0.2, MCS_TABLE[7]) == 0.2
    strong = ChannelObservation(1e10 * 2e-12, 1e-12, 1e-12, 1.0)
    p = oracle_power(strong, 0.2, MCS_TABLE[0])
    assert 0 < p < 1e-9


def test_oracle_power_inversion_and_minimality():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        obs = ChannelObservation(10 ** rng.uniform(-14, -8), 10 ** rng.uniform(-13, -11),
                                 10 ** rng.uniform(-14, -11), 0.2)
        target = MCS_TABLE[int(rng.integers(0, 8))]
        p = oracle_power(obs, 1e9, target)
        assert obs.achieved_snr_db(p) == pytest.approx(target.min_snr_db + 1.0, abs=1e-9)
        assert obs.achieved_snr_db(p / 2) < target.min_snr_db + 1.0


def test_oracle_power_rejects_bad_pmax():
    with pytest.raises(ValueError):
        oracle_power(_obs_db(3), 0.0, MCS_TABLE[0])


# -- beams -------------------------------------------------------------------

def _grid_oracle(aoa, B):
    """Independent brute force: explicit loop over beams with wrapped distance."""
    best, best_d = None, None
    for b in range(B):
        c = -math.pi + (b + 0.5) * 2 * math.pi / B
        d = abs(math.remainder(aoa - c, 2 * math.pi))
        if best_d is None or d < best_d - 1e-15:
            best, best_d = b, d
    return best, G_MAX * max(math.cos(best_d * B / 2) ** 2, G_FLOOR)


def test_beam_at_center():
    for B in (1, 4, 8, 16):
        for b in range(B):
            c = -math.pi + (b + 0.5) * 2 * math.pi / B
            idx, g = select_beam(c, B)
            assert idx == b and g == pytest.approx(G_MAX, rel=1e-12)


def test_single_beam():
    for aoa in np.linspace(-math.pi, math.pi, 50):
        assert select_beam(aoa, 1)[0] == 0


def test_beam_midpoint_fine_grid():
    B = 8
    mid = -math.pi + 2 * math.pi / B  # between beams 0 and 1
    idx, g = select_beam(mid, B)
    assert idx in (0, 1)
    assert g == pytest.approx(_grid_oracle(mid, B)[1], rel=1e-9)
    # at half a beamwidth the cos^2 lobe reaches its null, so the floor applies
    assert g == pytest.approx(G_MAX * G_FLOOR, rel=1e-9)


def test_beam_matches_brute_force_random():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        B = int(rng.integers(1, 33))
        aoa = float(rng.uniform(-math.pi, math.pi))
        idx, g = select_beam(aoa, B)
        o_idx, o_g = _grid_oracle(aoa, B)
        assert g == pytest.approx(o_g, rel=1e-9, abs=1e-12)
        if idx != o_idx:  # only on numerical ties
            c = lambda b: -math.pi + (b + 0.5) * 2 * math.pi / B
            da = abs(math.remainder(aoa - c(idx), 2 * math.pi))
            db = abs(math.remainder(aoa - c(o_idx), 2 * math.pi))
            assert da == pytest.approx(db, abs=1e-12)


def test_fixed_beam_outside_sector_gets_floor():
    assert beam_gain_for(0, math.pi / 2, 8) == pytest.approx(G_MAX * G_FLOOR)
    c0 = -math.pi + math.pi / 8
    assert beam_gain_for(0, c0, 8) == pytest.approx(G_MAX)


def test_select_beam_rejects_empty_codebook():
    with pytest.raises(ValueError):
        select_beam(0.0, 0)


# -- learned selection -------------------------------------------------------

def test_denormalization_endpoints_and_clamps():
    mcs, p = params_from_output(np.array([0.0, 1.0]), 0.2)
    assert mcs.index == 0 and p == 0.2
    mcs, p = params_from_output(np.array([5.0, -3.0]), 0.2)
    assert mcs.index == 7 and p == pytest.approx(0.002)
    mcs, p = params_from_output(np.array([np.nan, np.nan]), 0.2)
    assert 0 <= mcs.index <= 7 and 0 < p <= 0.2


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_selection_never_invalid(a, b):
    mcs, p = params_from_output(np.array([a, b]), 0.5)
    assert mcs in MCS_TABLE and 0.005 <= p <= 0.5


def test_oracle_perfect_model_reproduces_oracle(monkeypatch):
    cfg = ScenarioConfig()
    v = validation_set(cfg, 300)
    rows = {tuple(x): y for x, y in zip(v.features, v.labels)}
    monkeypatch.setattr(fl_core, "predict", lambda w, X: np.array([rows[tuple(x)] for x in X]))
    for x in v.features:
        obs = observation_from_features(x[0], x[1], cfg)
        tx = select_tx_params_aitp(np.zeros(fl_core.PARAM_DIM), obs, x, (2, 7.5), cfg.power_max)
        want = oracle_mcs(obs)
        assert tx.mcs == want
        assert tx.power == pytest.approx(max(oracle_power(obs, cfg.power_max, want), 0.01 * cfg.power_max),
                                         rel=1e-12)
        assert (tx.beam_index, tx.beam_gain) == (2, 7.5)


def test_link_features_layout_and_clamp():
    obs = ChannelObservation(1e-9, 1e-12, 0.0, 0.2)
    f = link_features(obs, 0.25, 3.0)
    assert f[1] == -110.0 and f[2] == 0.25 and f[3] == 3.0
    assert f[0] == pytest.approx(obs.snr_db)
    loud = ChannelObservation(1e-9, 1e-12, 1.0, 0.2)
    assert link_features(loud, 0, 0)[1] == -80.0


def test_qos_levels():
    assert qos_level(1e-3) == 0.0
    assert qos_level(1.0) == 1.0
    assert qos_level(20e-3) == pytest.approx(math.log10(20) / 3)


# -- NAP / CAIP --------------------------------------------------------------

def test_nap_constant():
    a, b = nap_params(0.2), nap_params(0.2)
    assert a == b == TxParams(MCS_TABLE[3], 0.1, 0, 1.0)


class _Dev:
    def __init__(self, i, rows, alive=True):
        self.id, self.alive = i, alive
        self.dataset = LocalDataset(np.zeros((rows, 4)), np.zeros((rows, 2)))


def test_caip_costs():
    devs = [_Dev(i, 64) for i in range(10)]
    up, t = caip_round_costs(devs, 1e-6)
    assert set(up.values()) == {24_576}
    _, t2 = caip_round_costs(devs + [_Dev(i + 10, 64) for i in range(10)], 1e-6)
    assert t2 == pytest.approx(2 * t)
    _, t3 = caip_round_costs(devs + [_Dev(99, 64, alive=False)], 1e-6)
    assert t3 == t


def test_update_smaller_than_raw_upload():
    assert model_update_bits() == fl_core.PARAM_DIM * 64 == 7296
    assert model_update_bits() < dataset_upload_bits(64)
