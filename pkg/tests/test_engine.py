import math

import numpy as np
import pytest

from aitp_sim import fl_core
from aitp_sim.engine import (
    MSG_MODEL_UPDATE, MSG_RAW_DATASET, init_state, inject_failure, run_round, run_simulation,
    summarize,
)
from aitp_sim.errors import UnknownIdError
from aitp_sim.output import metrics_csv
from aitp_sim.scenario import Mode, ScenarioConfig, parse_failure_plan

SMALL = dict(n_devices=20, n_aggregators=4, rounds=6, validation_rows=300)


def _cfg(**kw):
    return ScenarioConfig(**{**SMALL, **kw})


def test_nap_never_touches_model():
    state = init_state(_cfg(mode=Mode.NAP))
    for r in range(4):
        state, m = run_round(state, r)
        assert m.learning_skipped and m.aggregator_messages == {}
    assert np.array_equal(state.W, state.W0)


def test_all_devices_failed_round():
    plan = "; ".join(f"0:device:{i}" for i in range(20))
    rep = run_simulation(_cfg(failure_plan=parse_failure_plan(plan), dp_enabled=False))
    later = rep.rounds[1]
    assert later.t_network == 0.0 and later.learning_skipped and later.live_devices == 0
    assert rep.summary["robustness"] == 0.0


def test_same_seed_identical_metrics():
    a = run_simulation(_cfg())
    b = run_simulation(_cfg())
    assert metrics_csv([a]) == metrics_csv([b])


def test_seed_changes_results():
    assert metrics_csv([run_simulation(_cfg(seed=1))]) != metrics_csv([run_simulation(_cfg(seed=2))])


def test_cross_mode_fairness():
    states = {m: init_state(_cfg(mode=m)) for m in Mode}
    snaps = {}
    for mode, st in states.items():
        trace = []
        for r in range(4):
            st, _ = run_round(st, r)
            trace.append([(d.position, d.waypoint, d.speed, d.traffic) for d in st.devices])
        snaps[mode] = (trace, [d.dataset.features.tobytes() for d in st.devices])
    assert snaps[Mode.AITP] == snaps[Mode.CAIP] == snaps[Mode.NAP]


def test_aggregator_failure_rehomes_members():
    state = init_state(_cfg(n_aggregators=5, dp_enabled=False))
    orphans = list(state.aggregators[2].member_ids)
    assert orphans
    state, _ = run_round(state, 0)
    inject_failure(state, "aggregator", 2)
    state, m = run_round(state, 1)
    assert 2 not in m.aggregator_messages
    assert sum(m.aggregator_messages.values()) == 20
    assert m.live_aggregators == 4
    assert all(state.devices[i].cluster_id != 2 for i in orphans)
    members = sorted(i for a in state.aggregators if a.alive for i in a.member_ids)
    assert members == list(range(20))


def test_failed_device_is_silent():
    rep = run_simulation(_cfg(failure_plan=parse_failure_plan("1:device:3"), dp_enabled=False))
    for m in rep.rounds[2:]:
        assert 3 not in [rec.device_id for rec in m.devices]
        assert sum(m.aggregator_messages.values()) == 19


def test_unknown_failure_target():
    state = init_state(_cfg())
    with pytest.raises(UnknownIdError):
        inject_failure(state, "aggregator", 9)
    with pytest.raises(UnknownIdError):
        inject_failure(state, "device", 99)
    with pytest.raises(UnknownIdError):
        inject_failure(state, "router", 0)


def test_caip_central_failure_freezes_model_and_stops_links():
    state = init_state(_cfg(mode=Mode.CAIP))
    for r in range(3):
        state, _ = run_round(state, r)
    inject_failure(state, "aggregator", 0)
    frozen = state.W.copy()
    for r in range(3, 6):
        state, m = run_round(state, r)
        assert m.t_network == 0.0 and m.learning_skipped
    assert np.array_equal(state.W, frozen)


def test_caip_uploads_raw_and_never_spends_dp():
    rep_state = init_state(_cfg(mode=Mode.CAIP))
    rep_state, m = run_round(rep_state, 0)
    assert m.message_kinds == (MSG_RAW_DATASET,)
    assert m.aggregator_messages == {0: 20}
    assert rep_state.accountant.spent == {}
    assert m.privacy_loss == 1.0


def test_aitp_sends_only_model_updates():
    rep = run_simulation(_cfg())
    for m in rep.rounds:
        assert m.message_kinds == (MSG_MODEL_UPDATE,)


def test_aitp_privacy_loss_after_ten_rounds():
    rep = run_simulation(_cfg(rounds=10))
    assert rep.rounds[9].privacy_loss == pytest.approx(0.1)


def test_mid_round_dropout_remasks(monkeypatch):
    calls = []
    cfg = _cfg(failure_plan=parse_failure_plan("2:device:5"), dp_enabled=False)
    run_simulation(cfg, mask_audit=lambda r, a, raw, masked: calls.append((r, a, [u[0] for u in raw])))
    round2 = [c for c in calls if c[0] == 2]
    with_5 = [c for c in round2 if 5 in c[2]]
    assert len(with_5) == 1
    retry = [c for c in round2 if c[1] == with_5[0][1] and 5 not in c[2]]
    assert retry and set(retry[0][2]) == set(with_5[0][2]) - {5}


def test_zero_rounds():
    rep = run_simulation(_cfg(rounds=0))
    assert rep.rounds == []
    assert rep.summary["final_accuracy"] == rep.summary["initial_accuracy"]


def test_wall_clock_abort():
    rep = run_simulation(_cfg(rounds=50, wall_clock_limit=1e-9))
    assert rep.aborted and rep.error and len(rep.rounds) < 50


def test_summary_recomputable():
    rep = run_simulation(_cfg(failure_plan=parse_failure_plan("3:aggregator:1")))
    again = summarize(rep.rounds, rep.summary["initial_accuracy"], rep.summary["robustness"])
    assert again == rep.summary
    m = rep.rounds[2]
    assert m.t_network == math.fsum(d.throughput for d in m.devices)
    assert m.mean_latency == pytest.approx(np.mean([d.l_total for d in m.devices]), rel=1e-12)


def test_worker_count_does_not_change_results():
    a = run_simulation(_cfg(workers=1))
    b = run_simulation(_cfg(workers=4))
    assert metrics_csv([a]) == metrics_csv([b])


def test_noise_free_final_model_bit_identical():
    s1, s2 = init_state(_cfg(dp_enabled=False)), init_state(_cfg(dp_enabled=False))
    for r in range(4):
        s1, _ = run_round(s1, r)
        s2, _ = run_round(s2, r)
    assert s1.W.tobytes() == s2.W.tobytes()
    assert not np.array_equal(s1.W, s1.W0)


def test_strict_combine_shrinks_step_under_failure():
    base = _cfg(dp_enabled=False, failure_plan=parse_failure_plan("0:aggregator:1"))
    live = init_state(base)
    strict = init_state(base.replace(strict_paper_combine=True))
    for st in (live, strict):
        inject_failure(st, "aggregator", 1)
    live, _ = run_round(live, 1)
    strict, _ = run_round(strict, 1)
    step_live = live.W - live.W0
    step_strict = strict.W - strict.W0
    assert np.allclose(step_strict, step_live * 3 / 4, rtol=1e-12, atol=1e-15)


@pytest.mark.slow
def test_default_desk_run_budget():
    rep = run_simulation(ScenarioConfig())
    assert rep.wall_clock_s < 60 and len(rep.rounds) == 20
    assert all(m.energy_efficiency >= 0 for m in rep.rounds)
    assert rep.summary["final_accuracy"] >= 0


def test_energy_spent_monotone():
    state = init_state(_cfg())
    prev = [0.0] * 20
    for r in range(5):
        state, _ = run_round(state, r)
        cur = [d.energy_spent for d in state.devices]
        assert all(c >= p for c, p in zip(cur, prev))
        prev = cur
    for d in state.devices:
        assert 0 <= d.epsilon_spent <= state.cfg.dp_epsilon_max
        assert 0 < d.tx_power <= state.cfg.power_max


def test_checkpoint_of_trained_model(tmp_path):
    rep_state = init_state(_cfg(dp_enabled=False))
    rep_state, _ = run_round(rep_state, 0)
    p = tmp_path / "w.bin"
    fl_core.save_checkpoint(p, rep_state.W)
    assert np.array_equal(fl_core.load_checkpoint(p), rep_state.W)
