"""Round-synchronous simulation loop for the AITP, CAIP and NAP modes.

One round is one ``dt`` traffic window. Each round runs mobility, channel
observation, mode-specific parameter selection, traffic/latency/energy
accounting, the learning step, scheduled failures and metrics assembly.

Link decoding: a link whose achieved SNR falls more than ``MCS_TOLERANCE_DB``
below the threshold of its selected MCS entry is in outage for the window.
It delivers nothing, keeps retransmitting for the whole window, and its
packets see the latency cap.

CAIP places the learning plane on aggregator 0. The central server decides
parameters from the observations uploaded in the previous round, so its
decisions are one round stale. Losing the server stops every link.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fl_core, rng as streams
from .adaptation import (
    TxParams, beam_gain_for, link_features, model_update_bits, nap_params, qos_level,
    select_beam, select_tx_params_aitp, caip_round_costs,
)
from .channel import (
    MCS_TABLE, ChannelObservation, cross_cluster_interference,
    network_throughput, observe, shannon_throughput,
)
from .errors import DropoutError, NoAggregatorError, UnknownIdError, UnstableQueueError
from .metrics import (
    DeviceRecord, RoundMetrics, computation_energy, device_energy, energy_efficiency,
    fl_round_components, objective, privacy_loss, queueing_delay_mm1,
)
from .mobility_traffic import TRAFFIC_CLASSES, random_waypoint_step, traffic_for
from .scenario import (
    AggregatorState, Mode, ScenarioConfig, aggregator_anchors, attach_datasets,
    build_topology, nearest_anchor, validation_set,
)

log = logging.getLogger(__name__)

MCS_TOLERANCE_DB = 3.0
CENTRAL_ID = 0
CENTRAL_STREAM_KEY = 2 ** 32  # training stream key for the CAIP server, outside device ids
MSG_MODEL_UPDATE = "model_update"
MSG_RAW_DATASET = "raw_dataset"


@dataclass
class StaleReport:
    """What the CAIP server knows about a device: last round's upload."""

    obs: ChannelObservation
    features: np.ndarray
    aoa: float


@dataclass
class SimulationState:
    cfg: ScenarioConfig
    devices: list
    aggregators: list[AggregatorState]
    anchors: list[tuple[float, float]]
    W: np.ndarray
    W0: np.ndarray
    accountant: fl_core.PrivacyAccountant
    validation: object
    central_alive: bool = True
    caip_reports: dict[int, StaleReport] = field(default_factory=dict)
    caip_uploaded: bool = False
    round: int = 0
    mask_audit: object = None  # harness hook: fn(round, cluster, raw_updates, masked)

    @property
    def mode(self) -> Mode:
        return self.cfg.mode

    def live_aggregator_ids(self) -> list[int]:
        return [a.id for a in self.aggregators if a.alive]


@dataclass
class SimulationReport:
    config: dict
    mode: str
    n_devices: int
    seed: int
    rounds: list[RoundMetrics]
    summary: dict
    wall_clock_s: float
    aborted: bool = False
    error: str | None = None


def init_state(cfg: ScenarioConfig) -> SimulationState:
    devices, aggs = build_topology(cfg, streams.stream(cfg.seed, streams.TOPOLOGY))
    attach_datasets(cfg, devices)
    W0 = fl_core.init_params(streams.stream(cfg.seed, streams.INIT))
    return SimulationState(
        cfg=cfg,
        devices=devices,
        aggregators=aggs,
        anchors=aggregator_anchors(cfg.area_m, cfg.n_aggregators),
        W=W0.copy(),
        W0=W0,
        accountant=fl_core.PrivacyAccountant(cfg.dp_epsilon_max),
        validation=validation_set(cfg),
    )


# --------------------------------------------------------------------------
# Failures

def inject_failure(state: SimulationState, kind: str, target: int) -> SimulationState:
    """Mark a device or aggregator failed. Orphans are re-homed at the next round."""
    if kind == "device":
        if not 0 <= target < len(state.devices):
            raise UnknownIdError(f"no device {target}")
        state.devices[target].alive = False
    elif kind == "aggregator":
        if not 0 <= target < len(state.aggregators):
            raise UnknownIdError(f"no aggregator {target}")
        state.aggregators[target].alive = False
        if state.mode is Mode.CAIP and target == CENTRAL_ID:
            state.central_alive = False
    else:
        raise UnknownIdError(f"unknown failure kind {kind!r}")
    return state


def _rehome_orphans(state: SimulationState) -> None:
    live = state.live_aggregator_ids()
    for a in state.aggregators:
        a.member_ids = []
    for d in state.devices:
        if not live:
            break
        if not state.aggregators[d.cluster_id].alive:
            d.cluster_id = nearest_anchor(d.position, state.anchors, live)
        state.aggregators[d.cluster_id].member_ids.append(d.id)


# --------------------------------------------------------------------------
# Link evaluation

@dataclass
class _Link:
    device: object
    obs: ChannelObservation  # at P_max, with the applied beam gain
    params: TxParams | None
    features: np.ndarray | None
    aoa: float
    base_gain: float  # path gain without beamforming


def _observe_links(state: SimulationState, r: int) -> list[_Link]:
    cfg = state.cfg
    live = state.live_aggregator_ids()
    interference = {a: cross_cluster_interference(state.anchors, a, live, cfg.power_max, cfg.channel_model)
                    for a in live}
    links = []
    for d in state.devices:
        if not d.alive or not live:
            continue
        ax, ay = state.anchors[d.cluster_id]
        x, y = d.position
        dist = max(math.hypot(x - ax, y - ay), 1.0)
        aoa = math.atan2(y - ay, x - ax)
        obs = observe(d, dist, cfg.channel_model, streams.stream(cfg.seed, streams.FADING, d.id, r),
                      interference_w=interference[d.cluster_id], ref_power_w=cfg.power_max)
        links.append(_Link(d, obs, None, None, aoa, obs.gain))
    return links


def _with_gain(obs: ChannelObservation, base_gain: float, beam_gain: float) -> ChannelObservation:
    return ChannelObservation(base_gain * beam_gain, obs.noise_w, obs.interference_w, obs.ref_power_w)


def _select(state: SimulationState, links: list[_Link]) -> None:
    cfg = state.cfg
    nap = nap_params(cfg.power_max, MCS_TABLE)
    for link in links:
        d = link.device
        qos = qos_level(TRAFFIC_CLASSES[d.traffic].latency_budget)
        if state.mode is Mode.NAP:
            link.obs = _with_gain(link.obs, link.base_gain, nap.beam_gain)
            link.params = nap
        elif state.mode is Mode.AITP:
            beam = select_beam(link.aoa, cfg.codebook_size)
            link.obs = _with_gain(link.obs, link.base_gain, beam[1])
            link.features = link_features(link.obs, qos, d.speed)
            link.params = select_tx_params_aitp(state.W, link.obs, link.features, beam, cfg.power_max, MCS_TABLE)
        else:
            beam = select_beam(link.aoa, cfg.codebook_size)
            sounded = _with_gain(link.obs, link.base_gain, beam[1])
            link.features = link_features(sounded, qos, d.speed)
            stale = state.caip_reports.get(d.id)
            if not state.central_alive:
                link.params = None
                link.obs = sounded
            elif stale is None:
                link.obs = _with_gain(link.obs, link.base_gain, nap.beam_gain)
                link.params = nap
            else:
                sb = select_beam(stale.aoa, cfg.codebook_size)
                p = select_tx_params_aitp(state.W, stale.obs, stale.features, sb, cfg.power_max, MCS_TABLE)
                gain_now = beam_gain_for(sb[0], link.aoa, cfg.codebook_size)
                link.obs = _with_gain(link.obs, link.base_gain, gain_now)
                link.params = p
            # uploaded for the next round's decisions
            state.caip_reports[d.id] = StaleReport(sounded, link.features, link.aoa)


# --------------------------------------------------------------------------
# Learning

def _local_update(state: SimulationState, device, r: int) -> np.ndarray:
    cfg = state.cfg
    dw = fl_core.local_train(state.W, device.dataset, cfg.local_epochs, cfg.learning_rate,
                             cfg.batch_size, streams.stream(cfg.seed, streams.TRAINING, device.id, r))
    return fl_core.add_dp_noise(dw, cfg.epsilon_round_effective, cfg.dp_clip,
                                streams.stream(cfg.seed, streams.DP_NOISE, device.id, r))


def _participants(state: SimulationState, r: int) -> dict[int, list]:
    cfg = state.cfg
    by_cluster = {}
    for a in state.aggregators:
        if not a.alive:
            continue
        members = [state.devices[i] for i in sorted(a.member_ids)
                   if state.devices[i].alive and state.accountant.can_participate(i)]
        if cfg.participation_fraction < 1.0 and members:
            k = max(1, round(cfg.participation_fraction * len(members)))
            pick = streams.stream(cfg.seed, streams.SELECTION, r, a.id).choice(len(members), size=k, replace=False)
            members = [members[j] for j in sorted(pick)]
        by_cluster[a.id] = members
    return by_cluster


def _aggregate_cluster(state: SimulationState, r: int, a_id: int, updates, alive_after) -> np.ndarray | None:
    masked = fl_core.mask_updates(updates, streams.stream(state.cfg.seed, streams.MASKS, r, a_id, 0))
    if state.mask_audit is not None:
        state.mask_audit(r, a_id, updates, masked)
    delivered = [m for m in masked if m.device_id in alive_after]
    attempt = 0
    while True:
        if not delivered:
            return None
        try:
            delta, _ = fl_core.secure_aggregate(delivered)
            return delta
        except DropoutError as exc:
            attempt += 1
            log.debug("round %d cluster %d: re-masking without %s", r, a_id, sorted(exc.device_ids))
            survivors = [u for u in updates if u[0] in alive_after]
            if not survivors:
                return None
            masked = fl_core.mask_updates(survivors, streams.stream(state.cfg.seed, streams.MASKS, r, a_id, attempt))
            if state.mask_audit is not None:
                state.mask_audit(r, a_id, survivors, masked)
            updates = survivors
            delivered = masked


def _learn_aitp(state: SimulationState, r: int, failures, pool) -> tuple[bool, dict[int, int], list[int]]:
    cfg = state.cfg
    clusters = _participants(state, r)
    jobs = []
    for a_id in sorted(clusters):
        for d in clusters[a_id]:
            if cfg.dp_enabled and not fl_core.spend_privacy(state.accountant, d.id, cfg.dp_epsilon_round):
                continue
            d.epsilon_spent = state.accountant.epsilon_spent(d.id)
            jobs.append((a_id, d))
    if pool is not None:
        deltas = list(pool.map(lambda job: _local_update(state, job[1], r), jobs))
    else:
        deltas = [_local_update(state, d, r) for _, d in jobs]
    per_cluster: dict[int, list] = {}
    for (a_id, d), dw in zip(jobs, deltas):
        per_cluster.setdefault(a_id, []).append((d.id, dw, float(d.dataset.rows)))
    messages = {a_id: len(u) for a_id, u in per_cluster.items()}
    participants = [d.id for _, d in jobs]

    _apply_failures(state, failures)

    alive_after = {d.id for d in state.devices if d.alive}
    cluster_deltas = []
    for a_id in sorted(per_cluster):
        if not state.aggregators[a_id].alive:
            continue
        delta = _aggregate_cluster(state, r, a_id, per_cluster[a_id], alive_after)
        if delta is not None:
            cluster_deltas.append(delta)
    try:
        divisor = cfg.n_aggregators if cfg.strict_paper_combine else None
        state.W = fl_core.global_combine(state.W, cluster_deltas, divisor)
        return False, messages, participants
    except NoAggregatorError:
        return True, messages, participants


def _learn_caip(state: SimulationState, r: int, failures) -> tuple[bool, dict[int, int], list[int]]:
    cfg = state.cfg
    if not state.central_alive:
        _apply_failures(state, failures)
        return True, {}, []
    uploaders = [d for d in state.devices if d.alive]
    if not uploaders:
        _apply_failures(state, failures)
        return True, {}, []
    X = np.concatenate([d.dataset.features for d in uploaders])
    Y = np.concatenate([d.dataset.labels for d in uploaders])
    state.caip_uploaded = True
    for d in uploaders:
        d.epsilon_spent = cfg.dp_epsilon_max
    _apply_failures(state, failures)
    if not state.central_alive:
        return True, {CENTRAL_ID: len(uploaders)}, [d.id for d in uploaders]
    dw = fl_core.local_train(state.W, (X, Y), cfg.local_epochs, cfg.learning_rate, cfg.batch_size,
                             streams.stream(cfg.seed, streams.TRAINING, CENTRAL_STREAM_KEY, r))
    state.W = state.W + dw
    return False, {CENTRAL_ID: len(uploaders)}, [d.id for d in uploaders]


def _apply_failures(state: SimulationState, failures) -> None:
    for ev in failures:
        inject_failure(state, ev.kind, ev.target)


# --------------------------------------------------------------------------
# Round

def run_round(state: SimulationState, r: int, pool=None) -> tuple[SimulationState, RoundMetrics]:
    cfg = state.cfg
    failures = [ev for ev in cfg.failure_plan if ev.round == r]
    _rehome_orphans(state)

    for d in state.devices:
        if d.alive:
            random_waypoint_step(d, cfg.dt, streams.stream(cfg.seed, streams.MOBILITY, d.id, r),
                                 cfg.area_m, (cfg.speed_min, cfg.speed_max))

    links = _observe_links(state, r)
    _select(state, links)

    # learning-plane costs of this round
    dim = fl_core.PARAM_DIM
    n_alive = len(links)
    if state.mode is Mode.AITP:
        sizes = [len(a.member_ids) for a in state.aggregators if a.alive] or [0]
        rows = max((l.device.dataset.rows for l in links), default=0)
        comps = fl_round_components(cfg.c_train, cfg.c_agg, cfg.control_rate, cfg.local_epochs, rows, dim, max(sizes))
        round_overhead = sum(comps)
        ctrl_bits = model_update_bits(dim)
        l_proc = cfg.c_train * dim
    elif state.mode is Mode.CAIP and state.central_alive:
        upload, central_s = caip_round_costs([l.device for l in links], cfg.c_central)
        ctrl_bits = max(upload.values(), default=0)
        round_overhead = ctrl_bits / cfg.control_rate + central_s
        l_proc = cfg.c_train * dim
    else:
        round_overhead, ctrl_bits, l_proc = 0.0, 0, 0.0

    offered = {}
    for link in links:
        offered[link.device.id] = traffic_for(link.device, cfg.dt, streams.stream(cfg.seed, streams.TRAFFIC, link.device.id, r))
    packets = sum(bits // TRAFFIC_CLASSES[l.device.traffic].packet_bits for l, (_, bits) in zip(links, offered.values()))
    fl_share = round_overhead / packets if packets > 0 else 0.0

    records = []
    violations = 0
    for link in links:
        d = link.device
        cls = TRAFFIC_CLASSES[d.traffic]
        lam, bits = offered[d.id]
        p = link.params
        if p is None:
            thr, power, outage = 0.0, 0.0, True
        else:
            power = p.power
            outage = link.obs.achieved_snr_db(power) + MCS_TOLERANCE_DB < p.mcs.min_snr_db
            thr = 0.0 if outage else shannon_throughput(d.bandwidth, power, link.obs, p.mcs.code_rate)
        if outage and p is not None:
            violations += 1
        if thr > 0:
            l_tx = cls.packet_bits / thr
            try:
                l_q = queueing_delay_mm1(lam, thr / cls.packet_bits)
            except UnstableQueueError:
                l_q = cfg.latency_cap
            t_data = min(bits / thr, cfg.dt)
        else:
            l_tx, l_q = cfg.latency_cap, 0.0
            t_data = cfg.dt if (bits > 0 and p is not None) else 0.0
        t_ctrl = ctrl_bits / cfg.control_rate if (state.mode is not Mode.NAP and p is not None and ctrl_bits) else 0.0
        e_comp = computation_energy(cfg.c_comp, cfg.local_epochs, d.dataset.rows, dim) if state.mode is Mode.AITP else 0.0
        energy = device_energy(power, t_data + t_ctrl, e_comp)
        d.tx_power = power if power > 0 else d.tx_power
        d.energy_spent += energy
        records.append(DeviceRecord(d.id, thr, l_tx, l_proc, l_q, fl_share, energy, d.epsilon_spent, outage))

    # learning and mid-round failures
    if state.mode is Mode.AITP:
        skipped, messages, participants = _learn_aitp(state, r, failures, pool)
    elif state.mode is Mode.CAIP:
        skipped, messages, participants = _learn_caip(state, r, failures)
    else:
        _apply_failures(state, failures)
        skipped, messages, participants = True, {}, []

    central_e = 0.0
    if state.mode is Mode.CAIP and messages:
        central_e = cfg.c_central_j * sum(state.devices[i].dataset.rows for i in participants)

    m = RoundMetrics(round=r, devices=records)
    m.t_network = network_throughput(rec.throughput for rec in records)
    m.mean_latency = math.fsum(rec.l_total for rec in records) / len(records) if records else 0.0
    m.total_energy = math.fsum(rec.energy for rec in records)
    m.central_energy = central_e
    total_e = m.total_energy + central_e
    m.energy_efficiency = energy_efficiency(m.t_network, [total_e], cfg.dt) if total_e > 0 else 0.0
    m.live_devices = n_alive
    m.live_aggregators = len(state.live_aggregator_ids())
    m.mcs_violations = violations
    m.learning_skipped = skipped
    m.fl_round_latency = round_overhead
    m.excluded_devices = len(state.accountant.excluded)
    m.aggregator_messages = dict(sorted(messages.items()))
    m.message_kinds = _message_kinds(state.mode, messages)
    if state.mode is Mode.AITP:
        spent = [state.accountant.epsilon_spent(i) for i in participants] if cfg.dp_enabled else []
        m.privacy_loss = privacy_loss("AITP", spent, cfg.dp_epsilon_max, r) if spent else 0.0
    elif state.mode is Mode.CAIP:
        m.privacy_loss = 1.0 if state.caip_uploaded else 0.0
    else:
        m.privacy_loss = 0.0
    m.accuracy = fl_core.model_accuracy(state.W, state.validation, len(MCS_TABLE))
    m.objective = _objective(cfg, m, links)
    state.round = r + 1
    return state, m


def _message_kinds(mode: Mode, messages: dict) -> tuple[str, ...]:
    if not messages:
        return ()
    return (MSG_MODEL_UPDATE,) if mode is Mode.AITP else (MSG_RAW_DATASET,)


def _objective(cfg: ScenarioConfig, m: RoundMetrics, links: list[_Link]) -> float:
    from .adaptation import G_MAX
    top = MCS_TABLE[-1].code_rate
    upper = network_throughput(
        shannon_throughput(l.device.bandwidth, cfg.power_max, _with_gain(l.obs, l.base_gain, G_MAX), top)
        for l in links
    )
    t_norm = min(1.0, m.t_network / upper) if upper > 0 else 0.0
    l_norm = min(1.0, m.mean_latency / cfg.latency_cap)
    budget = cfg.n_devices * cfg.power_max * cfg.dt
    e_norm = min(1.0, (m.total_energy + m.central_energy) / budget)
    a, b, g = cfg.objective_weights
    return objective(a, b, g, l_norm, t_norm, e_norm)


# --------------------------------------------------------------------------
# Run

def summarize(rounds: list[RoundMetrics], initial_accuracy: float, robustness: float = 1.0) -> dict:
    n = len(rounds)

    def mean(attr):
        return math.fsum(getattr(m, attr) for m in rounds) / n if n else 0.0

    return {
        "latency_ms": mean("mean_latency") * 1e3,
        "throughput_gbps": mean("t_network") / 1e9,
        "energy_efficiency_bpj": mean("energy_efficiency"),
        "privacy_loss": rounds[-1].privacy_loss if n else 0.0,
        "robustness": robustness,
        "initial_accuracy": initial_accuracy,
        "final_accuracy": rounds[-1].accuracy if n else initial_accuracy,
        "mcs_violations": sum(m.mcs_violations for m in rounds),
    }


def _run_rounds(cfg: ScenarioConfig, mask_audit=None, start_time=None):
    state = init_state(cfg)
    state.mask_audit = mask_audit
    t0 = time.perf_counter() if start_time is None else start_time
    rounds = []
    aborted = False
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(cfg.rounds):
            state, m = run_round(state, r, pool)
            rounds.append(m)
            if time.perf_counter() - t0 > cfg.wall_clock_limit:
                aborted = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return state, rounds, aborted


def post_failure_throughput(rounds: list[RoundMetrics], failure_plan) -> float:
    """Mean network throughput over rounds after the first failure (all rounds if none)."""
    if not rounds:
        return 0.0
    start = min((ev.round for ev in failure_plan), default=None)
    window = rounds if start is None else [m for m in rounds if m.round > start]
    if not window:
        window = rounds
    return math.fsum(m.t_network for m in window) / len(window)


def run_simulation(cfg: ScenarioConfig, mask_audit=None) -> SimulationReport:
    """Execute ``cfg.rounds`` rounds and summarize; failure plans also run a clean baseline."""
    from .metrics import robustness as robustness_ratio
    from .scenario import config_echo

    t0 = time.perf_counter()
    state, rounds, aborted = _run_rounds(cfg, mask_audit, t0)
    initial_acc = fl_core.model_accuracy(state.W0, state.validation, len(MCS_TABLE))
    rob = 1.0
    if cfg.failure_plan and rounds and not aborted:
        _, base_rounds, aborted = _run_rounds(cfg.replace(failure_plan=()), None, t0)
        base = post_failure_throughput(base_rounds, cfg.failure_plan)
        hit = post_failure_throughput(rounds, cfg.failure_plan)
        rob = robustness_ratio(hit, base) if base > 0 else 0.0
    elapsed = time.perf_counter() - t0
    return SimulationReport(
        config=config_echo(cfg),
        mode=cfg.mode.value,
        n_devices=cfg.n_devices,
        seed=cfg.seed,
        rounds=rounds,
        summary=summarize(rounds, initial_acc, rob),
        wall_clock_s=elapsed,
        aborted=aborted,
        error="wall-clock limit exceeded" if aborted else None,
    )


def sweep(cfg: ScenarioConfig, device_counts, modes=(Mode.AITP, Mode.CAIP, Mode.NAP)) -> list[SimulationReport]:
    reports = []
    for n in device_counts:
        for mode in modes:
            reports.append(run_simulation(cfg.replace(n_devices=int(n), mode=Mode(mode))))
    return reports
