"""Slotted discrete-event engine for the wake-up schemes, a Monte Carlo
harness, and the dynamic-density experiment.

Each device's radio walks the sleep / beacon-seek / decode / inactivity
cycle against its packet arrivals.  Channel-level beacon events (wake-up
signal presence, miss-detections, false detections) are pre-drawn per run
and indexed by beacon ordinal so that all schemes see identical draws on
matched seeds; scheme differences then come only from their cycle shapes
and skip decisions.

Two couplings are supported: "trace" drives beacons from the generated
packet buffer (product experiments), "markov" drives them from Bernoulli
draws with the analytic per-slot activation probability, which makes long
runs converge to the closed-form power and delay of the wakeup module.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig, WakeupParams
from .errors import InvalidParameterError
from .forecast import InterArrivalForecaster, calibrate_margin
from .spatial import (
    ExponentialInfluence,
    activation_probability_analytic,
    per_device_activation,
    sample_deployment,
)
from .traffic import TrafficModel, TrafficTrace, generate_trace
from .wakeup import SchemeKind, build_chain, miss_retry_factor, scheme_params, solve_t4

STATES = ("S1", "S2", "S3", "S4")


# ---------------------------------------------------------------------------
# bookkeeping


class EnergyAccount:
    """Accumulates energy (mW * TTI) in total and per reporting window."""

    def __init__(self, horizon: float, window: float | None = None):
        self.total = 0.0
        self.window = window
        if window:
            self.bins = np.zeros(int(math.ceil(horizon / window)) + 2)
        else:
            self.bins = None

    def add(self, t0: float, duration: float, energy: float) -> None:
        self.total += energy
        if self.bins is None or duration <= 0.0:
            if self.bins is not None and energy:
                self.bins[min(int(t0 / self.window), len(self.bins) - 1)] += energy
            return
        rate = energy / duration
        t = t0
        remaining = duration
        while remaining > 1e-12:
            b = int(t / self.window)
            if b >= len(self.bins):
                self.bins = np.concatenate([self.bins, np.zeros(b - len(self.bins) + 2)])
            chunk = min(remaining, (b + 1) * self.window - t)
            self.bins[b] += rate * chunk
            t += chunk
            remaining -= chunk


@dataclass
class BeaconEvents:
    """Per-run channel randomness, shared by all schemes at equal ordinals."""

    wus_u: np.ndarray
    miss_u: np.ndarray
    false_u: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, count: int) -> "BeaconEvents":
        return cls(rng.random(count), rng.random(count), rng.random(count))

    def grow(self, rng: np.random.Generator) -> None:
        extra = len(self.wus_u) // 2 + 16
        self.wus_u = np.concatenate([self.wus_u, rng.random(extra)])
        self.miss_u = np.concatenate([self.miss_u, rng.random(extra)])
        self.false_u = np.concatenate([self.false_u, rng.random(extra)])


class SkipPlanner:
    """FWuS sleep decisions from precomputed next-gap forecasts.

    Holds the coordinator-side arrival slots and, for every arrival index,
    the forecast of the following gap.  A device asking at time t gets the
    number of beacon periods to sleep: the forecast anchored at the latest
    arrival, minus the safety margin, snapped to the grid (floor one
    period).
    """

    def __init__(self, arrival_slots: np.ndarray, next_gap_pred: np.ndarray,
                 margin: float, t4: float, max_multiple: int = 10_000):
        self.slots = arrival_slots
        self.pred = next_gap_pred
        self.margin = margin
        self.t4 = t4
        self.max_multiple = max_multiple

    def sleep_multiples(self, t_now: float) -> int:
        j = int(np.searchsorted(self.slots, t_now, side="right")) - 1
        if j < 0 or j >= len(self.pred) or not np.isfinite(self.pred[j]):
            return 1
        target = self.slots[j] + self.pred[j] - self.margin - t_now
        if target <= self.t4:
            return 1
        n = int(math.floor(target / self.t4 + 0.5))
        return max(1, min(n, self.max_multiple))


@dataclass
class DeviceResult:
    energy: float
    elapsed: float
    visits: np.ndarray
    delays: list
    confusion: dict
    delay_accrual: float


@dataclass
class RunMetrics:
    """Per-run, per-scheme outcome of the engine."""

    scheme: str
    total_energy_mj: float
    mean_power_mw: float          # sum of per-device mean powers (network)
    delays: np.ndarray            # per-packet delays, trace coupling
    mean_delay: float
    visit_fractions: np.ndarray
    model_delay_estimate: float   # markov-coupling analytic-style estimate
    confusion: dict
    n_decisions: int
    seed: int
    windowed_power: np.ndarray | None = None


# ---------------------------------------------------------------------------
# single-device walk


def _simulate_device(
    kind: SchemeKind,
    params: WakeupParams,
    horizon: float,
    arrivals: np.ndarray,
    packet_weight: float,
    p_a_dev: float,
    coupling: str,
    events: BeaconEvents,
    dev_rng: np.random.Generator,
    q_dev: float,
    account: EnergyAccount,
    planner: SkipPlanner | None,
    state_log: list | None,
    beacon_cursor: int,
) -> tuple[DeviceResult, int]:
    """Advance one device's radio over the horizon; returns its result and
    the updated shared beacon-ordinal cursor."""
    t4 = params.t4
    beacon_dur = params.t_on if kind is SchemeKind.DRX else params.t1
    beacon_pw = params.pw3 if kind is SchemeKind.DRX else params.pw1
    retry = miss_retry_factor(params.p_md)
    backlog = t4 / 2.0 if params.delay_mean_residual else t4 * t4 / 2.0
    sleep_case_cost = 3.0 * (params.t_u + params.t1) + backlog + retry * t4

    t = 0.0
    k = beacon_cursor
    ptr = 0
    n_arr = len(arrivals)
    visits = np.zeros(4, dtype=np.int64)
    delays: list = []
    confusion = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    accrual = 0.0

    def charge(state: str, duration: float, energy: float) -> None:
        nonlocal t
        account.add(t, duration, energy)
        if state_log is not None:
            state_log.append((t, duration, state, energy))
        t += duration

    def pending(at: float) -> bool:
        return ptr < n_arr and arrivals[ptr] <= at

    def deliver(up_to: float, ready_at: float | None) -> int:
        """Hand over packets that arrived by `up_to`.

        Packets already waiting when decoding became available at `ready_at`
        are charged that wait; packets arriving while the radio is actively
        exchanging (ready_at None) see only the MAC delay.
        """
        nonlocal ptr
        count = 0
        while ptr < n_arr and arrivals[ptr] <= up_to:
            wait = 0.0 if ready_at is None else max(ready_at - float(arrivals[ptr]), 0.0)
            delays.append(wait + params.t_mac)
            ptr += 1
            count += 1
        return count

    while t < horizon:
        # Sleep: FWuS may commit to several beacon periods at once.
        n_sleep = 1
        if kind is SchemeKind.FWUS and planner is not None:
            n_sleep = planner.sleep_multiples(t)
        visits[3] += 1
        accrual += p_a_dev * sleep_case_cost
        for i in range(n_sleep):
            charge("S4", t4, t4 * params.pw4)
            if i == n_sleep - 1:
                break
            # Skipped beacon instant: consume the ordinal, score the decision.
            if k >= len(events.wus_u):
                events.grow(dev_rng)
            if coupling == "markov":
                had_traffic = events.wus_u[k] < p_a_dev
            else:
                had_traffic = pending(t)
            confusion["fn" if had_traffic else "tn"] += 1
            k += 1
        if t >= horizon:
            break

        # Attended beacon.
        if k >= len(events.wus_u):
            events.grow(dev_rng)
        if coupling == "markov":
            has_traffic = events.wus_u[k] < p_a_dev
        else:
            has_traffic = pending(t)
        confusion["tp" if has_traffic else "fp"] += 1
        miss_u = events.miss_u[k]
        false_u = events.false_u[k]
        k += 1

        visits[0] += 1
        charge("S1" if kind is not SchemeKind.DRX else "ON", beacon_dur, beacon_dur * beacon_pw)

        if has_traffic:
            wake = miss_u >= params.p_md
        else:
            wake = false_u < params.p_f
        if not wake:
            continue

        # Start-up ramp into decoding (triangular charge).
        charge("UP", params.t_u, 0.5 * params.t_u * params.pw2)
        while True:
            # One active-decoding slot.
            slot_start = t
            if coupling == "trace":
                deliver(slot_start, slot_start)
            visits[1] += 1
            charge("S2", params.t2, params.t2 * params.pw2)
            if coupling == "trace":
                burst_goes_on = deliver(t, None) > 0
            else:
                burst_goes_on = q_dev > 0.0 and dev_rng.random() < q_dev
            if burst_goes_on:
                continue
            # Inactivity timer.
            visits[2] += 1
            charge("S3", params.t3, params.t3 * params.pw3)
            if coupling == "trace":
                revived = deliver(t, None) > 0
            else:
                revived = q_dev > 0.0 and dev_rng.random() < q_dev
            if not revived:
                break
        charge("DOWN", params.t_pd, 0.5 * params.t_pd * params.pw3)

    if packet_weight != 1.0:
        delays = list(np.repeat(np.asarray(delays), max(int(round(packet_weight)), 1)))
    return (
        DeviceResult(
            energy=account.total,
            elapsed=t,
            visits=visits,
            delays=delays,
            confusion=confusion,
            delay_accrual=accrual,
        ),
        k,
    )


# ---------------------------------------------------------------------------
# scenario-level plumbing


def resolve_t4(cfg: ScenarioConfig) -> float:
    """Sleep period shared by the WuS-style schemes under the configured
    policy (explicit value, design-point solve, or per-scenario solve)."""
    if cfg.wakeup.t4 is not None:
        return cfg.wakeup.t4
    if cfg.t4_policy == "design_point":
        p_a = activation_probability_analytic(
            cfg.t4_design_lambda_e, ExponentialInfluence(), cfg.jacobian_form
        )
        q = cfg.t4_design_q
    else:
        p_a = activation_probability_analytic(
            cfg.lambda_e, ExponentialInfluence(), cfg.jacobian_form
        )
        q = 0.5 * (cfg.q_range[0] + cfg.q_range[1])
    return solve_t4(p_a, q, cfg.wakeup).t4


def build_run_inputs(cfg: ScenarioConfig, rng: np.random.Generator):
    """Deployment, per-device activation/burst parameters, and the trace."""
    dep = sample_deployment(cfg, rng)
    p_act = per_device_activation(dep, ExponentialInfluence())
    q_vals = rng.uniform(cfg.q_range[0], cfg.q_range[1], size=len(p_act))
    models = [
        TrafficModel(p_a=float(p), q=float(q), rate_active=cfg.rate_active, rate_idle=cfg.rate_idle)
        for p, q in zip(p_act, q_vals)
    ]
    trace = generate_trace(models, cfg.horizon, rng) if models else None
    return dep, p_act, q_vals, trace


def _plannable_anchors(slots: np.ndarray, window: int, t4: float) -> np.ndarray:
    """Arrival indices whose recent window spans at least one beacon period.

    When the last `window` gaps all fit inside a single beacon period the
    traffic is clearly dense and the decision stays at the floor, so the
    forecaster is not consulted (a conservative rule that also keeps long
    dense stretches cheap)."""
    idx = np.arange(window, len(slots))
    if len(idx) == 0:
        return idx
    span = slots[idx] - slots[idx - window]
    return idx[span >= t4]


def _make_planner(
    trace: TrafficTrace, predictor: InterArrivalForecaster, t4: float
) -> SkipPlanner | None:
    if predictor is None or not predictor.is_fitted_ or trace is None:
        return None
    gaps = trace.inter_arrivals.astype(float)
    if len(gaps) <= predictor.window:
        return None
    slots = trace.arrival_slots.astype(float)
    next_gap = np.full(len(slots), np.nan)
    anchors = _plannable_anchors(slots, predictor.window, t4)
    if len(anchors):
        next_gap[anchors] = predictor.forecast_after(gaps, slots, anchors)
    return SkipPlanner(slots, next_gap, predictor.margin_, t4)


def run_scenario(
    cfg: ScenarioConfig,
    scheme: SchemeKind,
    trace: TrafficTrace | None,
    activation_probs: np.ndarray,
    q_values: np.ndarray,
    predictor: InterArrivalForecaster | None = None,
    seed: int = 0,
    t4: float | None = None,
    power_window: float | None = None,
    state_log: list | None = None,
) -> RunMetrics:
    """Run every device under one scheme and aggregate run metrics."""
    if scheme is SchemeKind.FWUS and predictor is None:
        raise InvalidParameterError("FWUS requires a trained predictor")
    n_dev = len(activation_probs)
    if n_dev == 0:
        raise InvalidParameterError("scenario has no devices")
    if cfg.beacon_coupling == "trace" and trace is None:
        raise InvalidParameterError("trace coupling requires a traffic trace")

    t4_val = t4 if t4 is not None else resolve_t4(cfg)
    q_mid = 0.5 * (cfg.q_range[0] + cfg.q_range[1])
    p_a_scenario = activation_probability_analytic(
        cfg.lambda_e, ExponentialInfluence(), cfg.jacobian_form
    )
    params = scheme_params(scheme, p_a_scenario, q_mid, cfg.wakeup.replace(t4=t4_val))

    # Channel draws are seeded per run only, never per scheme: matched seeds
    # then expose every scheme to identical beacon-ordinal events.
    ss = np.random.SeedSequence((cfg.master_seed, seed, 0xBEAC))
    ev_rng, dev_rng_root = [np.random.default_rng(s) for s in ss.spawn(2)]
    period = t4_val + (params.t_on if scheme is SchemeKind.DRX else params.t1)
    n_beacons = int(cfg.horizon / period) + 32
    events = BeaconEvents.draw(ev_rng, n_beacons * max(n_dev, 1))

    planner = _make_planner(trace, predictor, t4_val) if scheme is SchemeKind.FWUS else None

    total_power = 0.0
    total_energy = 0.0
    visits = np.zeros(4, dtype=np.int64)
    delays: list = []
    confusion = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    accrual = 0.0
    total_visits = 0
    win = None
    cursor = 0
    dev_rngs = dev_rng_root.spawn(n_dev)
    for i in range(n_dev):
        account = EnergyAccount(cfg.horizon, power_window)
        arr = (
            trace.per_device_arrival_slots[i].astype(float)
            if (trace is not None and cfg.beacon_coupling == "trace")
            else np.zeros(0)
        )
        res, cursor = _simulate_device(
            scheme,
            params,
            float(cfg.horizon),
            arr,
            cfg.rate_active,
            float(activation_probs[i]),
            cfg.beacon_coupling,
            events,
            dev_rngs[i],
            float(q_values[i]),
            account,
            planner,
            state_log,
            cursor,
        )
        total_power += res.energy / res.elapsed if res.elapsed > 0 else 0.0
        total_energy += res.energy
        visits += res.visits
        delays.extend(res.delays)
        for key in confusion:
            confusion[key] += res.confusion[key]
        accrual += res.delay_accrual
        total_visits += int(res.visits.sum())
        if power_window:
            win = account.bins if win is None else win + account.bins

    delays_arr = np.asarray(delays, dtype=float)
    model_delay = accrual / total_visits + params.t_mac if total_visits else math.nan
    n_windows = int(cfg.horizon // power_window) if power_window else 0
    windowed = None
    if power_window:
        windowed = (win[:n_windows] / power_window) if n_windows else win / power_window
    return RunMetrics(
        scheme=scheme.value,
        total_energy_mj=total_energy / 1000.0,
        mean_power_mw=total_power,
        delays=delays_arr,
        mean_delay=float(delays_arr.mean()) if len(delays_arr) else math.nan,
        visit_fractions=visits / visits.sum() if visits.sum() else visits.astype(float),
        model_delay_estimate=model_delay,
        confusion=confusion,
        n_decisions=int(sum(confusion.values())),
        seed=seed,
        windowed_power=windowed,
    )


def power_saving(pw: float, pw_benchmark: float) -> float:
    """Relative power saving of `pw` against a benchmark scheme's power."""
    if pw_benchmark <= 0.0:
        raise InvalidParameterError("benchmark power must be > 0")
    return (pw_benchmark - pw) / pw_benchmark


# ---------------------------------------------------------------------------
# Monte Carlo harness


def fit_forecaster(
    cfg: ScenarioConfig, t4: float, gaps: np.ndarray, slots: np.ndarray
) -> InterArrivalForecaster:
    """Fit the estimator on a gap series and calibrate its safety margin on
    the validation split; returns it unfitted when the series is too short
    (decisions then collapse to the non-forecasting floor)."""
    tc = cfg.train
    model = InterArrivalForecaster(
        hidden_size=tc.hidden_size,
        window=tc.window,
        learning_rate=tc.learning_rate,
        max_epochs=tc.max_epochs,
        batch_size=tc.batch_size,
        patience=tc.patience,
        beta1=tc.beta1,
        beta2=tc.beta2,
        epsilon=tc.epsilon,
        split_train=tc.split_train,
        split_val=tc.split_val,
        split_test=tc.split_test,
        phase_period=t4 if tc.include_phase else None,
        seed=tc.seed,
    )
    if len(gaps) < model.window + 3:
        return model
    gaps = np.asarray(gaps, dtype=float)
    slots = np.asarray(slots, dtype=float)
    if len(gaps) > tc.max_fit_gaps:
        gaps = gaps[-tc.max_fit_gaps :]
        slots = slots[-tc.max_fit_gaps :]
    model.fit(gaps, slots)
    lo_val, lo_test, _ = model.split_bounds_
    w = model.window
    val_gaps = gaps[lo_val : lo_test + w]
    val_slots = slots[lo_val : lo_test + w]
    min_samples = tc.min_calibration_samples or None
    calibrate_margin(
        model,
        val_gaps,
        t4,
        p_md_target=cfg.wakeup.p_md,
        p_f_target=cfg.wakeup.p_f,
        arrival_slots=val_slots,
        min_samples=min_samples,
    )
    return model


def train_predictor(cfg: ScenarioConfig, t4: float, seed_key: str = "train") -> InterArrivalForecaster:
    """Fit and calibrate the forecaster on a dedicated trace of this
    scenario; returns an unfitted estimator when the scenario produces too
    few arrivals."""
    ss = np.random.SeedSequence((cfg.master_seed, 0xF0CA57, _stable_key(seed_key)))
    rng = np.random.default_rng(ss)
    _, _, _, trace = build_run_inputs(cfg, rng)
    if trace is None:
        return fit_forecaster(cfg, t4, np.zeros(0), np.zeros(0))
    return fit_forecaster(
        cfg, t4, trace.inter_arrivals.astype(float), trace.arrival_slots.astype(float)
    )


def _stable_key(text: str) -> int:
    key = 0
    for ch in text:
        key = (key * 131 + ord(ch)) % (2**31)
    return key


def _single_run(args):
    cfg, schemes, run_idx, t4, predictor = args
    rng = np.random.default_rng(np.random.SeedSequence((cfg.master_seed, 1 + run_idx)))
    _, p_act, q_vals, trace = build_run_inputs(cfg, rng)
    if len(p_act) == 0:
        raise InvalidParameterError("run produced an empty deployment; set device_count")
    pred = predictor
    if cfg.train_per_run and SchemeKind.FWUS in schemes:
        pred = train_predictor(cfg, t4, seed_key=f"run{run_idx}")
    out = {}
    for scheme in schemes:
        out[scheme.value] = run_scenario(
            cfg, scheme, trace, p_act, q_vals,
            predictor=pred if scheme is SchemeKind.FWUS else None,
            seed=run_idx, t4=t4,
        )
    return run_idx, out


@dataclass
class MonteCarloResult:
    """Per-run metrics plus summary statistics for each scheme."""

    runs: int
    t4: float
    per_run: list = field(default_factory=list)     # [{scheme: RunMetrics}]
    power: dict = field(default_factory=dict)       # scheme -> np.ndarray per run
    mean_delay: dict = field(default_factory=dict)
    eta_vs_wus: np.ndarray | None = None
    eta_vs_drx: np.ndarray | None = None

    def stats(self, scheme: str) -> dict:
        p = self.power[scheme]
        d = self.mean_delay[scheme]
        valid = d[~np.isnan(d)]
        return {
            "power_mean": float(p.mean()),
            "power_max": float(p.max()),
            "power_min": float(p.min()),
            "power_std": float(p.std()),
            "delay_mean": float(valid.mean()) if len(valid) else math.nan,
            "delay_std": float(valid.std()) if len(valid) else math.nan,
        }


def monte_carlo(
    cfg: ScenarioConfig,
    schemes: list[SchemeKind],
    runs: int | None = None,
    workers: int | None = None,
    predictor: InterArrivalForecaster | None = None,
) -> MonteCarloResult:
    """Independent deployments and traces per run with sub-seeded streams;
    reports per-scheme statistics and the relative saving of FWuS."""
    runs = cfg.runs if runs is None else runs
    workers = cfg.workers if workers is None else workers
    if runs < 1:
        raise InvalidParameterError("runs must be >= 1")
    t4 = resolve_t4(cfg)
    if SchemeKind.FWUS in schemes and predictor is None and not cfg.train_per_run:
        predictor = train_predictor(cfg, t4)

    jobs = [(cfg, schemes, i, t4, predictor) for i in range(runs)]
    results: dict[int, dict] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for idx, out in pool.map(_single_run, jobs):
                results[idx] = out
    else:
        for job in jobs:
            idx, out = _single_run(job)
            results[idx] = out

    mc = MonteCarloResult(runs=runs, t4=t4)
    mc.per_run = [results[i] for i in range(runs)]
    for scheme in schemes:
        key = scheme.value
        mc.power[key] = np.array([results[i][key].mean_power_mw for i in range(runs)])
        mc.mean_delay[key] = np.array([results[i][key].mean_delay for i in range(runs)])
    if SchemeKind.FWUS in schemes and SchemeKind.WUS in schemes:
        mc.eta_vs_wus = np.array(
            [
                power_saving(results[i]["fwus"].mean_power_mw, results[i]["wus"].mean_power_mw)
                for i in range(runs)
            ]
        )
    if SchemeKind.FWUS in schemes and SchemeKind.DRX in schemes:
        mc.eta_vs_drx = np.array(
            [
                power_saving(results[i]["fwus"].mean_power_mw, results[i]["drx"].mean_power_mw)
                for i in range(runs)
            ]
        )
    return mc


# ---------------------------------------------------------------------------
# dynamic event density


def dynamic_density_run(
    cfg: ScenarioConfig,
    schedule: list[tuple[int, float]],
    scheme: SchemeKind,
    seed: int = 0,
) -> np.ndarray:
    """Windowed mean power (mW per device) under a piecewise event density.

    Device positions stay fixed; the event field and per-device activation
    probabilities are resampled at each schedule boundary.  The FWuS
    predictor is refreshed on a sliding window of recent gaps every
    `recalib_interval` TTIs: a few fine-tuning epochs plus a margin
    recalibration.  Returns rows of (window_start_slot, mean_power_mw).
    """
    starts = [s for s, _ in schedule]
    if starts != sorted(starts) or not schedule:
        raise InvalidParameterError("schedule must be non-empty and sorted by start slot")
    if starts[0] != 0:
        raise InvalidParameterError("schedule must start at slot 0")

    rng = np.random.default_rng(np.random.SeedSequence((cfg.master_seed, 0xD7A, seed)))
    base_dep = sample_deployment(cfg, rng)
    n_dev = len(base_dep.devices)
    if n_dev == 0:
        raise InvalidParameterError("dynamic run needs at least one device; set device_count")
    q_vals = rng.uniform(cfg.q_range[0], cfg.q_range[1], size=n_dev)

    bounds = starts + [cfg.horizon]
    per_dev_slots = [[] for _ in range(n_dev)]
    seg_pa = []
    for (seg_start, lam), seg_end in zip(schedule, bounds[1:]):
        seg_cfg = cfg.replace(lambda_e=lam)
        seg_dep = sample_deployment(
            seg_cfg.replace(device_count=0), rng
        )  # events only; devices reused
        dep = base_dep.__class__(
            devices=base_dep.devices,
            events=seg_dep.events,
            region_radius=base_dep.region_radius,
            guard_radius=base_dep.guard_radius,
            lambda_m=cfg.lambda_m,
            lambda_e=lam,
        )
        p_act = per_device_activation(dep, ExponentialInfluence())
        seg_pa.append(p_act)
        length = seg_end - seg_start
        if length <= 0:
            continue
        models = [
            TrafficModel(float(p), float(q), cfg.rate_active, cfg.rate_idle)
            for p, q in zip(p_act, q_vals)
        ]
        seg_trace = generate_trace(models, length, rng, keep_states=False)
        for i in range(n_dev):
            per_dev_slots[i].append(seg_trace.per_device_arrival_slots[i] + seg_start)

    per_dev = [np.concatenate(s) if s else np.zeros(0, dtype=np.int64) for s in per_dev_slots]
    agg = np.zeros(cfg.horizon)
    for s in per_dev:
        np.add.at(agg, s.astype(int), cfg.rate_active)
    arrival_slots = np.nonzero(agg > 0)[0].astype(float)
    gaps = np.diff(arrival_slots, prepend=0.0)

    t4 = resolve_t4(cfg)
    mean_pa = np.mean(seg_pa[0]) if len(seg_pa) else 0.0

    planner = None
    if scheme is SchemeKind.FWUS:
        warm_cfg = cfg.replace(lambda_e=schedule[0][1], horizon=min(cfg.horizon, 200_000))
        predictor = train_predictor(warm_cfg, t4, seed_key=f"dyn{seed}")
        planner = _build_dynamic_planner(cfg, predictor, gaps, arrival_slots, t4)

    q_mid = 0.5 * (cfg.q_range[0] + cfg.q_range[1])
    params = scheme_params(scheme, mean_pa, q_mid, cfg.wakeup.replace(t4=t4))
    ev_rng = np.random.default_rng(np.random.SeedSequence((cfg.master_seed, 0xE7, seed)))
    period = t4 + (params.t_on if scheme is SchemeKind.DRX else params.t1)
    events = BeaconEvents.draw(ev_rng, (int(cfg.horizon / period) + 32) * n_dev)
    dev_rngs = np.random.default_rng(np.random.SeedSequence((cfg.master_seed, 0xDE, seed))).spawn(n_dev)

    win_total = None
    cursor = 0
    for i in range(n_dev):
        account = EnergyAccount(cfg.horizon, float(cfg.dynamic_window))
        _, cursor = _simulate_device(
            scheme,
            params,
            float(cfg.horizon),
            per_dev[i].astype(float),
            cfg.rate_active,
            float(np.mean([pa[i] for pa in seg_pa])),
            "trace",
            events,
            dev_rngs[i],
            float(q_vals[i]),
            account,
            planner,
            None,
            cursor,
        )
        win_total = account.bins if win_total is None else win_total + account.bins

    n_windows = cfg.horizon // cfg.dynamic_window
    power = win_total[:n_windows] / (cfg.dynamic_window * n_dev)
    starts_arr = np.arange(n_windows) * cfg.dynamic_window
    return np.column_stack([starts_arr, power])


def _build_dynamic_planner(
    cfg: ScenarioConfig,
    predictor: InterArrivalForecaster,
    gaps: np.ndarray,
    slots: np.ndarray,
    t4: float,
) -> SkipPlanner | None:
    """Walk the recalibration epochs, fine-tuning and re-predicting each one."""
    if not predictor.is_fitted_:
        return None
    w = predictor.window
    next_gap = np.full(len(slots), np.nan)
    margins = np.full(len(slots), predictor.margin_)
    plannable = _plannable_anchors(slots, w, t4)
    n_epochs = int(math.ceil(cfg.horizon / cfg.recalib_interval))
    for e in range(n_epochs):
        t_lo = e * cfg.recalib_interval
        t_hi = min((e + 1) * cfg.recalib_interval, cfg.horizon)
        if e > 0:
            past = np.searchsorted(slots, t_lo, side="left")
            lo = max(0, past - cfg.recalib_window)
            recent_gaps = gaps[lo:past]
            recent_slots = slots[lo:past]
            if len(recent_gaps) >= w + 3:
                _fine_tune(predictor, recent_gaps, recent_slots, cfg.recalib_epochs)
                min_samples = cfg.train.min_calibration_samples or None
                calibrate_margin(
                    predictor,
                    recent_gaps,
                    t4,
                    p_md_target=cfg.wakeup.p_md,
                    p_f_target=cfg.wakeup.p_f,
                    arrival_slots=recent_slots,
                    min_samples=min_samples,
                )
        # Forecast after every plannable arrival of this epoch with the
        # epoch's weights and margin, batched.
        in_epoch = plannable[(slots[plannable] >= t_lo) & (slots[plannable] < t_hi)]
        if len(in_epoch):
            next_gap[in_epoch] = predictor.forecast_after(gaps, slots, in_epoch)
        epoch_all = np.nonzero((slots >= t_lo) & (slots < t_hi))[0]
        margins[epoch_all] = predictor.margin_
    planner = SkipPlanner(slots, next_gap, predictor.margin_, t4)
    planner.margins = margins

    def sleep_multiples(t_now: float, _p=planner) -> int:
        j = int(np.searchsorted(_p.slots, t_now, side="right")) - 1
        if j < 0 or j >= len(_p.pred) or not np.isfinite(_p.pred[j]):
            return 1
        target = _p.slots[j] + _p.pred[j] - _p.margins[j] - t_now
        if target <= _p.t4:
            return 1
        return max(1, min(int(math.floor(target / _p.t4 + 0.5)), _p.max_multiple))

    planner.sleep_multiples = sleep_multiples  # per-epoch margins
    return planner


def _fine_tune(model: InterArrivalForecaster, gaps, slots, epochs: int) -> None:
    """A few Adam epochs on a recent window, keeping normalization fixed."""
    from .forecast import lstm_gradients

    x, y = model._build_samples(np.asarray(gaps, float), np.asarray(slots, float))
    if len(y) == 0:
        return
    xn, yn = model._normalize(x, y)
    params = model.params_
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v_) for k, v_ in params.items()}
    step = 0
    for _ in range(epochs):
        for start in range(0, len(yn), model.batch_size):
            sl = slice(start, start + model.batch_size)
            _, grads = lstm_gradients(params, xn[sl], yn[sl])
            step += 1
            bc1 = 1.0 - model.beta1**step
            bc2 = 1.0 - model.beta2**step
            for k in params:
                m[k] = model.beta1 * m[k] + (1 - model.beta1) * grads[k]
                v[k] = model.beta2 * v[k] + (1 - model.beta2) * grads[k] ** 2
                params[k] -= model.learning_rate * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + model.epsilon)
