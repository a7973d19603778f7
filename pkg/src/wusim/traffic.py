"""Two-state (idle/active) traffic generation and the coordinator-side
inter-arrival stream.

Each device runs an independent idle/active chain: from idle it activates
with its per-slot probability, and once active it stays there for a
geometrically distributed number of extra slots (burst persistence q).
Packets are emitted at rate_active per slot while active and rate_idle
while idle; the coordinator sees the per-slot sum over devices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

# Above this many state cells the dense per-device state matrix is dropped
# and only arrival-slot arrays are kept.
_STATE_MATRIX_CELL_CAP = 50_000_000


@dataclass(frozen=True)
class TrafficModel:
    """Per-device traffic parameters."""

    p_a: float                 # per-slot idle -> active probability
    q: float                   # burst persistence, geometric parameter
    rate_active: float = 1.0   # packets per TTI while active
    rate_idle: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_a <= 1.0:
            raise InvalidParameterError(f"p_a must lie in [0, 1], got {self.p_a}")
        if not 0.0 <= self.q < 1.0:
            raise InvalidParameterError(f"q must lie in [0, 1), got {self.q}")
        if self.rate_active <= 0 or self.rate_idle < 0:
            raise InvalidParameterError("rate_active must be > 0 and rate_idle >= 0")


@dataclass
class TrafficTrace:
    """Slot-indexed arrivals for one run.

    ``arrivals[k]`` is the packet count the coordinator receives in slot k;
    ``inter_arrivals`` are the gaps between consecutive non-empty slots with
    the first element measured from slot 0, so cumulative sums reproduce
    ``arrival_slots`` exactly.  Simultaneous packets in one slot count as a
    single arrival event with multiplicity.
    """

    horizon: int
    arrivals: np.ndarray                 # (horizon,) packets per slot
    arrival_slots: np.ndarray            # indices of non-empty slots
    inter_arrivals: np.ndarray           # gaps, cumsum == arrival_slots
    per_device_arrival_slots: list       # one int array per device
    states: np.ndarray | None = None     # (n_dev, horizon) uint8, if small


def geometric_pmf(k: int, q: float) -> float:
    """Probability of k extra active slots: (1-q) * q**k."""
    if not 0.0 <= q < 1.0:
        raise InvalidParameterError(f"q must lie in [0, 1), got {q}")
    if k < 0:
        return 0.0
    return (1.0 - q) * q**k


def sample_sojourn(q: float, rng: np.random.Generator) -> int:
    """Extra slots spent active after the entering slot; mean q/(1-q)."""
    if not 0.0 <= q < 1.0:
        raise InvalidParameterError(f"q must lie in [0, 1), got {q}")
    if q == 0.0:
        return 0
    # numpy's geometric counts trials to first success (support >= 1).
    return int(rng.geometric(1.0 - q)) - 1


def _device_state_vector(p_a: float, q: float, horizon: int, rng) -> np.ndarray:
    """Idle/active indicator per slot for one device, starting idle."""
    states = np.zeros(horizon, dtype=np.uint8)
    if p_a <= 1e-12:
        return states
    mean_cycle = 1.0 / p_a + 1.0 / (1.0 - q)
    filled = 0
    lengths = []
    while filled < horizon:
        chunk = max(16, int((horizon - filled) / mean_cycle) + 4)
        idle = rng.geometric(p_a, size=chunk)          # slots idle before activating
        active = rng.geometric(1.0 - q, size=chunk)    # total slots per burst
        pair = np.empty(2 * chunk, dtype=np.int64)
        pair[0::2] = idle
        pair[1::2] = active
        # Blocks longer than the horizon are truncated anyway; clamping keeps
        # np.repeat from materializing astronomically long idle stretches.
        np.minimum(pair, horizon + 1, out=pair)
        lengths.append(pair)
        filled += int(pair.sum())
    lengths = np.concatenate(lengths)
    flags = np.zeros(len(lengths), dtype=np.uint8)
    flags[1::2] = 1
    full = np.repeat(flags, lengths)[:horizon]
    states[: len(full)] = full
    return states


def generate_trace(
    models: list[TrafficModel],
    horizon: int,
    rng: np.random.Generator,
    keep_states: bool | None = None,
) -> TrafficTrace:
    """Run every device's chain for `horizon` slots and aggregate arrivals.

    All devices start idle at slot 0.  Deterministic for a fixed generator
    state and model order.
    """
    if not models:
        raise InvalidParameterError("at least one traffic model is required")
    if horizon < 1:
        raise InvalidParameterError(f"horizon must be >= 1, got {horizon}")

    n = len(models)
    if keep_states is None:
        keep_states = n * horizon <= _STATE_MATRIX_CELL_CAP
    arrivals = np.zeros(horizon)
    states_mat = np.zeros((n, horizon), dtype=np.uint8) if keep_states else None
    per_device_slots = []
    for i, m in enumerate(models):
        states = _device_state_vector(m.p_a, m.q, horizon, rng)
        if states_mat is not None:
            states_mat[i] = states
        active = states.astype(bool)
        if m.rate_idle > 0.0:
            arrivals += np.where(active, m.rate_active, m.rate_idle)
            per_device_slots.append(np.arange(horizon, dtype=np.int64))
        else:
            slots = np.nonzero(active)[0]
            arrivals[slots] += m.rate_active
            per_device_slots.append(slots)
    arrival_slots = np.nonzero(arrivals > 0.0)[0]
    inter = np.diff(arrival_slots, prepend=0).astype(np.int64)
    return TrafficTrace(
        horizon=horizon,
        arrivals=arrivals,
        arrival_slots=arrival_slots,
        inter_arrivals=inter,
        per_device_arrival_slots=per_device_slots,
        states=states_mat,
    )


def stationary_active_fraction(p_a: float, q: float) -> float:
    """Long-run fraction of slots a device spends active."""
    if p_a == 0.0:
        return 0.0
    return p_a / (p_a + (1.0 - q))


def export_trace_csv(trace: TrafficTrace, path, max_slots: int | None = None) -> None:
    """Write (slot, device_id, state, packets) rows; needs kept states."""
    if trace.states is None:
        raise InvalidParameterError("trace was generated without the state matrix")
    horizon = trace.horizon if max_slots is None else min(trace.horizon, max_slots)
    n = trace.states.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "device_id", "state", "packets"])
        for slot in range(horizon):
            for dev in range(n):
                state = "A" if trace.states[dev, slot] else "I"
                packets = 1 if trace.states[dev, slot] else 0
                writer.writerow([slot, dev, state, packets])


def lag1_autocorrelation(series: np.ndarray) -> float:
    """Lag-1 autocorrelation of a rate series (nan-safe for constants)."""
    x = np.asarray(series, dtype=float)
    if len(x) < 2:
        return 0.0
    x = x - x.mean()
    denom = float(np.dot(x, x))
    if denom == 0.0:
        return 0.0
    return float(np.dot(x[:-1], x[1:]) / denom)


def mean_sojourn(q: float) -> float:
    """Expected extra active slots after the entering slot."""
    if not 0.0 <= q < 1.0:
        raise InvalidParameterError(f"q must lie in [0, 1), got {q}")
    return q / (1.0 - q)


def validate_reconstruction(trace: TrafficTrace) -> bool:
    """Check that inter-arrival cumsums reproduce the arrival slots."""
    return bool(np.array_equal(np.cumsum(trace.inter_arrivals), trace.arrival_slots))


__all__ = [
    "TrafficModel",
    "TrafficTrace",
    "geometric_pmf",
    "sample_sojourn",
    "generate_trace",
    "stationary_active_fraction",
    "export_trace_csv",
    "lag1_autocorrelation",
    "mean_sojourn",
    "validate_reconstruction",
]
