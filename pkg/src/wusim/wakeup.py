"""Four-state semi-Markov wake-up model: steady state, mean power, mean
delay, and the sleep-period solver shared by the WuS-style schemes.

States: S1 beacon-seek (WRx-On), S2 active decoding, S3 inactivity timer,
S4 sleep.  Transitions: S1 -> S2 with the activation probability (else back
to sleep), S2 self-loops and S3 returns to S2 with the burst persistence q,
S4 -> S1 always.  Sojourn times are the fixed t1..t4; the start-up and
power-down transitions are charged half their plateau power (ramp).
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .config import WakeupParams
from .errors import (
    DegenerateChainError,
    DivergentSeriesError,
    InvalidParameterError,
    NoFeasibleSleepError,
)


class SchemeKind(enum.Enum):
    DRX = "drx"
    WUS = "wus"
    FWUS = "fwus"


@dataclass(frozen=True)
class SemiMarkovChain:
    """Embedded transition matrix, per-visit steady state, and parameters."""

    p_a: float
    q: float
    matrix: np.ndarray          # 4x4, rows S1..S4
    steady_state: np.ndarray    # per-visit probabilities p1..p4

    @property
    def p4(self) -> float:
        return float(self.steady_state[3])


def build_chain(p_a: float, q: float) -> SemiMarkovChain:
    """Construct the wake-up chain and its closed-form steady state.

    Steady state: p1 = p4 = (1-q)^2 / L, p2 = p_a / L, p3 = p_a (1-q) / L
    with L = 2 p_a - 4 q - q p_a + 2 q^2 + 2.  q -> 1 degenerates L.
    """
    if not 0.0 <= p_a <= 1.0:
        raise InvalidParameterError(f"p_a must lie in [0, 1], got {p_a}")
    if not 0.0 <= q < 1.0:
        raise InvalidParameterError(f"q must lie in [0, 1), got {q}")
    matrix = np.array(
        [
            [0.0, p_a, 0.0, 1.0 - p_a],
            [0.0, q, 1.0 - q, 0.0],
            [0.0, q, 0.0, 1.0 - q],
            [1.0, 0.0, 0.0, 0.0],
        ]
    )
    norm = 2.0 * p_a - 4.0 * q - q * p_a + 2.0 * q * q + 2.0
    if norm <= 0.0:
        raise InvalidParameterError(f"degenerate chain normalization {norm} for p_a={p_a}, q={q}")
    one_minus_q_sq = (1.0 - q) ** 2
    steady = np.array([one_minus_q_sq, p_a, p_a * (1.0 - q), one_minus_q_sq]) / norm
    return SemiMarkovChain(p_a=p_a, q=q, matrix=matrix, steady_state=steady)


def steady_state_eigen(matrix: np.ndarray) -> np.ndarray:
    """Left eigenvector of the transition matrix for eigenvalue 1.

    Solved as the null space of (P^T - I) with the normalization row
    appended; used as an independent cross-check of the closed form.
    """
    n = matrix.shape[0]
    a = np.vstack([matrix.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    return sol


def simulate_embedded_chain(
    chain: SemiMarkovChain, steps: int, rng: np.random.Generator
) -> np.ndarray:
    """Visit fractions of a long embedded-chain walk (starts in S4)."""
    counts = np.zeros(4, dtype=np.int64)
    state = 3
    u = rng.random(steps)
    m = chain.matrix
    for k in range(steps):
        counts[state] += 1
        row = m[state]
        c = u[k]
        if c < row[0]:
            state = 0
        elif c < row[0] + row[1]:
            state = 1
        elif c < row[0] + row[1] + row[2]:
            state = 2
        else:
            state = 3
    return counts / steps


def _sojourns(params: WakeupParams, t4: float | None = None) -> np.ndarray:
    t4_val = params.t4 if t4 is None else t4
    if t4_val is None or t4_val <= 0:
        raise InvalidParameterError("t4 must be set and > 0")
    return np.array([params.t1, params.t2, params.t3, t4_val])


def mean_power(chain: SemiMarkovChain, params: WakeupParams, t4: float | None = None) -> float:
    """Time-average power (mW) of the wake-up cycle.

    Weighted state powers plus half-power ramp charges for the start-up
    (into decoding) and power-down (out of the inactivity timer), divided
    by the mean cycle time including those transitions.
    """
    p = chain.steady_state
    t = _sojourns(params, t4)
    pw = np.array([params.pw1, params.pw2, params.pw3, params.pw4])
    p12 = chain.matrix[0, 1]
    p34 = chain.matrix[2, 3]
    up = p[0] * p12 * params.t_u
    down = p[2] * p34 * params.t_pd
    num = float(np.dot(p * t, pw)) + 0.5 * (up * params.pw2 + down * params.pw3)
    den = up + down + float(np.dot(p, t))
    if den <= 0.0:
        raise DegenerateChainError("all sojourn and transition weights are zero")
    return num / den


def miss_retry_factor(p_md: float) -> float:
    """Closed form of sum_{n>=1} p_md^n, the expected extra beacon waits."""
    if p_md >= 1.0:
        raise DivergentSeriesError(f"p_md must be < 1, got {p_md}")
    if p_md < 0.0:
        raise InvalidParameterError(f"p_md must be >= 0, got {p_md}")
    return p_md / (1.0 - p_md)


def mean_delay(chain: SemiMarkovChain, params: WakeupParams, t4: float | None = None) -> float:
    """Model mean packet delay (TTI) for a given sleep period.

    Three contributions, each entered with weight p4 * p_a: the wake ramp
    3(t_u + t1), the sleep backlog term t4^2/2 (or t4/2 with the
    delay_mean_residual switch), and the miss-detection retries
    t4 * p_md/(1 - p_md).  The MAC delay t_mac is added unconditionally.
    """
    t4_val = params.t4 if t4 is None else t4
    if t4_val is None or t4_val < 0:
        raise InvalidParameterError("t4 must be set and >= 0")
    retry = miss_retry_factor(params.p_md)
    backlog = t4_val / 2.0 if params.delay_mean_residual else t4_val * t4_val / 2.0
    weight = chain.p4 * chain.p_a
    return weight * (3.0 * (params.t_u + params.t1) + backlog + retry * t4_val) + params.t_mac


class SleepSolution(NamedTuple):
    t4: float
    capped: bool


def solve_t4(p_a: float, q: float, params: WakeupParams) -> SleepSolution:
    """Largest sleep period whose model mean delay meets the budget exactly.

    With the quadratic backlog term this is the positive root of
    w*(t4^2/2 + c*t4) = budget - w*3(t_u+t1) - t_mac, w = p4*p_a and
    c = p_md/(1-p_md).  Returns (t4_max, capped=True) when traffic is zero
    (the budget never binds); raises NoFeasibleSleepError when even t4 -> 0
    exceeds the budget.  t3 is pinned to one TTI by the scheme design; a
    differing value only affects the chain through its sojourn, not the
    delay, so it is accepted here.
    """
    chain = build_chain(p_a, q)
    w = chain.p4 * p_a
    c = miss_retry_factor(params.p_md)
    budget = params.delay_budget - params.t_mac
    if w <= 0.0:
        return SleepSolution(params.t4_max, True)
    slack = budget - w * 3.0 * (params.t_u + params.t1)
    if slack <= 0.0:
        raise NoFeasibleSleepError(
            f"delay budget {params.delay_budget} cannot be met: fixed wake cost uses it up"
        )
    if params.delay_mean_residual:
        t4 = slack / (w * (0.5 + c))
    else:
        t4 = -c + math.sqrt(c * c + 2.0 * slack / w)
    if t4 <= 0.0:
        raise NoFeasibleSleepError("no positive sleep time meets the delay budget")
    if t4 > params.t4_max:
        return SleepSolution(params.t4_max, True)
    return SleepSolution(t4, False)


def quantize_sleep(t_sleep: float, t4: float) -> float:
    """Round a requested sleep to the nearest multiple of the beacon period.

    Ties round half away from zero, favouring the longer sleep.
    """
    if t4 <= 0:
        raise InvalidParameterError(f"t4 must be > 0, got {t4}")
    if t_sleep < 0:
        raise InvalidParameterError(f"t_sleep must be >= 0, got {t_sleep}")
    n = math.floor(t_sleep / t4 + 0.5)
    return n * t4


def scheme_params(
    kind: SchemeKind,
    p_a: float,
    q: float,
    base: WakeupParams,
) -> WakeupParams:
    """Parameterize one scheme from the shared base.

    WUS solves t4 from the delay budget and keeps it static; FWUS shares
    the same t4 (it extends sleep only in whole multiples of it); DRX keeps
    the same cycle period but replaces the beacon-seek by a t_on window at
    the inactivity-timer power level.  The inactivity timer is pinned to
    one TTI for every scheme.
    """
    if not isinstance(kind, SchemeKind):
        raise InvalidParameterError(f"unknown scheme kind {kind!r}")
    base.validate()
    out = base
    if base.t3 != 1.0:
        warnings.warn("inactivity timer t3 forced to 1 TTI", stacklevel=2)
        out = out.replace(t3=1.0)
    if out.t4 is None:
        sol = solve_t4(p_a, q, out)
        out = out.replace(t4=sol.t4)
    return out


def simulate_chain_energy(
    chain: SemiMarkovChain,
    params: WakeupParams,
    cycles: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo mean power from a trajectory of the semi-Markov walk.

    Accumulates sojourn-weighted state powers plus the ramp charges along
    `cycles` full sleep/wake cycles; independent of the closed form, used
    to validate mean_power.
    """
    t = _sojourns(params)
    pw = np.array([params.pw1, params.pw2, params.pw3, params.pw4])
    energy = 0.0
    elapsed = 0.0
    wake = rng.random(cycles) < chain.p_a
    for k in range(cycles):
        # S4 then S1 every cycle.
        energy += t[3] * pw[3] + t[0] * pw[0]
        elapsed += t[3] + t[0]
        if not wake[k]:
            continue
        energy += 0.5 * params.t_u * params.pw2
        elapsed += params.t_u
        while True:
            # One decoding run: geometric number of S2 slots.
            n2 = rng.geometric(1.0 - chain.q) if chain.q > 0.0 else 1
            energy += n2 * t[1] * pw[1]
            elapsed += n2 * t[1]
            energy += t[2] * pw[2]
            elapsed += t[2]
            if not (chain.q > 0.0 and rng.random() < chain.q):
                break
        energy += 0.5 * params.t_pd * params.pw3
        elapsed += params.t_pd
    return energy / elapsed


def truncated_retry_sum(p_md: float, terms: int) -> float:
    """Partial sum of the miss-retry series, for validating the closed form."""
    n = np.arange(1, terms + 1)
    return float(np.sum(p_md**n))
