import math  # noqa: F401 - used in oracle lambdas below
import warnings

import numpy as np
import pytest
from scipy.optimize import brentq

from wusim.config import WakeupParams
from wusim.errors import (
    DivergentSeriesError,
    InvalidParameterError,
    NoFeasibleSleepError,
)
from wusim.wakeup import (
    SchemeKind,
    build_chain,
    mean_delay,
    mean_power,
    miss_retry_factor,
    quantize_sleep,
    scheme_params,
    simulate_chain_energy,
    simulate_embedded_chain,
    solve_t4,
    steady_state_eigen,
    truncated_retry_sum,
)


class TestBuildChain:
    def test_idle_chain_alternates_sleep_and_seek(self):
        chain = build_chain(0.0, 0.0)
        assert np.allclose(chain.steady_state, [0.5, 0.0, 0.0, 0.5])

    def test_mid_point_closed_form(self):
        chain = build_chain(0.5, 0.5)
        assert np.allclose(chain.steady_state, [0.2, 0.4, 0.2, 0.2], atol=1e-15)

    def test_rows_sum_to_one_and_structure(self):
        chain = build_chain(0.3, 0.6)
        m = chain.matrix
        assert np.allclose(m.sum(axis=1), 1.0)
        # Only the wake-cycle arcs may be populated.
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 1] = mask[0, 3] = mask[1, 1] = mask[1, 2] = True
        mask[2, 1] = mask[2, 3] = mask[3, 0] = True
        assert np.all(m[~mask] == 0.0)

    def test_closed_form_matches_eigenvector_for_random_pairs(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            p_a = rng.uniform(0.0, 1.0)
            q = rng.uniform(0.0, 0.999)
            chain = build_chain(p_a, q)
            eig = steady_state_eigen(chain.matrix)
            worst = max(worst, np.max(np.abs(eig - chain.steady_state)))
        assert worst < 1e-12

    def test_sleep_and_seek_shares_equal(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            chain = build_chain(rng.uniform(0, 1), rng.uniform(0, 0.999))
            assert chain.steady_state[0] == pytest.approx(chain.steady_state[3], abs=1e-15)
            assert chain.steady_state.sum() == pytest.approx(1.0, abs=1e-12)

    def test_invalid_parameters(self):
        with pytest.raises(InvalidParameterError):
            build_chain(-0.1, 0.5)
        with pytest.raises(InvalidParameterError):
            build_chain(0.5, 1.0)

    def test_embedded_simulation_matches(self):
        chain = build_chain(0.3, 0.5)
        frac = simulate_embedded_chain(chain, 200_000, np.random.default_rng(2))
        assert np.max(np.abs(frac - chain.steady_state)) < 1e-2


class TestMeanPower:
    def test_idle_chain_hand_value(self):
        chain = build_chain(0.0, 0.0)
        got = mean_power(chain, WakeupParams(), t4=100.0)
        # 0.5*(1/14)*57 over 0.5*(1/14) + 0.5*100
        assert got == pytest.approx(0.0406852, abs=1e-6)

    def test_constant_power_collapses(self):
        chain = build_chain(0.4, 0.3)
        params = WakeupParams(pw1=5.0, pw2=5.0, pw3=5.0, pw4=5.0, t_u=0.0, t_pd=0.0)
        assert mean_power(chain, params, t4=17.0) == pytest.approx(5.0, abs=1e-12)

    def test_longer_sleep_strictly_cheaper(self):
        chain = build_chain(0.2, 0.5)
        params = WakeupParams()
        vals = [mean_power(chain, params, t4=t) for t in (10.0, 50.0, 200.0)]
        assert vals[0] > vals[1] > vals[2]

    def test_matches_trajectory_simulation(self):
        chain = build_chain(0.15, 0.5)
        params = WakeupParams(t4=40.0)
        sim = simulate_chain_energy(chain, params, 1_000_000, np.random.default_rng(3))
        closed = mean_power(chain, params)
        assert abs(sim - closed) / closed < 0.01


class TestMeanDelay:
    def test_no_activations_only_mac(self):
        chain = build_chain(0.0, 0.5)
        params = WakeupParams(t_mac=2.5)
        assert mean_delay(chain, params, t4=30.0) == pytest.approx(2.5)

    def test_hand_value(self):
        # p4 = 0.2 at (0.5, 0.5); 0.1*(45.2142857 + 50 + 0.1010101).
        chain = build_chain(0.5, 0.5)
        got = mean_delay(chain, WakeupParams(t_mac=0.0), t4=10.0)
        assert got == pytest.approx(9.5315296, abs=1e-6)

    def test_no_misses_drops_series_term(self):
        chain = build_chain(0.5, 0.5)
        a = mean_delay(chain, WakeupParams(p_md=0.0), t4=10.0)
        b = 0.2 * 0.5 * (3 * (15 + 1 / 14) + 50.0)
        assert a == pytest.approx(b, abs=1e-12)

    def test_series_matches_truncated_sum(self):
        assert miss_retry_factor(0.01) == pytest.approx(truncated_retry_sum(0.01, 10_000), abs=1e-12)

    def test_divergent_series(self):
        with pytest.raises(DivergentSeriesError):
            mean_delay(build_chain(0.5, 0.5), WakeupParams(p_md=1.0), t4=5.0)

    def test_mean_residual_switch(self):
        chain = build_chain(0.5, 0.5)
        full = mean_delay(chain, WakeupParams(), t4=10.0)
        half = mean_delay(chain, WakeupParams(delay_mean_residual=True), t4=10.0)
        assert half < full


class TestSolveT4:
    def test_reference_scenario(self):
        # Root-find oracle on the delay closed form, then the solver.
        p_a = 0.06089863257570736  # event density 1e-2, unit exponential influence
        q = 0.5
        params = WakeupParams()
        chain = build_chain(p_a, q)
        oracle = brentq(lambda t: mean_delay(chain, params, t4=t) - 30.0, 1e-6, 1e4, xtol=1e-10)
        sol = solve_t4(p_a, q, params)
        assert not sol.capped
        assert sol.t4 == pytest.approx(oracle, abs=1e-7)
        assert sol.t4 == pytest.approx(47.3, abs=0.05)

    def test_back_substitution_for_random_feasible_pairs(self):
        rng = np.random.default_rng(4)
        params = WakeupParams()
        done = 0
        while done < 50:
            p_a = rng.uniform(0.005, 0.95)
            q = rng.uniform(0.0, 0.95)
            try:
                sol = solve_t4(p_a, q, params)
            except NoFeasibleSleepError:
                continue
            if sol.capped:
                continue
            chain = build_chain(p_a, q)
            assert mean_delay(chain, params, t4=sol.t4) == pytest.approx(30.0, abs=1e-9)
            done += 1

    def test_boundary_budget_infeasible(self):
        p_a, q = 0.5, 0.5
        chain = build_chain(p_a, q)
        fixed = chain.p4 * p_a * 3.0 * (15.0 + 1.0 / 14.0)
        params = WakeupParams(delay_budget=fixed)  # budget exactly consumed at t4 -> 0
        with pytest.raises(NoFeasibleSleepError):
            solve_t4(p_a, q, params)

    def test_doubling_budget_increases_sleep(self):
        params = WakeupParams()
        a = solve_t4(0.1, 0.4, params).t4
        b = solve_t4(0.1, 0.4, params.replace(delay_budget=60.0)).t4
        assert b > a

    def test_zero_activation_caps(self):
        sol = solve_t4(0.0, 0.5, WakeupParams())
        assert sol.capped and sol.t4 == WakeupParams().t4_max


class TestQuantizeSleep:
    def test_zero(self):
        assert quantize_sleep(0.0, 10.0) == 0.0

    def test_hand_value(self):
        assert quantize_sleep(47.0, 10.0) == 50.0

    def test_exact_multiple_fixed_point(self):
        assert quantize_sleep(70.0, 10.0) == 70.0

    def test_half_rounds_away_from_zero(self):
        assert quantize_sleep(15.0, 10.0) == 20.0
        assert quantize_sleep(25.0, 10.0) == 30.0

    def test_invalid(self):
        with pytest.raises(InvalidParameterError):
            quantize_sleep(5.0, 0.0)
        with pytest.raises(InvalidParameterError):
            quantize_sleep(-1.0, 10.0)


class TestSchemeParams:
    def test_wus_and_fwus_share_sleep_period(self):
        base = WakeupParams()
        wus = scheme_params(SchemeKind.WUS, 0.06, 0.5, base)
        fwus = scheme_params(SchemeKind.FWUS, 0.06, 0.5, base)
        assert wus.t4 == fwus.t4

    def test_drx_keeps_on_window(self):
        drx = scheme_params(SchemeKind.DRX, 0.06, 0.5, WakeupParams())
        assert drx.t_on == 1.0
        assert drx.pw3 == 850.0

    def test_nonunit_inactivity_timer_forced(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = scheme_params(SchemeKind.WUS, 0.06, 0.5, WakeupParams(t3=3.0))
        assert out.t3 == 1.0
        assert any("t3" in str(w.message) for w in caught)

    def test_unknown_kind(self):
        with pytest.raises(InvalidParameterError):
            scheme_params("nope", 0.06, 0.5, WakeupParams())


def test_explicit_t4_respected():
    out = scheme_params(SchemeKind.WUS, 0.06, 0.5, WakeupParams(t4=12.0))
    assert out.t4 == 12.0


def test_retry_factor_validates():
    with pytest.raises(DivergentSeriesError):
        miss_retry_factor(1.0)
    assert miss_retry_factor(0.0) == 0.0


def test_power_degenerate_params_guard():
    chain = build_chain(0.5, 0.5)
    with pytest.raises(InvalidParameterError):
        mean_power(chain, WakeupParams(), t4=None)


def test_delay_math_scale_invariance():
    # The backlog term grows quadratically: doubling t4 more than doubles
    # the delay contribution at fixed chain parameters.
    chain = build_chain(0.3, 0.2)
    params = WakeupParams(t_mac=0.0)
    d1 = mean_delay(chain, params, t4=10.0)
    d2 = mean_delay(chain, params, t4=20.0)
    assert d2 > 2 * d1


def test_simulate_embedded_chain_is_seeded():
    chain = build_chain(0.4, 0.6)
    a = simulate_embedded_chain(chain, 10_000, np.random.default_rng(5))
    b = simulate_embedded_chain(chain, 10_000, np.random.default_rng(5))
    assert np.array_equal(a, b)
