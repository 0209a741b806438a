import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvpd.errors import InvalidParameterError, InvalidStateError, NonFiniteError
from nvpd.kinetics import (
    ChargeRates,
    ChargeState,
    FourLevelParams,
    evolve_charge,
    fit_exponential_decay,
    fit_power_law,
    four_level_generator,
    loglog_slope,
    read_decay_csv,
    read_power_csv,
    reduce_four_level,
    split_rates,
    total_rate,
    write_two_column_csv,
)
from oracles import charge_euler

pos = st.floats(0.0, 500.0)


def r_m4(g12, g21, g23, g34, g43, g41):
    """Four-level generator written out from its scalar equations."""
    return np.array([
        [-g12, g21, 0, g41],
        [g12, -g21 - g23, 0, 0],
        [0, g23, -g34, g43],
        [0, 0, g34, -g43 - g41],
    ], dtype=float)


def slow_rate(m):
    w = np.sort(np.abs(np.linalg.eigvals(m).real))
    return w[1]


# --- two-level model ----------------------------------------------------------

def test_charge_state_invariants():
    with pytest.raises(InvalidStateError):
        ChargeState(0.6, 0.6)
    with pytest.raises(InvalidStateError):
        ChargeState(1.1, -0.1)
    assert ChargeState.from_minus(0.3).rho_zero == pytest.approx(0.7)
    with pytest.raises(InvalidParameterError):
        ChargeRates(-1.0, 0.0)


def test_total_rate_and_split():
    assert total_rate(ChargeRates(0, 0)) == 0
    assert total_rate(ChargeRates(5, 3)) == 8
    r = split_rates(8, 0.375)
    assert (r.r_ion, r.r_rec) == (5, 3)
    r = split_rates(4.0, 1.0)
    assert (r.r_ion, r.r_rec) == (0, 4.0)
    with pytest.raises(InvalidParameterError):
        split_rates(-1, 0.5)
    with pytest.raises(InvalidParameterError):
        split_rates(1, 1.5)


@given(st.floats(0, 1e4), st.floats(0, 1))
def test_split_round_trip(r_tot, rho):
    r = split_rates(r_tot, rho)
    assert total_rate(r) == pytest.approx(r_tot, rel=1e-12, abs=1e-12)
    if r_tot > 0:
        assert r.rho_minus_equilibrium == pytest.approx(rho, abs=1e-12)


def test_fig2_time_constants_span_rate_band():
    # 11-300 ms decay constants
    assert 1 / 0.300 == pytest.approx(3.33, abs=0.01)
    assert 1 / 0.011 == pytest.approx(90.9, abs=0.1)


def test_no_conversion_is_static():
    s = ChargeState(0.8, 0.2)
    assert evolve_charge(ChargeRates(0, 0), s, 123.0) == s


@given(st.floats(0.01, 100), st.floats(0, 1))
def test_symmetric_rates(r, t):
    s = evolve_charge(ChargeRates(r, r), ChargeState(1, 0), t)
    assert s.rho_minus == pytest.approx(0.5 * (1 + math.exp(-2 * r * t)), abs=1e-12)


def test_matches_explicit_integration():
    rng = np.random.default_rng(3)
    for _ in range(10):
        ri, rr = rng.uniform(0, 100, 2)
        x0 = rng.uniform()
        t = rng.uniform(0, 0.1)
        got = evolve_charge(ChargeRates(ri, rr), ChargeState.from_minus(x0), t)
        assert got.rho_minus == pytest.approx(charge_euler(ri, rr, x0, t, n=20000), abs=1e-9)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 1),
       st.lists(st.floats(0, 1), min_size=2, max_size=10))
def test_monotone_relaxation_and_conservation(ri, rr, x0, ts):
    rates = ChargeRates(ri, rr)
    ts = sorted(ts)
    states = [evolve_charge(rates, ChargeState.from_minus(x0), t) for t in ts]
    for s in states:
        assert s.rho_minus + s.rho_zero == 1.0 or abs(s.rho_minus + s.rho_zero - 1) <= 1e-15
    if ri + rr > 0:
        eq = rr / (ri + rr)
        gaps = [abs(s.rho_minus - eq) for s in states]
        assert all(b <= a + 1e-15 for a, b in zip(gaps, gaps[1:]))


def test_negative_time_rejected():
    with pytest.raises(InvalidParameterError):
        evolve_charge(ChargeRates(1, 1), ChargeState(1, 0), -1)


# --- exponential fit ------------------------------------------------------------

def test_exact_decay_recovered():
    t = np.linspace(0, 0.25, 20)
    y = 2.0 * np.exp(-t / 0.05) + 0.5
    fit = fit_exponential_decay(np.column_stack([t, y]))
    assert fit.amplitude == pytest.approx(2.0, rel=1e-6)
    assert fit.rate == pytest.approx(20.0, rel=1e-6)
    assert fit.offset == pytest.approx(0.5, rel=1e-6)
    assert fit.residual < 1e-6


def test_constant_series():
    t = np.linspace(0, 1, 10)
    fit = fit_exponential_decay(np.column_stack([t, np.full(10, 0.7)]))
    assert (fit.amplitude, fit.rate) == (0.0, 0.0)
    assert fit.offset == pytest.approx(0.7)


@pytest.mark.parametrize("r_tot", [40.0])
def test_decay_generated_by_charge_model(r_tot):
    rates = split_rates(r_tot, 0.4)
    t = np.linspace(0, 0.15, 30)
    y = [evolve_charge(rates, ChargeState(1, 0), ti).rho_minus for ti in t]
    fit = fit_exponential_decay(np.column_stack([t, y]))
    assert fit.rate == pytest.approx(r_tot, rel=1e-6)
    assert fit.offset == pytest.approx(0.4, abs=1e-6)


def test_decay_sampled_away_from_origin():
    t = np.linspace(0.3, 0.6, 25)
    y = 1.5 * np.exp(-7.0 * t) + 0.2
    fit = fit_exponential_decay(np.column_stack([t, y]))
    assert fit.rate == pytest.approx(7.0, rel=1e-6)
    assert fit.amplitude == pytest.approx(1.5, rel=1e-6)


def test_exponential_fit_errors():
    with pytest.raises(InvalidParameterError):
        fit_exponential_decay([[0, 1], [1, 0.5], [2, 0.3]])
    with pytest.raises(NonFiniteError):
        fit_exponential_decay([[0, 1], [1, np.nan], [2, 0.3], [3, 0.2]])
    with pytest.raises(InvalidParameterError):
        fit_exponential_decay([[0, 1], [2, 0.5], [1, 0.3], [3, 0.2]])


# --- power law ------------------------------------------------------------------

def test_power_law_exact_cases():
    p = np.array([100.0, 200.0, 400.0, 800.0])
    f = fit_power_law(np.column_stack([p, 2 * p**2]))
    assert (f.a, f.b) == (pytest.approx(2, rel=1e-9), pytest.approx(0, abs=1e-9))
    f = fit_power_law(np.column_stack([p, 3 * p]))
    assert (f.a, f.b) == (pytest.approx(0, abs=1e-9), pytest.approx(3, rel=1e-9))
    assert f(np.array([10.0])) == pytest.approx([30.0])


def test_power_law_coefficients_nonnegative():
    p = np.array([1.0, 2.0, 3.0, 4.0])
    f = fit_power_law(np.column_stack([p, 5 * p - 0.3 * p**2]))
    assert f.a >= 0 and f.b >= 0


def test_power_law_errors():
    with pytest.raises(InvalidParameterError, match="rank"):
        fit_power_law([[2.0, 1.0], [2.0, 1.1], [2.0, 0.9]])
    with pytest.raises(InvalidParameterError):
        fit_power_law([[1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(InvalidParameterError):
        fit_power_law([[0.0, 1.0], [1.0, 2.0], [2.0, 3.0]])


# --- four-level reduction -----------------------------------------------------

def test_generator_matches_scalar_form():
    p = FourLevelParams(1, 2, 3, 4, 5, 6)
    assert np.array_equal(four_level_generator(p), r_m4(1, 2, 3, 4, 5, 6))
    assert np.allclose(four_level_generator(p).sum(axis=0), 0)


def test_no_ionization_channel():
    red = reduce_four_level(FourLevelParams(10, 60, 0, 5, 30, 0.01))
    assert red.rates.r_ion == 0


def test_saturation_gives_direct_rate():
    g23 = 0.02
    red = reduce_four_level(FourLevelParams(1e6, 60, g23, 5, 30, 0.01))
    assert red.rates.r_ion == pytest.approx(g23 * 1e6, rel=1e-4)


def test_reduction_errors():
    with pytest.raises(InvalidParameterError):
        reduce_four_level(FourLevelParams(0, 0, 1, 1, 1, 1))
    with pytest.raises(InvalidParameterError):
        FourLevelParams(-1, 0, 0, 0, 0, 0)


def test_reduction_matches_slow_eigenvalue():
    rng = np.random.default_rng(17)
    checked = 0
    for _ in range(300):
        g12, g21, g34, g43 = np.exp(rng.uniform(np.log(0.5), np.log(200), 4))
        d = min(g12 + g21, g34 + g43)
        g23, g41 = rng.uniform(0, 0.0099 * d, 2)
        if g23 + g41 == 0:
            continue
        red = reduce_four_level(FourLevelParams(g12, g21, g23, g34, g43, g41))
        assert red.valid
        slow = slow_rate(r_m4(g12, g21, g23, g34, g43, g41)) * 1e6
        assert red.rates.r_tot == pytest.approx(slow, rel=0.05)
        checked += 1
    assert checked > 250


def test_validity_flag_cleared_without_separation():
    assert not reduce_four_level(FourLevelParams(1, 1, 5, 1, 1, 5)).valid


def _r_tot(powers, c, d, e, f, g21=80.0, g43=50.0):
    out = []
    for p in powers:
        red = reduce_four_level(FourLevelParams(c * p, g21, d * p, e * p, g43, f * p))
        out.append(red.rates.r_tot)
    return np.array(out)


def test_quadratic_regime():
    p = np.geomspace(10, 100, 12)
    r = _r_tot(p, 1e-3, 1e-4, 1e-3, 1e-4)
    assert 1.9 <= loglog_slope(p, r) <= 2.1
    fit = fit_power_law(np.column_stack([p, r]))
    assert 1.9 <= loglog_slope(p, fit(p)) <= 2.1


def test_linear_regime():
    p = np.geomspace(10, 100, 12)
    r = _r_tot(p, 1e3, 1e-4, 1e3, 1e-4)
    assert 0.9 <= loglog_slope(p, r) <= 1.1


# --- io -------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    rows = [(0.0, 1.0), (0.01, 0.9), (0.02, 0.85)]
    write_two_column_csv(tmp_path / "d.csv", ("time_s", "normalized_pl"), rows)
    assert np.allclose(read_decay_csv(tmp_path / "d.csv"), rows)
    with pytest.raises(InvalidParameterError, match="header"):
        read_power_csv(tmp_path / "d.csv")
