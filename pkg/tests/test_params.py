import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvpd.errors import InvalidLifetimeError, InvalidParameterError
from nvpd.params import (
    NVParams,
    PowerScaling,
    dumps,
    from_dict,
    lifetimes,
    load,
    loads,
    params_from_lifetimes,
    save,
    to_dict,
)
from reference import nv17, nv_params


def test_isc_rate_from_tabulated_lifetime():
    p = nv17()
    assert p.gamma_es0_to_a1 == pytest.approx(1000 / 12 - 75, rel=1e-12)
    assert p.gamma_es0_to_a1 == pytest.approx(8.33, abs=5e-3)
    assert p.gamma_es1_to_a1 == pytest.approx(50.0, rel=1e-12)
    assert p.gamma_a1 == pytest.approx(1000 / 104, rel=1e-12)


def test_lifetime_equal_to_radiative_gives_zero_isc():
    p = params_from_lifetimes(75.0, 1000 / 75, 1000 / 75, 100.0, gamma_532=1.0, p_a1_to_gs1=0.3)
    assert p.gamma_es0_to_a1 == 0.0 and p.gamma_es1_to_a1 == 0.0


def test_lifetime_longer_than_radiative_is_rejected():
    with pytest.raises(InvalidLifetimeError, match="es0_tau"):
        params_from_lifetimes(75.0, 20.0, 8.0, 100.0, gamma_532=1.0, p_a1_to_gs1=0.3)
    with pytest.raises(InvalidLifetimeError):
        params_from_lifetimes(75.0, 10.0, -1.0, 100.0, gamma_532=1.0, p_a1_to_gs1=0.3)


@given(nv_params())
def test_lifetime_round_trip(p):
    es0, es1, a1 = lifetimes(p)
    q = params_from_lifetimes(
        p.gamma_es, es0, es1, a1, gamma_532=p.gamma_532, p_a1_to_gs1=p.p_a1_to_gs1,
        gamma_ion=p.gamma_ion, gamma_rec=p.gamma_rec, gamma_es_nv0=p.gamma_es_nv0,
        gamma_532_nv0=p.gamma_532_nv0,
    )
    for name in ("gamma_es1_to_a1", "gamma_es0_to_a1", "gamma_a1"):
        a, b = getattr(p, name), getattr(q, name)
        assert b == pytest.approx(a, rel=1e-12, abs=1e-12 * (p.gamma_es + a))


@pytest.mark.parametrize("field", ["gamma_532", "gamma_es", "gamma_ion", "gamma_rec", "gamma_a1"])
def test_negative_rates_rejected(field):
    base = dict(gamma_532=1, gamma_es=1, gamma_es1_to_a1=1, gamma_es0_to_a1=1, gamma_a1=1, p_a1_to_gs1=0.5)
    base[field] = -0.1
    with pytest.raises(InvalidParameterError, match=field):
        NVParams(**base)


@pytest.mark.parametrize("p", [-0.01, 1.01, math.nan])
def test_branching_ratio_range(p):
    with pytest.raises(InvalidParameterError, match="p_a1_to_gs1"):
        NVParams(1, 1, 1, 1, 1, p)


def test_nv0_pumping_defaults_to_a_third():
    p = NVParams(9.0, 1, 1, 1, 1, 0.5)
    assert p.gamma_532_nv0 == 3.0 and p.nv0_constrained
    q = p.replace(gamma_532=12.0)
    assert q.gamma_532_nv0 == 4.0
    free = NVParams(9.0, 1, 1, 1, 1, 0.5, gamma_532_nv0=1.0)
    assert not free.nv0_constrained
    assert free.replace(gamma_532=12.0).gamma_532_nv0 == 1.0


def test_json_round_trip(tmp_path):
    p = nv17()
    doc = json.loads(dumps(p))
    assert doc["units"] == {"rate": "MHz", "time": "ns", "power": "uW"}
    assert set(doc) - {"kind", "units"} == {
        "gamma_532", "gamma_es", "gamma_es1_to_a1", "gamma_es0_to_a1", "gamma_a1", "p_a1_to_gs1",
        "gamma_ion", "gamma_rec", "gamma_es_nv0", "gamma_532_nv0",
    }
    assert loads(dumps(p)) == p
    s = PowerScaling(0.03, 0.02, -1e-5, 0.01, 2e-6)
    save(s, tmp_path / "s.json")
    assert load(tmp_path / "s.json") == s


def test_json_rejects_unknown_keys_and_units():
    doc = to_dict(nv17())
    with pytest.raises(InvalidParameterError, match="bogus"):
        from_dict({**doc, "bogus": 1})
    with pytest.raises(InvalidParameterError, match="units"):
        from_dict({**doc, "units": {"rate": "GHz", "time": "ns", "power": "uW"}})


def test_power_scaling_sign_constraints():
    with pytest.raises(InvalidParameterError, match="beta_ion2"):
        PowerScaling(0.03, 0.02, beta_ion2=1e-6)
    with pytest.raises(InvalidParameterError, match="beta_rec2"):
        PowerScaling(0.03, 0.02, beta_rec2=-1e-6)


def test_power_scaling_rates_and_validity_range():
    s = PowerScaling(0.03, 0.02, -1e-5, 0.01, 2e-6)
    assert s.gamma_ion(500) == pytest.approx(0.02 * 500 - 1e-5 * 500**2)
    assert s.gamma_rec(500) == pytest.approx(0.01 * 500 + 2e-6 * 500**2)
    assert s.max_valid_power() == pytest.approx(2000)
    s.check_range([100, 1999])
    with pytest.raises(InvalidParameterError, match="negative"):
        s.check_range([2500])
    assert PowerScaling(0.03, 0.02).max_valid_power() == math.inf


@given(st.floats(1.0, 1000.0))
def test_params_at_ties_nv0_pumping(power):
    s = PowerScaling(0.03, 0.02, -1e-5, 0.01, 2e-6)
    p = s.params_at(power, nv17())
    assert p.gamma_532 == pytest.approx(0.03 * power)
    assert p.gamma_532_nv0 == p.gamma_532 / 3.0
    assert p.gamma_ion >= 0 and p.gamma_rec >= 0
    assert p.gamma_es == 75.0
