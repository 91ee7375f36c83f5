import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavnet.link import (
    PowerModelParams, Trajectory, backhaul_capacity, bs_distance, channel_gain, db_to_linear, dbm_to_watt,
    induced_power_factor, instantaneous_rate, max_speed_under_power, propulsion_plus_comm_power,
    rate_distance_derivative, snr, spectral_efficiency, uav_speed_profile, uav_vehicle_distance, watt_to_dbm,
)

from . import oracles

PM = PowerModelParams()
NOISE = dbm_to_watt(-113.0)
D0 = 1e-3


def test_unit_conversions():
    assert dbm_to_watt(30.0) == pytest.approx(1.0, rel=1e-15)
    assert dbm_to_watt(57.0) == pytest.approx(501.18723362727224, rel=1e-14)
    assert watt_to_dbm(0.1) == pytest.approx(20.0, rel=1e-15)
    assert db_to_linear(-30.0) == pytest.approx(1e-3, rel=1e-15)


def test_distance_directly_overhead_is_altitude():
    assert uav_vehicle_distance([10.0, 5.0], [10.0, 5.0], 100.0) == 100.0


def test_overhead_rate_value():
    # p d0 / sigma^2 / z^2 = 0.1 * 1e-3 / 10^-14.3 / 1e4
    r = instantaneous_rate(1.0, 1e6, 0.1, D0, NOISE, 100.0)
    assert round(r, -4) == 2.093e7  # quoted to four significant figures
    ref = oracles.rate(1, 1e6, 0.1, D0, oracles.mp.mpf(10) ** (oracles.mp.mpf(-143) / 10), 100)
    assert oracles.rel_err(r, ref) < 1e-12


def test_model_formulas_against_high_precision_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        pv = rng.uniform([-100, 0], [10100, 50])
        pu = rng.uniform([0, 0], [10000, 50])
        z = rng.uniform(20, 300)
        d = uav_vehicle_distance(pv, pu, z)
        d_ref = oracles.distance(pv, pu, z)
        worst = max(worst, oracles.rel_err(d, d_ref))
        worst = max(worst, oracles.rel_err(channel_gain(d, D0), oracles.gain(d_ref, D0)))
        kappa = rng.uniform(0.01, 1)
        p = rng.uniform(0.01, 0.2)
        worst = max(worst, oracles.rel_err(instantaneous_rate(kappa, 1e6, p, D0, NOISE, d),
                                           oracles.rate(kappa, 1e6, p, D0, NOISE, d)))
    assert worst < 1e-12


def test_power_formula_against_oracle():
    rng = np.random.default_rng(3)
    speeds = np.concatenate([[0.0, 5.4, 30.0, 60.0], rng.uniform(0, 60, 200)])
    got = propulsion_plus_comm_power(speeds, PM, 0.5)
    for s, g in zip(speeds, got):
        ref = oracles.power(s, 0.5, 3.4, 60, 118, 5.4, 0.6, 1.225, 0.05, 0.503)
        assert oracles.rel_err(g, ref) < 1e-12


def test_hover_power_exact():
    assert propulsion_plus_comm_power(0.0, PM, 0.5) == pytest.approx(121.9, rel=1e-15)


def test_induced_factor_values():
    assert induced_power_factor(0.0, 5.4) == 1.0
    # direct evaluation of the radical at 30 m/s
    ref = oracles.induced_factor(30.0, 5.4)
    assert float(ref) == pytest.approx(0.179906, abs=5e-7)
    assert oracles.rel_err(induced_power_factor(30.0, 5.4), ref) < 1e-13
    # the stable form keeps full relative accuracy where the direct form cancels
    assert oracles.rel_err(induced_power_factor(2000.0, 5.4), oracles.induced_factor(2000.0, 5.4)) < 1e-13


def test_power_at_thirty_mps():
    ref = oracles.power(30.0, 0.5, 3.4, 60, 118, 5.4, 0.6, 1.225, 0.05, 0.503)
    assert propulsion_plus_comm_power(30.0, PM, 0.5) == pytest.approx(float(ref), rel=1e-13)


def test_max_speed_under_power_is_the_upper_crossing():
    budget = dbm_to_watt(57.0)
    s = max_speed_under_power(PM, 0.5, budget)
    assert propulsion_plus_comm_power(s, PM, 0.5) == pytest.approx(budget, rel=1e-10)
    assert propulsion_plus_comm_power(s + 0.01, PM, 0.5) > budget
    assert max_speed_under_power(PM, 0.5, 100.0) == 0.0  # hover alone is over budget


def test_negative_speed_rejected():
    with pytest.raises(ValueError):
        propulsion_plus_comm_power(-1.0, PM, 0.5)


def test_power_model_params_must_be_positive():
    with pytest.raises(ValueError, match="tip_speed"):
        PowerModelParams(tip_speed=0.0)


def test_backhaul_against_oracle():
    rng = np.random.default_rng(5)
    bs = (-5000.0, 0.0, 30.0)
    pb, nb = dbm_to_watt(46.0), dbm_to_watt(-110.0)
    for _ in range(100):
        pu = rng.uniform([0, 0], [10000, 50])
        got = backhaul_capacity(pu, 100.0, bs, 2e6, pb, D0, nb)
        ref = oracles.backhaul(pu, 100.0, bs, 2e6, pb, D0, nb)
        assert oracles.rel_err(got, ref) < 1e-12
    assert bs_distance([-5000.0, 0.0], 100.0, bs) == pytest.approx(70.0)


def test_rate_derivative_matches_finite_differences():
    rng = np.random.default_rng(8)
    d = rng.uniform(100, 12000, 100)
    analytic = rate_distance_derivative(0.7, 1e6, 0.1, D0, NOISE, d)
    h = 1e-5 * d
    fd = (instantaneous_rate(0.7, 1e6, 0.1, D0, NOISE, d + h) - instantaneous_rate(0.7, 1e6, 0.1, D0, NOISE, d - h)) / (2 * h)
    assert np.all(analytic < 0)
    np.testing.assert_allclose(fd, analytic, rtol=1e-6)


def test_speed_profile_and_trajectory():
    traj = Trajectory([[0, 0], [3, 4], [3, 4]], 100.0)
    np.testing.assert_allclose(uav_speed_profile(traj, 0.5), [10.0, 0.0])
    assert traj.slot_count == 2
    with pytest.raises(ValueError):
        traj.xy[0, 0] = 1.0
    with pytest.raises(ValueError):
        Trajectory([[0, 0]], 100.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 5e4), st.floats(1e-4, 1.0))
def test_snr_and_efficiency_are_consistent(d, p):
    g = snr(p, D0, NOISE, d)
    assert g > 0
    assert spectral_efficiency(p, D0, NOISE, d) == pytest.approx(np.log2(1 + g), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 2e4), st.floats(1.0, 2e4))
def test_rate_decreases_with_distance(d1, d2):
    lo, hi = sorted((d1, d2))
    assert instantaneous_rate(1.0, 1e6, 0.1, D0, NOISE, hi) <= instantaneous_rate(1.0, 1e6, 0.1, D0, NOISE, lo)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 200.0))
def test_induced_factor_bounds(s):
    f = induced_power_factor(s, 5.4)
    assert 0 < f <= 1.0
    # D^-2 = D^2 + S^2/s0^2 is the identity the trajectory subproblem relaxes
    assert 1.0 / f ** 2 == pytest.approx(f ** 2 + s ** 2 / 5.4 ** 2, rel=1e-10)
