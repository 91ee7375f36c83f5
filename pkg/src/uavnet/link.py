"""Closed-form link and propulsion models.

Every function is vectorised over numpy arrays and works in SI units
(meters, seconds, watts, Hz, bps).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

log = logging.getLogger(__name__)

LOG2E = 1.0 / np.log(2.0)


def dbm_to_watt(level):
    return 10.0 ** ((np.asarray(level, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(power):
    return 10.0 * np.log10(np.asarray(power, dtype=float)) + 30.0


def db_to_linear(level):
    return 10.0 ** (np.asarray(level, dtype=float) / 10.0)


@dataclass(frozen=True)
class PowerModelParams:
    """Rotary-wing propulsion constants (hover induced speed, blade profile, drag)."""

    hover_induced_speed: float = 5.4  # s0, m/s
    blade_profile_power: float = 3.4  # P0, W
    tip_speed: float = 60.0  # U_t, m/s
    induced_power: float = 118.0  # P_i, W
    fuselage_drag_ratio: float = 0.6  # d1
    air_density: float = 1.225  # kg/m^3
    rotor_solidity: float = 0.05
    rotor_disc_area: float = 0.503  # m^2

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError(f"power_model.{name} must be strictly positive, got {value!r}")

    @property
    def drag_coefficient(self) -> float:
        """Coefficient of the cubic parasitic term, 0.5*d1*rho*s_r*A."""
        return 0.5 * self.fuselage_drag_ratio * self.air_density * self.rotor_solidity * self.rotor_disc_area


@dataclass(frozen=True)
class Trajectory:
    """UAV ground projections ``xy[0..J]`` (row 0 is the fixed start) at altitude ``z``."""

    xy: np.ndarray
    altitude: float

    def __post_init__(self):
        xy = np.array(self.xy, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 2:
            raise ValueError(f"trajectory xy must have shape (J+1, 2), got {xy.shape}")
        xy.setflags(write=False)
        object.__setattr__(self, "xy", xy)

    @property
    def slot_count(self) -> int:
        return self.xy.shape[0] - 1

    def positions(self) -> np.ndarray:
        """Positions for slots 1..J."""
        return self.xy[1:]


def uav_vehicle_distance(p_v, p_u, z):
    p_v = np.asarray(p_v, dtype=float)
    p_u = np.asarray(p_u, dtype=float)
    diff = p_v - p_u
    return np.sqrt(np.sum(diff * diff, axis=-1) + z * z)


def channel_gain(d, d0):
    d = np.asarray(d, dtype=float)
    return d0 / (d * d)


def snr(power, d0, noise, d):
    d = np.asarray(d, dtype=float)
    return power * d0 / (noise * d * d)


def spectral_efficiency(power, d0, noise, d):
    """log2(1 + SNR) in bits/s/Hz."""
    return np.log1p(snr(power, d0, noise, d)) * LOG2E


def instantaneous_rate(kappa, bandwidth, power, d0, noise, d):
    return bandwidth * np.asarray(kappa, dtype=float) * spectral_efficiency(power, d0, noise, d)


def rate_distance_derivative(kappa, bandwidth, power, d0, noise, d):
    """Analytic d(rate)/d(distance); strictly negative whenever kappa > 0."""
    d = np.asarray(d, dtype=float)
    gamma = snr(power, d0, noise, d)
    return -2.0 * bandwidth * np.asarray(kappa, dtype=float) * gamma * LOG2E / (d * (1.0 + gamma))


def induced_power_factor(speed, hover_induced_speed):
    """The bracketed induced-power factor (sqrt(1 + S^4/(4 s0^4)) - S^2/(2 s0^2))^(1/2).

    Evaluated as (1/(sqrt(1+u^2)+u))^(1/2), u = S^2/(2 s0^2), which is the same
    quantity without the cancellation of the direct form at high speed.
    """
    s = np.asarray(speed, dtype=float)
    u = s * s / (2.0 * hover_induced_speed ** 2)
    radicand = 1.0 / (np.sqrt(1.0 + u * u) + u)
    if np.any(radicand < 0):
        if np.any(radicand < -1e-12):
            raise ArithmeticError("negative induced-power radicand")
        log.warning("clamping induced-power radicand at zero")
        radicand = np.maximum(radicand, 0.0)
    return np.sqrt(radicand)


def propulsion_plus_comm_power(speed, params: PowerModelParams, comm_power):
    s = np.asarray(speed, dtype=float)
    if np.any(s < 0):
        raise ValueError("speed must be nonnegative")
    profile = params.blade_profile_power * (1.0 + 3.0 * s * s / params.tip_speed ** 2)
    induced = params.induced_power * induced_power_factor(s, params.hover_induced_speed)
    parasite = params.drag_coefficient * s ** 3
    return comm_power + profile + induced + parasite


def max_speed_under_power(params: PowerModelParams, comm_power, budget, upper=200.0):
    """Largest speed whose power draw stays within ``budget``.

    The power curve dips below its hover value before rising, so a root search
    on [0, upper] from an affordable hover point finds the upper crossing.
    Returns 0 if hovering itself is over budget.
    """
    f = lambda s: float(propulsion_plus_comm_power(s, params, comm_power)) - budget
    if f(0.0) > 0:
        return 0.0
    if f(upper) <= 0:
        return upper
    return brentq(f, 0.0, upper, xtol=1e-12, rtol=1e-14)


def uav_speed_profile(xy, slot_length):
    """Per-slot speed ||xy[j] - xy[j-1]|| / slot_length for j = 1..J."""
    xy = np.asarray(xy.xy if isinstance(xy, Trajectory) else xy, dtype=float)
    step = np.diff(xy, axis=0)
    return np.sqrt(np.sum(step * step, axis=1)) / slot_length


def bs_distance(p_u, z, bs):
    p_u = np.asarray(p_u, dtype=float)
    bs = np.asarray(bs, dtype=float)
    dx = bs[0] - p_u[..., 0]
    dy = bs[1] - p_u[..., 1]
    dz = bs[2] - z
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def backhaul_capacity(p_u, z, bs, backhaul_bandwidth, bs_power, d0, noise_uav):
    d_b = bs_distance(p_u, z, bs)
    return backhaul_bandwidth * spectral_efficiency(bs_power, d0, noise_uav, d_b)
