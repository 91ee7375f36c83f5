"""Scenario construction: vehicle sampling, kinematics, and JSON loading."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from .link import PowerModelParams, db_to_linear, dbm_to_watt

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    """Raised when a scenario document or configuration is invalid."""


def sample_speeds(count, min_s, max_s, mean, stddev, seed):
    """Draw ``count`` i.i.d. speeds from N(mean, stddev^2) truncated to [min_s, max_s].

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if min_s > max_s:
        raise ValueError(f"min_s={min_s} exceeds max_s={max_s}")
    if stddev < 0:
        raise ValueError("stddev must be nonnegative")
    if count < 0:
        raise ValueError("count must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if stddev == 0 or min_s == max_s:
        if not (min_s <= mean <= max_s) and min_s != max_s:
            raise ValueError(f"degenerate distribution: mean {mean} outside [{min_s}, {max_s}]")
        value = min_s if min_s == max_s else mean
        return np.full(count, float(value))
    a = (min_s - mean) / stddev
    b = (max_s - mean) / stddev
    draws = truncnorm.rvs(a, b, loc=mean, scale=stddev, size=count, random_state=rng)
    # ppf round-off can land a hair outside the interval
    return np.clip(np.asarray(draws, dtype=float), min_s, max_s)


def classify_vehicles(speeds, speed_limit):
    """Split vehicle indices into (high-speed, normal) using a strict ``> speed_limit``."""
    speeds = np.asarray(speeds, dtype=float)
    if speeds.size == 0:
        raise ValueError("speeds must be nonempty")
    fast = [i for i, s in enumerate(speeds) if s > speed_limit]
    normal = [i for i, s in enumerate(speeds) if not s > speed_limit]
    if not normal:
        warnings.warn("no normal-speed vehicles: the max-min objective is undefined", stacklevel=2)
    return fast, normal


def propagate_positions(x0, speed, slot_length, slot_count):
    """Positions x[1..J] of a constant-speed vehicle starting at ``x0``."""
    if slot_length <= 0:
        raise ValueError("slot_length must be positive")
    x = np.empty(slot_count)
    pos = float(x0)
    for j in range(slot_count):
        pos = pos + speed * slot_length
        x[j] = pos
    return x


def presence_mask(x_positions, road_length):
    x = np.asarray(x_positions, dtype=float)
    return (x >= 0.0) & (x <= road_length)


@dataclass(frozen=True)
class VehicleTrack:
    speed: float
    lane_y: float
    initial_x: float
    x_positions: np.ndarray
    present: np.ndarray
    high_speed: bool
    rate_floor: float | None = None  # overrides the scenario-wide floor when set

    def __post_init__(self):
        for name in ("x_positions", "present"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def positions(self) -> np.ndarray:
        """(J, 2) array of ground positions for slots 1..J."""
        return np.column_stack([self.x_positions, np.full(self.x_positions.shape, self.lane_y)])


def make_track(speed, lane_y, initial_x, slot_length, slot_count, road_length, speed_limit, rate_floor=None):
    x = propagate_positions(initial_x, speed, slot_length, slot_count)
    return VehicleTrack(
        speed=float(speed),
        lane_y=float(lane_y),
        initial_x=float(initial_x),
        x_positions=x,
        present=presence_mask(x, road_length),
        high_speed=bool(speed > speed_limit),
        rate_floor=None if rate_floor is None else float(rate_floor),
    )


@dataclass(frozen=True)
class SamplerSpec:
    seed: int = 7
    high_speed_count: int = 2
    normal_count: int = 3
    mean: float | None = None
    stddev: float | None = None
    initial_x_max: float | None = None
    lanes: int = 4
    # optional explicit speed bands for the high-speed vehicles, fastest first
    high_speed_bands: tuple | None = None


@dataclass(frozen=True)
class SolverSettings:
    epsilon: float = 1e-4
    max_outer: int = 20
    max_sca: int = 50
    barrier_mu: float = 10.0
    initial_t: float = 1.0
    gap_tol: float = 1e-8
    feas_tol: float = 1e-9
    max_newton: int = 3000


@dataclass(frozen=True)
class ScenarioConfig:
    road_length: float
    road_width: float
    flight_duration: float
    slot_count: int
    slot_length: float
    uav_altitude: float
    uav_initial_xy: tuple
    uav_max_speed: float
    power_budget: float
    comm_power_per_vehicle: float
    total_bandwidth: float
    backhaul_bandwidth: float
    bs_position: tuple
    bs_power: float
    noise_vehicle: float
    noise_uav: float
    reference_gain: float
    rate_floor: float
    speed_limit: float
    speed_bounds: tuple
    vehicles: tuple
    power_model: PowerModelParams = field(default_factory=PowerModelParams)
    solver: SolverSettings = field(default_factory=SolverSettings)
    sampler: SamplerSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        object.__setattr__(self, "uav_initial_xy", tuple(float(v) for v in self.uav_initial_xy))
        object.__setattr__(self, "bs_position", tuple(float(v) for v in self.bs_position))
        object.__setattr__(self, "speed_bounds", tuple(float(v) for v in self.speed_bounds))
        self.validate()

    @property
    def vehicle_count(self) -> int:
        return len(self.vehicles)

    @property
    def total_comm_power(self) -> float:
        """P = p * V."""
        return self.comm_power_per_vehicle * self.vehicle_count

    @property
    def high_speed(self) -> list:
        return [i for i, v in enumerate(self.vehicles) if v.high_speed]

    @property
    def normal(self) -> list:
        return [i for i, v in enumerate(self.vehicles) if not v.high_speed]

    def presence(self) -> np.ndarray:
        """(V, J) boolean presence matrix."""
        if not self.vehicles:
            return np.zeros((0, self.slot_count), dtype=bool)
        return np.vstack([v.present for v in self.vehicles])

    def vehicle_positions(self) -> np.ndarray:
        """(V, J, 2) ground positions."""
        return np.stack([v.positions() for v in self.vehicles])

    def rate_floors(self) -> np.ndarray:
        return np.array([self.rate_floor if v.rate_floor is None else v.rate_floor for v in self.vehicles])

    def validate(self, require_normal=True):
        positive = (
            "road_length", "road_width", "flight_duration", "slot_length", "uav_altitude",
            "uav_max_speed", "power_budget", "comm_power_per_vehicle", "total_bandwidth",
            "backhaul_bandwidth", "bs_power", "noise_vehicle", "noise_uav", "reference_gain",
            "speed_limit",
        )
        for name in positive:
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ScenarioError(f"{name} must be strictly positive, got {value!r}")
        if self.rate_floor < 0:
            raise ScenarioError(f"rate_floor must be nonnegative, got {self.rate_floor!r}")
        if self.slot_count < 1:
            raise ScenarioError("slot_count must be at least 1")
        if not math.isclose(self.flight_duration, self.slot_count * self.slot_length, rel_tol=1e-12):
            raise ScenarioError(
                f"T_D != J*Delta: flight_duration={self.flight_duration}, "
                f"slot_count={self.slot_count}, slot_length={self.slot_length}"
            )
        lo, hi = self.speed_bounds
        if lo > hi:
            raise ScenarioError(f"speed_bounds: min_s={lo} exceeds max_s={hi}")
        x0, y0 = self.uav_initial_xy
        if not (0 <= x0 <= self.road_length and 0 <= y0 <= self.road_width):
            raise ScenarioError(f"uav_initial_xy {self.uav_initial_xy} outside the road box")
        for k, v in enumerate(self.vehicles):
            if len(v.x_positions) != self.slot_count:
                raise ScenarioError(f"vehicles[{k}] has {len(v.x_positions)} positions, expected {self.slot_count}")
            if not (lo - 1e-9 <= v.speed <= hi + 1e-9):
                raise ScenarioError(f"vehicles[{k}].speed={v.speed} outside speed_bounds {self.speed_bounds}")
        if require_normal and self.vehicles and not self.normal:
            raise ScenarioError("vehicles: no normal-speed vehicle, objective undefined")


def lane_positions(road_width, lanes):
    return [road_width * (2 * k + 1) / (2 * lanes) for k in range(lanes)]


def sample_tracks(spec: SamplerSpec, *, road_length, road_width, slot_length, slot_count,
                  speed_limit, speed_bounds):
    """Sample vehicles hitting the requested class counts exactly.

    High-speed vehicles come first, drawn from the truncation to (S_V, max_s];
    normal vehicles from [min_s, S_V].
    """
    lo, hi = speed_bounds
    mean = (lo + hi) / 2 if spec.mean is None else spec.mean
    std = (hi - lo) / 4 if spec.stddev is None else spec.stddev
    x_max = road_length / 10 if spec.initial_x_max is None else spec.initial_x_max
    rng = np.random.default_rng(spec.seed)

    fast_lo = np.nextafter(speed_limit, np.inf)
    if spec.high_speed_count and fast_lo > hi:
        raise ScenarioError("sampler: high-speed vehicles requested but speed_limit >= max_s")
    if spec.normal_count and speed_limit < lo:
        raise ScenarioError("sampler: normal vehicles requested but speed_limit < min_s")
    if spec.high_speed_bands:
        if len(spec.high_speed_bands) != spec.high_speed_count:
            raise ScenarioError("sampler.high_speed_bands must list one band per high-speed vehicle")
        fast = []
        for b_lo, b_hi in spec.high_speed_bands:
            fast.extend(sample_speeds(1, max(float(b_lo), fast_lo), float(b_hi), mean, std, rng))
        fast = np.array(fast)
    else:
        fast = sample_speeds(spec.high_speed_count, fast_lo, hi, mean, std, rng)
    slow = sample_speeds(spec.normal_count, lo, min(speed_limit, hi), mean, std, rng)
    speeds = np.concatenate([fast, slow])
    starts = rng.uniform(0.0, x_max, size=speeds.size)
    lanes = lane_positions(road_width, spec.lanes)
    return tuple(
        make_track(s, lanes[k % spec.lanes], x0, slot_length, slot_count, road_length, speed_limit)
        for k, (s, x0) in enumerate(zip(speeds, starts))
    )


def _power(block, where):
    """Read a power given as exactly one of {'dbm': .., 'watts': ..}."""
    if not isinstance(block, dict):
        raise ScenarioError(f"{where}: expected an object with 'dbm' or 'watts'")
    keys = {"dbm", "watts"} & set(block)
    if len(keys) != 1:
        raise ScenarioError(f"{where}: exactly one of 'dbm' or 'watts' is required")
    if "dbm" in block:
        return float(dbm_to_watt(block["dbm"]))
    return float(block["watts"])


def _gain(block, where):
    if not isinstance(block, dict):
        raise ScenarioError(f"{where}: expected an object with 'db' or 'linear'")
    keys = {"db", "linear"} & set(block)
    if len(keys) != 1:
        raise ScenarioError(f"{where}: exactly one of 'db' or 'linear' is required")
    return float(db_to_linear(block["db"])) if "db" in block else float(block["linear"])


def _get(doc, path):
    node = doc
    for key in path.split("."):
        if not isinstance(node, dict) or key not in node:
            raise ScenarioError(f"missing field '{path}'")
        node = node[key]
    return node


def scenario_from_dict(doc, seed=None):
    """Build a validated ScenarioConfig from a parsed scenario document.

    ``seed`` overrides ``vehicles.sampler.seed`` when the document uses a sampler.
    """
    for key in ("road", "time", "uav", "bs", "link", "vehicles"):
        if key not in doc:
            raise ScenarioError(f"missing top-level key '{key}'")
    road_length = float(_get(doc, "road.length_m"))
    road_width = float(_get(doc, "road.width_m"))
    duration = float(_get(doc, "time.flight_duration_s"))
    slots = _get(doc, "time.slot_count")
    if not isinstance(slots, int) or isinstance(slots, bool):
        raise ScenarioError("time.slot_count must be an integer")
    slot_length = float(doc["time"].get("slot_length_s", duration / slots if slots else float("nan")))

    veh = doc["vehicles"]
    speed_limit = float(_get(doc, "vehicles.speed_limit_mps"))
    bounds = tuple(float(v) for v in _get(doc, "vehicles.speed_bounds_mps"))
    if len(bounds) != 2:
        raise ScenarioError("vehicles.speed_bounds_mps must be [min, max]")
    if bounds[0] > bounds[1]:
        raise ScenarioError(f"vehicles.speed_bounds_mps: min_s={bounds[0]} exceeds max_s={bounds[1]}")
    if not math.isclose(duration, slots * slot_length, rel_tol=1e-12):
        raise ScenarioError(
            f"time: T_D != J*Delta (flight_duration_s={duration}, slot_count={slots}, slot_length_s={slot_length})"
        )

    sampler = None
    if "tracks" in veh and "sampler" in veh:
        raise ScenarioError("vehicles: give either 'tracks' or 'sampler', not both")
    if "tracks" in veh:
        tracks = []
        for k, t in enumerate(veh["tracks"]):
            try:
                tracks.append(make_track(
                    float(t["speed_mps"]), float(t["lane_y_m"]), float(t["initial_x_m"]),
                    slot_length, slots, road_length, speed_limit, t.get("rate_floor_bps"),
                ))
            except KeyError as exc:
                raise ScenarioError(f"vehicles.tracks[{k}]: missing field {exc}") from None
    elif "sampler" in veh:
        s = dict(veh["sampler"])
        if seed is not None:
            s["seed"] = int(seed)
        bands = s.pop("high_speed_bands_mps", None)
        try:
            sampler = SamplerSpec(
                seed=int(s.get("seed", 7)),
                high_speed_count=int(s.get("high_speed_count", 2)),
                normal_count=int(s.get("normal_count", 3)),
                mean=s.get("mean_mps"),
                stddev=s.get("stddev_mps"),
                initial_x_max=s.get("initial_x_max_m"),
                lanes=int(s.get("lanes", 4)),
                high_speed_bands=None if bands is None else tuple(tuple(b) for b in bands),
            )
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"vehicles.sampler: {exc}") from None
        tracks = sample_tracks(
            sampler, road_length=road_length, road_width=road_width, slot_length=slot_length,
            slot_count=slots, speed_limit=speed_limit, speed_bounds=bounds,
        )
        floors = veh["sampler"].get("rate_floors_bps")
        if floors is not None:
            if len(floors) != len(tracks):
                raise ScenarioError("vehicles.sampler.rate_floors_bps must have one entry per vehicle")
            tracks = tuple(replace(t, rate_floor=None if f is None else float(f)) for t, f in zip(tracks, floors))
    else:
        raise ScenarioError("vehicles: one of 'tracks' or 'sampler' is required")

    pm = doc.get("power_model", {})
    try:
        power_model = PowerModelParams(
            hover_induced_speed=float(pm.get("hover_induced_speed_mps", 5.4)),
            blade_profile_power=float(pm.get("blade_profile_power_w", 3.4)),
            tip_speed=float(pm.get("tip_speed_mps", 60.0)),
            induced_power=float(pm.get("induced_power_w", 118.0)),
            fuselage_drag_ratio=float(pm.get("fuselage_drag_ratio", 0.6)),
            air_density=float(pm.get("air_density_kgm3", 1.225)),
            rotor_solidity=float(pm.get("rotor_solidity", 0.05)),
            rotor_disc_area=float(pm.get("rotor_disc_area_m2", 0.503)),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None

    sv = doc.get("solver", {})
    solver = SolverSettings(**{k: sv[k] for k in SolverSettings.__dataclass_fields__ if k in sv})

    bs_pos = _get(doc, "bs.position_m")
    if len(bs_pos) != 3:
        raise ScenarioError("bs.position_m must have three coordinates")
    init_xy = _get(doc, "uav.initial_xy_m")
    if len(init_xy) != 2:
        raise ScenarioError("uav.initial_xy_m must have two coordinates")

    return ScenarioConfig(
        road_length=road_length,
        road_width=road_width,
        flight_duration=duration,
        slot_count=slots,
        slot_length=slot_length,
        uav_altitude=float(_get(doc, "uav.altitude_m")),
        uav_initial_xy=tuple(init_xy),
        uav_max_speed=float(_get(doc, "uav.max_speed_mps")),
        power_budget=_power(_get(doc, "uav.power_budget"), "uav.power_budget"),
        comm_power_per_vehicle=_power(_get(doc, "link.tx_power_per_vehicle"), "link.tx_power_per_vehicle"),
        total_bandwidth=float(_get(doc, "link.bandwidth_hz")),
        backhaul_bandwidth=float(_get(doc, "bs.backhaul_bandwidth_hz")),
        bs_position=tuple(bs_pos),
        bs_power=_power(_get(doc, "bs.power"), "bs.power"),
        noise_vehicle=_power(_get(doc, "link.noise_vehicle"), "link.noise_vehicle"),
        noise_uav=_power(_get(doc, "uav.noise"), "uav.noise"),
        reference_gain=_gain(_get(doc, "link.reference_gain"), "link.reference_gain"),
        rate_floor=float(_get(doc, "link.rate_floor_bps")),
        speed_limit=speed_limit,
        speed_bounds=bounds,
        vehicles=tracks,
        power_model=power_model,
        solver=solver,
        sampler=sampler,
    )


def load_scenario(path, seed=None):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    return scenario_from_dict(doc, seed=seed)


def default_scenario_path() -> Path:
    return Path(__file__).parent / "data" / "default_scenario.json"


def default_scenario(seed=None) -> ScenarioConfig:
    return load_scenario(default_scenario_path(), seed=seed)


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    """Serialise with explicit tracks and watt-valued powers (round-trips via scenario_from_dict)."""
    pm = cfg.power_model
    return {
        "road": {"length_m": cfg.road_length, "width_m": cfg.road_width},
        "time": {"flight_duration_s": cfg.flight_duration, "slot_count": cfg.slot_count,
                 "slot_length_s": cfg.slot_length},
        "uav": {"altitude_m": cfg.uav_altitude, "initial_xy_m": list(cfg.uav_initial_xy),
                "max_speed_mps": cfg.uav_max_speed, "power_budget": {"watts": cfg.power_budget},
                "noise": {"watts": cfg.noise_uav}},
        "bs": {"position_m": list(cfg.bs_position), "power": {"watts": cfg.bs_power},
               "backhaul_bandwidth_hz": cfg.backhaul_bandwidth},
        "link": {"bandwidth_hz": cfg.total_bandwidth, "tx_power_per_vehicle": {"watts": cfg.comm_power_per_vehicle},
                 "noise_vehicle": {"watts": cfg.noise_vehicle}, "reference_gain": {"linear": cfg.reference_gain},
                 "rate_floor_bps": cfg.rate_floor},
        "power_model": {
            "hover_induced_speed_mps": pm.hover_induced_speed, "blade_profile_power_w": pm.blade_profile_power,
            "tip_speed_mps": pm.tip_speed, "induced_power_w": pm.induced_power,
            "fuselage_drag_ratio": pm.fuselage_drag_ratio, "air_density_kgm3": pm.air_density,
            "rotor_solidity": pm.rotor_solidity, "rotor_disc_area_m2": pm.rotor_disc_area,
        },
        "vehicles": {
            "speed_limit_mps": cfg.speed_limit,
            "speed_bounds_mps": list(cfg.speed_bounds),
            "tracks": [
                {"speed_mps": v.speed, "lane_y_m": v.lane_y, "initial_x_m": v.initial_x,
                 **({} if v.rate_floor is None else {"rate_floor_bps": v.rate_floor})}
                for v in cfg.vehicles
            ],
        },
        "solver": dict(cfg.solver.__dict__),
    }


def with_vehicles(cfg: ScenarioConfig, tracks) -> ScenarioConfig:
    return replace(cfg, vehicles=tuple(tracks))


def resample(cfg: ScenarioConfig, spec: SamplerSpec) -> ScenarioConfig:
    """Return ``cfg`` with vehicles redrawn from ``spec``."""
    tracks = sample_tracks(
        spec, road_length=cfg.road_length, road_width=cfg.road_width, slot_length=cfg.slot_length,
        slot_count=cfg.slot_count, speed_limit=cfg.speed_limit, speed_bounds=cfg.speed_bounds,
    )
    return replace(cfg, vehicles=tracks, sampler=spec)
