"""Small hand-built scenarios shared by the test modules."""
from dataclasses import replace

import numpy as np

from uavnet.link import Trajectory
from uavnet.scenario import default_scenario, make_track


def tiny_scenario(vehicles, slot_count=1, slot_length=4.0, rate_floor=1000.0, **changes):
    """``vehicles`` is a list of (speed, lane_y, initial_x[, floor]) tuples."""
    base = default_scenario()
    tracks = []
    for spec in vehicles:
        speed, lane, x0 = spec[:3]
        floor = spec[3] if len(spec) > 3 else None
        tracks.append(make_track(speed, lane, x0, slot_length, slot_count, base.road_length, base.speed_limit, floor))
    return replace(base, slot_count=slot_count, slot_length=slot_length, flight_duration=slot_count * slot_length,
                   vehicles=tuple(tracks), rate_floor=rate_floor, sampler=None, **changes)


def hover_at(scn, xy):
    return Trajectory(np.tile(np.asarray(xy, dtype=float), (scn.slot_count + 1, 1)), scn.uav_altitude)
