"""Low-precision solar ephemeris and the sun-as-compass measurement function.

Azimuths coming out of :func:`sun_position` follow the compass convention
(clockwise from true north).  Everything inside the map uses the planar
convention (counterclockwise from +x / east); :func:`azimuth_to_map` is the
only place the two meet.
"""

from __future__ import annotations

import calendar
import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .road_map import RoadGraph, global_heading, wrap_angle

_MIN_YEAR, _MAX_YEAR = 1950, 2050


@dataclass(frozen=True)
class SunPosition:
    """Sun direction in the horizontal frame.

    azimuth is in radians clockwise from true north, in [0, 2*pi);
    elevation is in radians above the geometric horizon (no refraction).
    """

    azimuth: float
    elevation: float
    timestamp: float

    @property
    def is_daytime(self) -> bool:
        return self.elevation > 0.0

    @property
    def map_azimuth(self) -> float:
        return azimuth_to_map(self.azimuth)


def azimuth_to_map(compass_azimuth: float) -> float:
    """Convert a compass azimuth to a counterclockwise angle from east."""
    return wrap_angle(math.pi / 2.0 - compass_azimuth)


def parse_utc(value) -> float:
    """Accept an ISO-8601 string, a datetime or POSIX seconds; return POSIX seconds."""
    if isinstance(value, (int, float, np.floating, np.integer)):
        return float(value)
    if isinstance(value, str):
        value = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if isinstance(value, datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=timezone.utc)
        return value.timestamp()
    raise TypeError(f"cannot interpret {value!r} as a UTC timestamp")


def _fractional_year(dt: datetime) -> float:
    days = 366 if calendar.isleap(dt.year) else 365
    hours = dt.hour + dt.minute / 60.0 + (dt.second + dt.microsecond * 1e-6) / 3600.0
    return 2.0 * math.pi / days * (dt.timetuple().tm_yday - 1 + (hours - 12.0) / 24.0)


def _declination_eqtime(g: float) -> tuple[float, float]:
    # Fourier series in the fractional year; eqtime in minutes, declination in radians.
    eqtime = 229.18 * (
        0.000075
        + 0.001868 * math.cos(g)
        - 0.032077 * math.sin(g)
        - 0.014615 * math.cos(2 * g)
        - 0.040849 * math.sin(2 * g)
    )
    decl = (
        0.006918
        - 0.399912 * math.cos(g)
        + 0.070257 * math.sin(g)
        - 0.006758 * math.cos(2 * g)
        + 0.000907 * math.sin(2 * g)
        - 0.002697 * math.cos(3 * g)
        + 0.00148 * math.sin(3 * g)
    )
    return decl, eqtime


def sun_position(utc, lat: float, lon: float) -> SunPosition:
    """Solar azimuth/elevation for a UTC instant and a geographic location.

    Parameters
    ----------
    utc : str, datetime or float
        Instant in UTC (ISO-8601 string, aware/naive datetime, or POSIX seconds).
    lat, lon : float
        Degrees, north and east positive.

    Raises
    ------
    ValueError
        If the location or the year is outside the supported domain.
    """
    ts = parse_utc(utc)
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise ValueError(f"location out of range: lat={lat}, lon={lon}")
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if not (_MIN_YEAR <= dt.year <= _MAX_YEAR):
        raise ValueError(f"year {dt.year} outside {_MIN_YEAR}-{_MAX_YEAR}")

    decl, eqtime = _declination_eqtime(_fractional_year(dt))
    minutes = dt.hour * 60.0 + dt.minute + (dt.second + dt.microsecond * 1e-6) / 60.0
    true_solar_time = minutes + eqtime + 4.0 * lon
    hour_angle = math.radians(true_solar_time / 4.0 - 180.0)

    phi = math.radians(lat)
    cos_zen = math.sin(phi) * math.sin(decl) + math.cos(phi) * math.cos(decl) * math.cos(hour_angle)
    zenith = math.acos(min(1.0, max(-1.0, cos_zen)))
    # azimuth measured from south, westward positive, then shifted to north-clockwise
    az_south = math.atan2(
        math.sin(hour_angle),
        math.cos(hour_angle) * math.sin(phi) - math.tan(decl) * math.cos(phi),
    )
    azimuth = (az_south + math.pi) % (2.0 * math.pi)
    return SunPosition(azimuth=azimuth, elevation=math.pi / 2.0 - zenith, timestamp=ts)


def solar_noon_utc(day: datetime, lon: float) -> float:
    """POSIX time of local solar noon on ``day`` (UTC date) at longitude ``lon``."""
    base = datetime(day.year, day.month, day.day, 12, tzinfo=timezone.utc)
    _, eqtime = _declination_eqtime(_fractional_year(base))
    return base.timestamp() + (-4.0 * lon - eqtime) * 60.0


def predicted_relative_sun(pose, graph: RoadGraph, sun: SunPosition) -> float:
    """Expected relative sun angle seen from a vehicle pose.

    ``pose`` is anything exposing ``u``, ``d`` and ``theta`` (e.g. a MapPose).
    The result is ``wrap(map_azimuth - global_heading)``: 0 means the sun is
    straight ahead, +pi/2 means it is to the left.

    Raises
    ------
    ValueError
        If the sun is below the horizon.
    """
    if not sun.is_daytime:
        raise ValueError("sun below horizon; relative sun direction unavailable")
    return wrap_angle(sun.map_azimuth - global_heading(pose, graph))
