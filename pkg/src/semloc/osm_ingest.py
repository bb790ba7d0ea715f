"""OpenStreetMap XML -> RoadGraph."""

from __future__ import annotations

import logging
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

from .road_map import (
    HIGHWAY,
    NON_HIGHWAY,
    RoadGraph,
    link_segments,
    make_segment,
    partition_for_intersections,
    to_local_xy,
)

log = logging.getLogger(__name__)

DRIVABLE = frozenset(
    base + suffix
    for base in (
        "motorway",
        "trunk",
        "primary",
        "secondary",
        "tertiary",
        "residential",
        "unclassified",
        "service",
        "living_street",
    )
    for suffix in ("", "_link")
)
HIGHWAY_CLASSES = frozenset({"trunk", "trunk_link", "motorway", "motorway_link"})
DEFAULT_SPEEDS = {
    "motorway": 100.0,
    "trunk": 100.0,
    "primary": 60.0,
    "secondary": 50.0,
    "tertiary": 50.0,
    "residential": 30.0,
    "living_street": 30.0,
    "service": 30.0,
    "unclassified": 30.0,
}
MPH_TO_KMH = 1.609


class OsmParseError(ValueError):
    def __init__(self, message, line=None, column=None):
        super().__init__(f"{message} (line {line}, column {column})" if line is not None else message)
        self.line = line
        self.column = column


class OsmReferenceError(ValueError):
    def __init__(self, ways):
        self.ways = sorted(ways)
        super().__init__(f"ways reference missing nodes: {self.ways}")


class EmptyMapError(ValueError):
    pass


@dataclass
class OsmExtract:
    nodes: dict[int, tuple[float, float]]
    ways: dict[int, tuple[tuple[int, ...], dict[str, str]]]


@dataclass
class IngestConfig:
    drivable: frozenset = DRIVABLE
    speeds: dict = field(default_factory=lambda: dict(DEFAULT_SPEEDS))
    fallback_speed: float = 30.0
    partition: bool = True
    near: float = 6.25
    far: float = 23.0
    allow_uturns: bool | str = False


def parse_osm(xml_bytes, drivable=DRIVABLE) -> OsmExtract:
    """Parse node/way/nd/tag elements, keeping ways whose ``highway`` tag is drivable."""
    if isinstance(xml_bytes, str):
        xml_bytes = xml_bytes.encode()
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as exc:
        line, col = exc.position
        raise OsmParseError(f"malformed OSM XML: {exc.msg}", line, col) from None

    nodes = {}
    for el in root.iter("node"):
        nodes[int(el.get("id"))] = (float(el.get("lat")), float(el.get("lon")))

    ways = {}
    bad = []
    for el in root.iter("way"):
        tags = {t.get("k"): t.get("v") for t in el.iter("tag")}
        if tags.get("highway") not in drivable:
            continue
        wid = int(el.get("id"))
        refs = tuple(int(nd.get("ref")) for nd in el.iter("nd"))
        if any(r not in nodes for r in refs):
            bad.append(wid)
            continue
        ways[wid] = (refs, tags)
    if bad:
        raise OsmReferenceError(bad)
    return OsmExtract(nodes, ways)


def classify_road_type(tags) -> str:
    return HIGHWAY if tags.get("highway") in HIGHWAY_CLASSES else NON_HIGHWAY


_SPEED_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(mph|km/h|kmh|kph)?\s*$", re.IGNORECASE)


def resolve_speed_limit(tags, road_type=None, speeds=None, fallback=30.0) -> float:
    """Speed limit in km/h from ``maxspeed``, else the per-class default."""
    speeds = DEFAULT_SPEEDS if speeds is None else speeds
    raw = tags.get("maxspeed")
    if raw is not None:
        m = _SPEED_RE.match(raw)
        if m:
            value = float(m.group(1))
            if (m.group(2) or "").lower() == "mph":
                value *= MPH_TO_KMH
            if value > 0:
                return value
        log.warning("unparseable maxspeed %r; using class default", raw)
    cls = tags.get("highway", "")
    cls = cls[: -len("_link")] if cls.endswith("_link") else cls
    if cls in speeds:
        return float(speeds[cls])
    if road_type == HIGHWAY:
        return float(speeds.get("motorway", fallback))
    return float(fallback)


def _direction(tags) -> int:
    ow = tags.get("oneway", "no").lower()
    if ow in ("yes", "true", "1"):
        return 1
    if ow == "-1":
        return -1
    return 0


def build_graph(extract: OsmExtract, config: IngestConfig | None = None) -> RoadGraph:
    """One linear segment per consecutive node pair, per allowed direction."""
    config = config or IngestConfig()
    if not extract.ways:
        raise EmptyMapError("no drivable ways in extract")
    used = sorted({n for refs, _ in extract.ways.values() for n in refs})
    lats = [extract.nodes[n][0] for n in used]
    lons = [extract.nodes[n][1] for n in used]
    origin = ((min(lats) + max(lats)) / 2.0, (min(lons) + max(lons)) / 2.0)
    xy = {}
    for n in used:
        x, y = to_local_xy(*extract.nodes[n], origin)
        xy[n] = (float(x), float(y))

    segs = []
    for wid in sorted(extract.ways):
        refs, tags = extract.ways[wid]
        rtype = classify_road_type(tags)
        speed = resolve_speed_limit(tags, rtype, config.speeds, config.fallback_speed)
        direction = _direction(tags)
        for a, b in zip(refs[:-1], refs[1:]):
            pairs = []
            if direction >= 0:
                pairs.append((a, b))
            if direction <= 0:
                pairs.append((b, a))
            for s, e in pairs:
                (x0, y0), (x1, y1) = xy[s], xy[e]
                length = math.hypot(x1 - x0, y1 - y0)
                if length < 1e-3:
                    continue
                segs.append(
                    make_segment(
                        len(segs),
                        (x0, y0),
                        math.atan2(y1 - y0, x1 - x0),
                        length,
                        speed_limit=speed,
                        road_type=rtype,
                        start_node=str(s),
                        end_node=str(e),
                    )
                )
    if not segs:
        raise EmptyMapError("drivable ways have no usable node pairs")
    graph = link_segments(segs, origin, allow_uturns=config.allow_uturns)
    if config.partition:
        graph = partition_for_intersections(graph, config.near, config.far)
    return graph


def load_speed_table(path) -> dict:
    import tomli

    with open(path, "rb") as fh:
        data = tomli.load(fh)
    table = data.get("speeds", data)
    return {str(k): float(v) for k, v in table.items()}


def ingest_file(path, config: IngestConfig | None = None) -> RoadGraph:
    with open(path, "rb") as fh:
        return build_graph(parse_osm(fh.read(), (config or IngestConfig()).drivable), config)
