"""Synthetic maps, ground-truth drives and noisy observation streams."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .observation import NOT_VISIBLE_OBS, ObservationFrame
from .road_map import (
    HIGHWAY,
    NON_HIGHWAY,
    VISIBLE,
    MapPose,
    RoadGraph,
    TopologyError,
    global_heading,
    link_segments,
    make_segment,
    partition_for_intersections,
    segment_point,
    wrap_angle,
)
from .solar import parse_utc, sun_position


@dataclass
class SimConfig:
    seed: int = 0
    frame_rate: float = 1.0
    odom_cov: np.ndarray = field(default_factory=lambda: np.diag([0.3**2, math.radians(0.5) ** 2]))
    highway_odom_scale: float = 2.0
    sun_var: float = math.radians(15.0) ** 2
    gamma_sim: float = 0.8
    beta_sim: float = 0.9
    speed_fraction: float = 1.0
    sun_availability: str = "always"
    sun_schedule: tuple = ()
    origin: tuple[float, float] = (49.01, 8.40)
    start_utc: str = "2011-09-26T10:00:00Z"

    def __post_init__(self):
        c = np.asarray(self.odom_cov, dtype=float).reshape(2, 2)
        if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < 0:
            raise ValueError("odom_cov must be symmetric positive semi-definite")
        self.odom_cov = c
        for name in ("gamma_sim", "beta_sim"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.sun_var < 0:
            raise ValueError("sun_var must be non-negative")
        if self.sun_availability not in ("always", "never", "schedule"):
            raise ValueError(f"unknown sun availability {self.sun_availability!r}")
        self.origin = tuple(self.origin)

    @classmethod
    def noiseless(cls, **kw) -> "SimConfig":
        kw.setdefault("odom_cov", np.zeros((2, 2)))
        kw.setdefault("sun_var", 0.0)
        kw.setdefault("gamma_sim", 1.0)
        kw.setdefault("beta_sim", 1.0)
        return cls(**kw)

    @classmethod
    def from_toml(cls, path) -> "SimConfig":
        import tomli

        with open(path, "rb") as fh:
            data = tomli.load(fh)
        data = data.get("sim", data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown sim config keys: {sorted(unknown)}")
        if "sun_schedule" in data:
            data["sun_schedule"] = tuple(tuple(x) for x in data["sun_schedule"])
        return cls(**data)


@dataclass(frozen=True)
class GroundTruthFrame:
    t: float
    pose: MapPose
    xy: tuple[float, float]
    heading: float
    velocity: float
    step_length: float = 0.0


# -- maps ---------------------------------------------------------------------

def _two_way(segs, a, b, pa, pb, speed, rtype):
    (x0, y0), (x1, y1) = pa, pb
    L = math.hypot(x1 - x0, y1 - y0)
    for (s, e, p, q) in ((a, b, pa, pb), (b, a, pb, pa)):
        segs.append(
            make_segment(
                len(segs), p, math.atan2(q[1] - p[1], q[0] - p[0]), L,
                speed_limit=speed, road_type=rtype, start_node=s, end_node=e,
            )
        )


def make_synthetic_map(kind: str, partition: bool = True, origin=(49.01, 8.40), **params) -> RoadGraph:
    """Build a synthetic map.

    kind="grid": ``nx``, ``ny`` nodes with ``block`` metre spacing; optional
    ``jitter`` (fraction of block), ``highway_fraction`` and ``seed`` make
    streets differ in length, class and speed limit.
    kind="symmetric_loop": two trapezoid loops (``inner``, ``outer`` parallel
    sides, ``depth`` apart) joined by a ``bridge``-metre road; the map has
    180-degree rotational and mirror symmetry.
    kind="radial": ``spokes`` roads of ``radius`` metres from a hub.
    """
    builders = {"grid": _grid, "symmetric_loop": _symmetric_loop, "radial": _radial}
    if kind not in builders:
        raise ValueError(f"unknown map kind {kind!r}")
    segs, uturns = builders[kind](**params)
    graph = link_segments(segs, origin, allow_uturns=uturns)
    if partition:
        graph = partition_for_intersections(graph)
    graph.validate()
    return graph


def _grid(nx=4, ny=4, block=100.0, jitter=0.0, highway_fraction=0.0, speeds=(30.0, 50.0, 60.0), seed=0):
    if nx < 2 or ny < 2 or block <= 0 or not 0 <= jitter < 1:
        raise ValueError("grid needs nx, ny >= 2, block > 0 and 0 <= jitter < 1")
    rng = np.random.default_rng(seed)
    xs = np.r_[0.0, np.cumsum(block * (1 + rng.uniform(-jitter, jitter, nx - 1)))]
    ys = np.r_[0.0, np.cumsum(block * (1 + rng.uniform(-jitter, jitter, ny - 1)))]
    if jitter == 0 and highway_fraction == 0:
        row_cls = [(50.0, NON_HIGHWAY)] * ny
        col_cls = [(50.0, NON_HIGHWAY)] * nx
    else:
        def pick():
            if rng.random() < highway_fraction:
                return 100.0, HIGHWAY
            return float(rng.choice(speeds)), NON_HIGHWAY

        row_cls = [pick() for _ in range(ny)]
        col_cls = [pick() for _ in range(nx)]
    segs = []
    node = lambda i, j: f"g{i}_{j}"
    for j in range(ny):
        for i in range(nx - 1):
            _two_way(segs, node(i, j), node(i + 1, j), (xs[i], ys[j]), (xs[i + 1], ys[j]), *row_cls[j])
    for i in range(nx):
        for j in range(ny - 1):
            _two_way(segs, node(i, j), node(i, j + 1), (xs[i], ys[j]), (xs[i], ys[j + 1]), *col_cls[i])
    return segs, False


def _symmetric_loop(inner=160.0, outer=80.0, depth=120.0, bridge=400.0, speed=50.0):
    """Two isosceles-trapezoid loops joined at their long sides by a bridge.

    Each loop is mirror-symmetric about the bridge axis but not centrally
    symmetric, so the only rigid motion mapping one loop onto the other is a
    rotation by pi: odometry cannot tell them apart, absolute heading can.
    """
    if min(inner, outer, depth, bridge) <= 0:
        raise ValueError("symmetric_loop needs positive inner, outer, depth and bridge")
    b = bridge / 2.0
    segs = []
    for tag, sx in (("A", -1.0), ("B", 1.0)):
        near_x, far_x = sx * b, sx * (b + depth)
        pts = {
            f"{tag}m": (near_x, 0.0),
            f"{tag}1": (near_x, inner / 2.0),
            f"{tag}2": (far_x, outer / 2.0),
            f"{tag}3": (far_x, -outer / 2.0),
            f"{tag}4": (near_x, -inner / 2.0),
        }
        ring = [f"{tag}m", f"{tag}1", f"{tag}2", f"{tag}3", f"{tag}4", f"{tag}m"]
        for a, c in zip(ring[:-1], ring[1:]):
            _two_way(segs, a, c, pts[a], pts[c], speed, NON_HIGHWAY)
    _two_way(segs, "Am", "Bm", (-b, 0.0), (b, 0.0), speed, NON_HIGHWAY)
    return segs, False


def _radial(spokes=8, radius=200.0, speed=50.0):
    if spokes < 3 or radius <= 0:
        raise ValueError("radial needs at least 3 spokes and a positive radius")
    segs = []
    for k in range(spokes):
        ang = 2.0 * math.pi * k / spokes
        tip = (radius * math.cos(ang), radius * math.sin(ang))
        _two_way(segs, "hub", f"r{k}", (0.0, 0.0), tip, speed, NON_HIGHWAY)
    return segs, "dead_ends"


# -- routes -------------------------------------------------------------------

def check_route(graph: RoadGraph, route) -> None:
    for a, b in zip(route[:-1], route[1:]):
        if b not in graph[a].successors:
            raise TopologyError(f"route is disconnected between segments {a} and {b}")


def random_route(graph: RoadGraph, length: float, seed: int = 0, start: int | None = None) -> list[int]:
    """Random walk without U-turns covering at least ``length`` metres."""
    rng = np.random.default_rng(seed)
    ids = graph.ids
    cur = ids[rng.integers(len(ids))] if start is None else start
    route, acc = [cur], graph[cur].length
    while acc < length:
        succ = graph[cur].successors
        if not succ:
            break
        cur = succ[rng.integers(len(succ))]
        route.append(cur)
        acc += graph[cur].length
    return route


def loop_route(graph: RoadGraph, loop_nodes, laps: int = 3) -> list[int]:
    """Route following a closed sequence of (unpartitioned) node names, for ``laps`` laps."""
    route = []
    by_start = {}
    for s in graph:
        by_start.setdefault(s.start_node, []).append(s)
    for _ in range(laps):
        for a, b in zip(loop_nodes[:-1], loop_nodes[1:]):
            cur = next(s for s in by_start[a] if _leads_to(graph, s, b))
            while True:
                route.append(cur.id)
                if cur.end_node == b:
                    break
                cur = graph[cur.successors[0]]
    check_route(graph, route)
    return route


def _leads_to(graph, seg, target):
    seen = 0
    while seen < 10:
        if seg.end_node == target:
            return True
        if "@" not in seg.end_node or len(seg.successors) != 1:
            return False
        seg = graph[seg.successors[0]]
        seen += 1
    return False


# -- driving ------------------------------------------------------------------

def simulate_drive(graph: RoadGraph, route, sim: SimConfig | None = None, duration: float | None = None) -> list[GroundTruthFrame]:
    """Drive ``route`` at ``speed_fraction`` of each segment's limit, sampled at ``frame_rate``."""
    sim = sim or SimConfig()
    route = list(route)
    if not route:
        raise ValueError("empty route")
    check_route(graph, route)
    dt = 1.0 / sim.frame_rate

    def speed(u):
        return sim.speed_fraction * graph[u].speed_limit / 3.6

    def frame(t, k, d, step):
        u = route[k]
        pose = MapPose(u, d, 0.0)
        return GroundTruthFrame(t, pose, segment_point(graph[u], d), global_heading(pose, graph), speed(u) * 3.6, step)

    k, d, t = 0, 0.0, 0.0
    frames = [frame(t, k, d, 0.0)]
    while duration is None or t + dt <= duration + 1e-9:
        remaining, step = dt, 0.0
        while remaining > 1e-12:
            v = speed(route[k])
            to_end = graph[route[k]].length - d
            if v * remaining < to_end:
                d += v * remaining
                step += v * remaining
                remaining = 0.0
            else:
                if k + 1 >= len(route):
                    return frames
                remaining -= to_end / v
                step += to_end
                k, d = k + 1, 0.0
        t += dt
        frames.append(frame(t, k, d, step))
    return frames


def emit_observations(gt, graph: RoadGraph, sim: SimConfig | None = None) -> list[ObservationFrame]:
    """Noisy observations for frames 1..N of a ground-truth drive."""
    sim = sim or SimConfig()
    rng = np.random.default_rng(sim.seed)
    t0 = parse_utc(sim.start_utc)
    lat, lon = sim.origin
    chol_city = _psd_sqrt(sim.odom_cov)
    chol_hw = chol_city * sim.highway_odom_scale
    out = []
    for prev, cur in zip(gt[:-1], gt[1:]):
        seg = graph[cur.pose.u]
        z = rng.standard_normal(2)
        noise = (chol_hw if seg.road_type == HIGHWAY else chol_city) @ z
        dtheta = wrap_angle(cur.heading - prev.heading)
        odom = (cur.step_length + noise[0], dtheta + noise[1])

        sun_noise = rng.standard_normal() * math.sqrt(sim.sun_var)
        phi = None
        if _sun_on(sim, cur.t):
            sun = sun_position(t0 + cur.t, lat, lon)
            if sun.is_daytime:
                phi = wrap_angle(sun.map_azimuth - cur.heading + sun_noise)

        flip_i = rng.random() >= sim.gamma_sim
        visible = (seg.intersection_class == VISIBLE) != flip_i
        flip_r = rng.random() >= sim.beta_sim
        is_hw = (seg.road_type == HIGHWAY) != flip_r

        out.append(
            ObservationFrame(
                t=cur.t,
                phi=phi,
                inter=VISIBLE if visible else NOT_VISIBLE_OBS,
                rtype=HIGHWAY if is_hw else NON_HIGHWAY,
                velocity=cur.velocity,
                odom=odom,
            )
        )
    return out


def _psd_sqrt(c):
    w, v = np.linalg.eigh(c)
    return v @ np.diag(np.sqrt(np.maximum(w, 0.0))) @ v.T


def _sun_on(sim: SimConfig, t: float) -> bool:
    if sim.sun_availability == "always":
        return True
    if sim.sun_availability == "never":
        return False
    return any(a <= t < b for a, b in sim.sun_schedule)


# -- files --------------------------------------------------------------------

GT_COLUMNS = ("t", "segment_id", "d", "theta", "x", "y", "heading", "v")


def write_ground_truth(path, frames) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GT_COLUMNS)
        for f in frames:
            w.writerow([repr(f.t), f.pose.u, repr(f.pose.d), repr(f.pose.theta), repr(f.xy[0]), repr(f.xy[1]), repr(f.heading), repr(f.velocity)])


def read_ground_truth(path) -> list[GroundTruthFrame]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append(
                GroundTruthFrame(
                    float(r["t"]),
                    MapPose(int(r["segment_id"]), float(r["d"]), float(r["theta"])),
                    (float(r["x"]), float(r["y"])),
                    float(r["heading"]),
                    float(r["v"]),
                )
            )
    return out
