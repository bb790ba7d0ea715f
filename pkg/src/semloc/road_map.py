"""Directed road graph made of line and circular-arc street segments.

A vehicle pose on the map is ``(u, d, theta)``: the segment it is on, the
arc length travelled along it, and the heading offset from the local street
direction.  Headings are radians, counterclockwise from the +x (east) axis
of a local equirectangular frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable

import numpy as np

HIGHWAY = "highway"
NON_HIGHWAY = "non_highway"
ROAD_TYPES = (HIGHWAY, NON_HIGHWAY)

TOO_CLOSE = "too_close"
VISIBLE = "visible"
NOT_VISIBLE = "not_visible"
INTERSECTION_CLASSES = (TOO_CLOSE, VISIBLE, NOT_VISIBLE)

EARTH_RADIUS = 6_371_008.8
CONNECT_TOL = 0.5


class TopologyError(ValueError):
    """Raised for inconsistent connectivity or impossible segment moves."""


def wrap_angle(x):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class StreetSegment:
    id: int
    p0: tuple[float, float]
    p1: tuple[float, float]
    beta: float
    alpha: float
    length: float
    speed_limit: float
    road_type: str = NON_HIGHWAY
    intersection_class: str = NOT_VISIBLE
    successors: tuple[int, ...] = ()
    predecessors: tuple[int, ...] = ()
    start_node: str = ""
    end_node: str = ""

    @property
    def end_heading(self) -> float:
        return self.beta + self.alpha * self.length

    def point(self, d: float) -> tuple[float, float]:
        return segment_point(self, d)


@dataclass(frozen=True)
class MapPose:
    u: int
    d: float
    theta: float = 0.0


def make_segment(
    id: int,
    p0,
    beta: float,
    length: float,
    alpha: float = 0.0,
    speed_limit: float = 50.0,
    road_type: str = NON_HIGHWAY,
    **kw,
) -> StreetSegment:
    """Build a segment from its start point, initial heading, curvature and length."""
    p0 = (float(p0[0]), float(p0[1]))
    p1 = _arc_point(p0, beta, alpha, length)
    return StreetSegment(
        id=id,
        p0=p0,
        p1=p1,
        beta=float(beta),
        alpha=float(alpha),
        length=float(length),
        speed_limit=float(speed_limit),
        road_type=road_type,
        **kw,
    )


def _arc_point(p0, beta, alpha, d):
    if abs(alpha) < 1e-12:
        return (p0[0] + d * math.cos(beta), p0[1] + d * math.sin(beta))
    return (
        p0[0] + (math.sin(beta + alpha * d) - math.sin(beta)) / alpha,
        p0[1] + (math.cos(beta) - math.cos(beta + alpha * d)) / alpha,
    )


def segment_point(segment: StreetSegment, d: float, tol: float = 1e-9) -> tuple[float, float]:
    """Planar point at arc length ``d`` along ``segment``.

    Raises ValueError when ``d`` is outside ``[0, length]``.
    """
    if d < -tol or d > segment.length + tol:
        raise ValueError(f"d={d} outside segment {segment.id} of length {segment.length}")
    return _arc_point(segment.p0, segment.beta, segment.alpha, d)


@dataclass(frozen=True, eq=False)
class GraphArrays:
    """Column view of a RoadGraph, indexed by position (not id)."""

    ids: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    length: np.ndarray
    speed_limit: np.ndarray
    highway: np.ndarray
    inter_visible: np.ndarray
    x0: np.ndarray
    y0: np.ndarray
    succ_ptr: np.ndarray
    succ_idx: np.ndarray

    def n_successors(self) -> np.ndarray:
        return np.diff(self.succ_ptr)


@dataclass(frozen=True, eq=False)
class RoadGraph:
    """Immutable collection of street segments keyed by integer id."""

    segments: dict[int, StreetSegment]
    frame_origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "segments", dict(self.segments))

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments.values())

    def __getitem__(self, sid: int) -> StreetSegment:
        try:
            return self.segments[sid]
        except KeyError:
            raise KeyError(f"unknown segment id {sid!r}") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoadGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    @cached_property
    def ids(self) -> list[int]:
        return list(self.segments)

    @cached_property
    def index(self) -> dict[int, int]:
        return {sid: i for i, sid in enumerate(self.segments)}

    @cached_property
    def arrays(self) -> GraphArrays:
        segs = list(self.segments.values())
        idx = self.index
        counts = [len(s.successors) for s in segs]
        ptr = np.zeros(len(segs) + 1, dtype=np.int64)
        ptr[1:] = np.cumsum(counts)
        succ = np.array([idx[w] for s in segs for w in s.successors], dtype=np.int64)
        return GraphArrays(
            ids=np.array([s.id for s in segs]),
            beta=np.array([s.beta for s in segs]),
            alpha=np.array([s.alpha for s in segs]),
            length=np.array([s.length for s in segs]),
            speed_limit=np.array([s.speed_limit for s in segs]),
            highway=np.array([s.road_type == HIGHWAY for s in segs]),
            inter_visible=np.array([s.intersection_class == VISIBLE for s in segs]),
            x0=np.array([s.p0[0] for s in segs]),
            y0=np.array([s.p0[1] for s in segs]),
            succ_ptr=ptr,
            succ_idx=succ,
        )

    @property
    def total_length(self) -> float:
        return float(sum(s.length for s in self))

    def validate(self, tol: float = CONNECT_TOL) -> None:
        """Check the segment and connectivity invariants; raise on the first violation."""
        for s in self:
            if not s.length > 0:
                raise TopologyError(f"segment {s.id} has non-positive length")
            if s.road_type not in ROAD_TYPES:
                raise ValueError(f"segment {s.id}: bad road type {s.road_type!r}")
            if s.intersection_class not in INTERSECTION_CLASSES:
                raise ValueError(f"segment {s.id}: bad intersection class {s.intersection_class!r}")
            end = _arc_point(s.p0, s.beta, s.alpha, s.length)
            if math.dist(end, s.p1) > 1e-6:
                raise TopologyError(f"segment {s.id}: p1 does not match p0/beta/alpha/length")
            for w in s.successors:
                if w not in self.segments:
                    raise TopologyError(f"segment {s.id}: dangling successor {w}")
                if s.id not in self.segments[w].predecessors:
                    raise TopologyError(f"segment {s.id} -> {w} missing reverse link")
                if math.dist(self.segments[w].p0, s.p1) > tol:
                    raise TopologyError(f"segment {w} does not start where {s.id} ends")
            for p in s.predecessors:
                if p not in self.segments:
                    raise TopologyError(f"segment {s.id}: dangling predecessor {p}")
                if s.id not in self.segments[p].successors:
                    raise TopologyError(f"segment {p} -> {s.id} missing forward link")

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        segs = []
        for s in self:
            segs.append(
                {
                    "id": s.id,
                    "p0": list(s.p0),
                    "p1": list(s.p1),
                    "beta": s.beta,
                    "alpha": s.alpha,
                    "length": s.length,
                    "speed_limit": s.speed_limit,
                    "road_type": s.road_type,
                    "intersection_class": s.intersection_class,
                    "successors": list(s.successors),
                    "predecessors": list(s.predecessors),
                    "start_node": s.start_node,
                    "end_node": s.end_node,
                }
            )
        return {"frame_origin": list(self.frame_origin), "segments": segs}

    @classmethod
    def from_dict(cls, data: dict) -> "RoadGraph":
        segs = {}
        for rec in data["segments"]:
            s = StreetSegment(
                id=int(rec["id"]),
                p0=tuple(rec["p0"]),
                p1=tuple(rec["p1"]),
                beta=rec["beta"],
                alpha=rec["alpha"],
                length=rec["length"],
                speed_limit=rec["speed_limit"],
                road_type=rec["road_type"],
                intersection_class=rec["intersection_class"],
                successors=tuple(rec["successors"]),
                predecessors=tuple(rec["predecessors"]),
                start_node=str(rec.get("start_node", "")),
                end_node=str(rec.get("end_node", "")),
            )
            segs[s.id] = s
        return cls(segs, tuple(data.get("frame_origin", (0.0, 0.0))))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RoadGraph":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "RoadGraph":
        with open(path) as fh:
            return cls.from_json(fh.read())


def link_segments(segments: Iterable[StreetSegment], frame_origin=(0.0, 0.0), allow_uturns=False) -> RoadGraph:
    """Connect segments by shared node ids (end_node -> start_node).

    U-turn links (successor runs straight back along the reverse segment)
    are dropped unless ``allow_uturns`` is set or the segment would
    otherwise be a dead end and ``allow_uturns == "dead_ends"``.
    """
    segs = list(segments)
    by_start: dict[str, list[int]] = {}
    for s in segs:
        by_start.setdefault(s.start_node, []).append(s.id)
    succ: dict[int, list[int]] = {s.id: [] for s in segs}
    seg_by_id = {s.id: s for s in segs}
    for s in segs:
        cands = by_start.get(s.end_node, [])
        fwd = [w for w in cands if not _is_reverse(s, seg_by_id[w])]
        rev = [w for w in cands if _is_reverse(s, seg_by_id[w])]
        if allow_uturns is True or (allow_uturns == "dead_ends" and not fwd):
            fwd = fwd + rev
        succ[s.id] = sorted(fwd)
    pred: dict[int, list[int]] = {s.id: [] for s in segs}
    for sid, ws in succ.items():
        for w in ws:
            pred[w].append(sid)
    out = {
        s.id: replace(s, successors=tuple(succ[s.id]), predecessors=tuple(sorted(pred[s.id])))
        for s in segs
    }
    return RoadGraph(out, tuple(frame_origin))


def _is_reverse(a: StreetSegment, b: StreetSegment) -> bool:
    return a.start_node == b.end_node and a.end_node == b.start_node


def global_heading(pose, graph: RoadGraph) -> float:
    """Absolute heading of a pose: offset + street heading at ``d``."""
    seg = graph[pose.u]
    return wrap_angle(pose.theta + seg.beta + seg.alpha * pose.d)


def transition_affine(u: int, u_next: int, graph: RoadGraph) -> tuple[np.ndarray, np.ndarray]:
    """Affine map ``s -> F s + b`` re-expressing a state on ``u`` relative to ``u_next``.

    Arc length is shifted by the length of ``u``; heading offsets are
    corrected so that the global heading is unchanged (mod 2*pi).
    """
    a = graph[u]
    if u_next not in a.successors:
        raise TopologyError(f"segment {u_next} is not a successor of {u}")
    b = graph[u_next]
    da = a.alpha - b.alpha
    c = wrap_angle(a.beta + a.alpha * a.length - b.beta)
    F = np.eye(4)
    F[2, 0] = da
    F[3, 1] = da
    off = np.array([-a.length, -a.length, c - da * a.length, c - da * a.length])
    return F, off


def reparameterize_pose(s, u: int, u_next: int, graph: RoadGraph) -> np.ndarray:
    """Express the continuous state ``s = (d, d_prev, theta, theta_prev)`` on ``u_next``."""
    F, off = transition_affine(u, u_next, graph)
    return F @ np.asarray(s, dtype=float) + off


def to_local_xy(lat, lon, origin) -> tuple:
    lat0, lon0 = origin
    x = np.radians(np.asarray(lon) - lon0) * EARTH_RADIUS * math.cos(math.radians(lat0))
    y = np.radians(np.asarray(lat) - lat0) * EARTH_RADIUS
    return x, y


def to_latlon(x, y, origin) -> tuple:
    lat0, lon0 = origin
    lat = lat0 + np.degrees(np.asarray(y) / EARTH_RADIUS)
    lon = lon0 + np.degrees(np.asarray(x) / (EARTH_RADIUS * math.cos(math.radians(lat0))))
    return lat, lon


def positions(graph: RoadGraph, seg_pos: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Vectorised planar points for segment positions (array index) and arc lengths.

    Arc lengths outside the segment are extrapolated along the same line/arc.
    """
    A = graph.arrays
    beta, alpha = A.beta[seg_pos], A.alpha[seg_pos]
    x0, y0 = A.x0[seg_pos], A.y0[seg_pos]
    d = np.asarray(d, dtype=float)
    curved = np.abs(alpha) > 1e-12
    safe = np.where(curved, alpha, 1.0)
    sx = np.where(curved, (np.sin(beta + alpha * d) - np.sin(beta)) / safe, d * np.cos(beta))
    sy = np.where(curved, (np.cos(beta) - np.cos(beta + alpha * d)) / safe, d * np.sin(beta))
    return np.stack([x0 + sx, y0 + sy], axis=-1)


# -- intersection partitioning ---------------------------------------------

def intersection_nodes(graph: RoadGraph) -> set[str]:
    """Nodes joining at least three distinct neighbouring nodes."""
    nbrs: dict[str, set[str]] = {}
    for s in graph:
        nbrs.setdefault(s.start_node, set()).add(s.end_node)
        nbrs.setdefault(s.end_node, set()).add(s.start_node)
    return {n for n, ns in nbrs.items() if len(ns - {n}) >= 3}


def _distance_to_intersection(graph: RoadGraph, far: float) -> dict[int, float]:
    """Distance from each segment's end to the next intersection straight ahead.

    Only unambiguous continuations (a single non-U-turn successor through a
    plain node) are followed; anything at or beyond ``far`` is reported as inf.
    """
    inter = intersection_nodes(graph)
    memo: dict[int, float] = {}

    def walk(sid: int) -> float:
        seen = []
        cur, acc = sid, 0.0
        while True:
            if cur in memo:
                res = acc + memo[cur]
                break
            s = graph[cur]
            if s.end_node in inter:
                res = acc
                break
            nxt = [w for w in s.successors if not _is_reverse(s, graph[w])]
            if len(nxt) != 1 or nxt[0] in seen or nxt[0] == sid:
                res = math.inf
                break
            seen.append(cur)
            acc += graph[nxt[0]].length
            if acc >= far:
                res = math.inf
                break
            cur = nxt[0]
        memo[sid] = res if res < far else math.inf
        return memo[sid]

    return {s.id: walk(s.id) for s in graph}


def _band_class(dist: float, near: float, far: float) -> str:
    if dist < near:
        return TOO_CLOSE
    if dist < far:
        return VISIBLE
    return NOT_VISIBLE


def partition_for_intersections(graph: RoadGraph, near: float = 6.25, far: float = 23.0, tol: float = 1e-6) -> RoadGraph:
    """Split segments so the intersection-visibility class is constant on each piece.

    Pieces within ``near`` metres of an intersection ahead are ``too_close``,
    those between ``near`` and ``far`` are ``visible`` and the rest
    ``not_visible``.  Segments are renumbered 0..n-1 in input order.
    """
    dist = _distance_to_intersection(graph, far)
    pieces: dict[int, list[StreetSegment]] = {}
    new_id = 0
    for s in graph:
        D = dist[s.id]
        cuts = [0.0, s.length]
        if math.isfinite(D):
            for r in (far, near):
                c = s.length + D - r
                if tol < c < s.length - tol:
                    cuts.append(c)
        cuts = sorted(cuts)
        out = []
        for k, (a, b) in enumerate(zip(cuts[:-1], cuts[1:])):
            mid_dist = (s.length - 0.5 * (a + b)) + D if math.isfinite(D) else math.inf
            start = s.start_node if k == 0 else f"{s.start_node}>{s.end_node}@{a:.3f}"
            end = s.end_node if k == len(cuts) - 2 else None
            p0 = s.p0 if k == 0 else _arc_point(s.p0, s.beta, s.alpha, a)
            p1 = s.p1 if k == len(cuts) - 2 else _arc_point(s.p0, s.beta, s.alpha, b)
            out.append(
                StreetSegment(
                    id=new_id,
                    p0=p0,
                    p1=p1,
                    beta=s.beta + s.alpha * a if k else s.beta,
                    alpha=s.alpha,
                    length=(b - a) if len(cuts) > 2 else s.length,
                    speed_limit=s.speed_limit,
                    road_type=s.road_type,
                    intersection_class=_band_class(mid_dist, near, far),
                    start_node=start,
                    end_node=end or "",
                )
            )
            new_id += 1
        for k in range(len(out) - 1):
            out[k] = replace(out[k], end_node=out[k + 1].start_node)
        pieces[s.id] = out

    segs: dict[int, StreetSegment] = {}
    for s in graph:
        chain = pieces[s.id]
        for k, piece in enumerate(chain):
            if k < len(chain) - 1:
                succ = (chain[k + 1].id,)
            else:
                succ = tuple(pieces[w][0].id for w in s.successors)
            if k > 0:
                pred = (chain[k - 1].id,)
            else:
                pred = tuple(pieces[p][-1].id for p in s.predecessors)
            segs[piece.id] = replace(piece, successors=succ, predecessors=pred)
    return RoadGraph(segs, graph.frame_origin)
