"""Exhaustive discretised Bayes filter used as ground truth for the mixture filter.

State per segment: position d (0.25 m cells, with margins beyond both ends),
per-step travel v = d - d_prev (0.5 m cells) and heading offset theta (1 degree
cells).  The previous heading offset never needs its own axis: it is the
source cell's theta plus the street-change offset, so it is folded into a
theta -> theta' kernel applied per (destination, offset) bucket.

Only line segments whose lengths are multiples of the d cell are supported,
so street changes are exact integer shifts.  Nothing here imports the filter
under test; only the map container and the likelihood constants are shared.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from scipy.special import expit

from semloc.road_map import HIGHWAY, VISIBLE, wrap_angle

H_D = 0.25
H_V = 0.5
H_TH = math.radians(1.0)


def _shift_into(out, x, shift, axis=0):
    """out += x moved by ``shift`` cells along ``axis``; overflow piles onto the edge cells."""
    out = np.moveaxis(out, axis, 0)
    x = np.moveaxis(x, axis, 0)
    n_in, n_out = x.shape[0], out.shape[0]
    lo, hi = max(0, -shift), min(n_in, n_out - shift)
    if lo < hi:
        out[lo + shift : hi + shift] += x[lo:hi]
    if lo > 0:
        out[0] += x[: min(lo, n_in)].sum(0)
    if hi < n_in:
        out[-1] += x[max(hi, 0) :].sum(0)


def _gauss(x, var):
    return np.exp(-0.5 * x * x / var) / math.sqrt(2.0 * math.pi * var)


class GridFilter:
    """Discretised filter over every segment of a small line-only map.

    ``X[sid]`` has axes (d, v, theta).  Segments whose mass drops below
    ``floor`` are zeroed and skipped; this is the only approximation besides
    the lattice itself and the clamped margins.
    """

    def __init__(self, graph, nm, config, margin=(45.0, 15.0), v_range=(-2.0, 22.0), th_half=math.radians(15.0), floor=1e-14):
        self.g = graph
        self.nm = nm
        self.cfg = config
        self.ids = graph.ids
        for s in graph:
            if s.alpha != 0.0:
                raise ValueError("grid oracle supports line segments only")
            cells = s.length / H_D
            if abs(cells - round(cells)) > 1e-9:
                raise ValueError(f"segment {s.id} length {s.length} is not a multiple of {H_D}")
        self.m_lo, self.m_hi = (int(round(m / H_D)) for m in margin)
        self.v = np.arange(v_range[0], v_range[1] + 1e-9, H_V)
        self.th = np.arange(-th_half, th_half + 1e-9, H_TH)
        self.v_shift = np.round(self.v / H_D).astype(int)
        self.floor = floor
        q = config.process_noise
        self.q_d, self.q_th = q[0, 0], q[2, 2]
        reach = int(math.ceil(5 * math.sqrt(self.q_d) / H_V))
        k = np.arange(-reach, reach + 1)
        g = _gauss(k * H_V, self.q_d)
        self.noise_k, self.noise_w = k, g / g.sum()
        self.X = {}

    def n_cells(self, sid):
        return int(round(self.g[sid].length / H_D)) + self.m_lo + self.m_hi + 1

    def d_axis(self, sid):
        return (np.arange(self.n_cells(sid)) - self.m_lo) * H_D

    def _zeros(self, sid):
        return np.zeros((self.n_cells(sid), len(self.v), len(self.th)))

    def init_from_components(self, seg_ids, weights, d_means, d_sds, v_mean, v_sd, th_sd):
        """Discretise a product prior: a mixture over d, Gaussian v and theta."""
        pv = _gauss(self.v - v_mean, v_sd**2)
        pv /= pv.sum()
        pt = _gauss(self.th, th_sd**2)
        pt /= pt.sum()
        self.X = {sid: self._zeros(sid) for sid in self.ids}
        for sid, w, mu, sd in zip(seg_ids, weights, d_means, d_sds):
            pd = _gauss(self.d_axis(sid) - mu, sd**2)
            pd *= w / pd.sum()
            self.X[sid] += pd[:, None, None] * pv[None, :, None] * pt[None, None, :]
        self._normalise()

    def _normalise(self):
        z = sum(x.sum() for x in self.X.values())
        for sid in self.X:
            self.X[sid] /= z
        return z

    def street_marginal(self):
        return {sid: float(x.sum()) for sid, x in self.X.items()}

    def _v_window(self):
        col = sum(x.sum(axis=(0, 2)) for x in self.X.values())
        nz = np.flatnonzero(col > self.floor * 1e-3)
        return int(nz[0]), int(nz[-1]) + 1

    # -- predict ------------------------------------------------------------------

    def _route(self, lo, hi):
        """Split mass by the sigmoid street-change rule into (dest, heading offset) buckets."""
        lam = self.cfg.transition_sharpness
        buckets = {}
        pending = [(sid, x[:, lo:hi], 0.0) for sid, x in self.X.items() if x.sum() > self.floor]
        v = self.v[lo:hi]
        for hop in range(self.cfg.max_hops + 1):
            nxt = []
            for sid, x, off in pending:
                seg = self.g[sid]
                key = (sid, round(off, 12))
                if not seg.successors or hop == self.cfg.max_hops:
                    stay, leave = x, None
                else:
                    e = self.d_axis(sid)[:, None] + v[None, :] - seg.length
                    p = expit(e / lam)[:, :, None]
                    leave = x * p
                    stay = x - leave
                buckets[key] = stay if key not in buckets else buckets[key] + stay
                if leave is None or leave.sum() <= self.floor:
                    continue
                shift = -int(round(seg.length / H_D))
                share = leave / len(seg.successors)
                for nid in seg.successors:
                    c = float(wrap_angle(seg.beta - self.g[nid].beta))
                    moved = np.zeros((self.n_cells(nid),) + share.shape[1:])
                    _shift_into(moved, share, shift)
                    nxt.append((nid, moved, off + c))
            pending = nxt
            if not pending:
                break
        return buckets

    def _theta_kernel(self, off, sid, y):
        rho = self.cfg.heading_decay
        src = self.th[:, None] + off
        K = _gauss(self.th[None, :] - rho * src, self.q_th)
        K /= K.sum(1, keepdims=True)
        if y.odom is not None:
            R = self.nm.sigma_odom_highway if self.g[sid].road_type == HIGHWAY else self.nm.sigma_odom_city
            K = K * _gauss(y.odom[1] - (self.th[None, :] - src), R[1, 1])
        return K

    def _diffuse(self, x, lo, hi):
        """(d, v) -> (d + v + w, v + w), w ~ N(0, q_d) on the v lattice; x holds columns [lo, hi)."""
        nv = len(self.v)
        klo = max(lo + int(self.noise_k[0]), 0)
        khi = min(hi + int(self.noise_k[-1]) + 1, nv)
        u = np.zeros((x.shape[0], khi - klo, x.shape[2]))
        for k, g in zip(self.noise_k, self.noise_w):
            _shift_into(u, g * x, lo + int(k) - klo, axis=1)
        out = np.zeros((x.shape[0], nv, x.shape[2]))
        for j in range(klo, khi):
            _shift_into(out[:, j], u[:, j - klo], int(self.v_shift[j]))
        return out

    # -- full step ------------------------------------------------------------------

    def step(self, y, sun):
        lo, hi = self._v_window()
        buckets = self._route(lo, hi)
        moved = {}
        for (sid, off), x in buckets.items():
            x = x @ self._theta_kernel(off, sid, y)
            moved[sid] = x if sid not in moved else moved[sid] + x
        nm = self.nm
        new = {}
        for sid in self.ids:
            if sid not in moved:
                new[sid] = self._zeros(sid)
                continue
            x = self._diffuse(moved[sid], lo, hi)
            seg = self.g[sid]
            f = 1.0
            if y.inter is not None:
                f *= nm.gamma_inter if (y.inter == VISIBLE) == (seg.intersection_class == VISIBLE) else 1 - nm.gamma_inter
            if y.rtype is not None:
                f *= nm.beta_rtype if (y.rtype == HIGHWAY) == (seg.road_type == HIGHWAY) else 1 - nm.beta_rtype
            if y.velocity is not None:
                vmax = seg.speed_limit + nm.v0
                f *= 0.99 / vmax if y.velocity <= vmax else nm.eps_speed
            x *= f
            if y.odom is not None:
                R = nm.sigma_odom_highway if seg.road_type == HIGHWAY else nm.sigma_odom_city
                x *= _gauss(y.odom[0] - self.v, R[0, 0])[None, :, None]
            if y.phi is not None and sun is not None and sun.is_daytime:
                pred = sun.map_azimuth - seg.beta - self.th
                x *= _gauss(wrap_angle(y.phi - pred), nm.sigma_sun)[None, None, :]
            new[sid] = x
        self.X = new
        z = self._normalise()
        for sid, x in self.X.items():
            if 0 < x.sum() < self.floor:
                x[...] = 0.0
        return math.log(z)


# -- random maps with exact cell lengths ---------------------------------------------


def _triple_legs(limit=80):
    legs = defaultdict(set)
    for a in range(1, limit):
        for b in range(1, limit):
            c = math.isqrt(a * a + b * b)
            if c * c == a * a + b * b:
                legs[b].add(a)
    by_span = defaultdict(list)
    for b, As in legs.items():
        for a1 in As:
            for a2 in As:
                by_span[a1 + a2].append((b, a1, a2))
    return {L: v for L, v in by_span.items() if 30 <= L <= 90 and len({x[0] for x in v}) >= 2}


_SPANS = _triple_legs()


def theta_map(seed, max_segments=20):
    """Two junctions joined by a two-way straight road and two one-way detours.

    Waypoints sit on Pythagorean triples so every edge, and every piece the
    intersection partition cuts from it, is a whole number of grid cells.
    The layout is rotated by a random angle so headings vary between maps.
    """
    from semloc.road_map import HIGHWAY, NON_HIGHWAY, link_segments, make_segment, partition_for_intersections

    rng = np.random.default_rng(seed)
    spans = sorted(_SPANS)
    while True:
        L = spans[rng.integers(len(spans))]
        opts = _SPANS[L]
        i, j = rng.choice(len(opts), size=2, replace=False)
        (bu, au1, _), (bl, al1, _) = opts[i], opts[j]
        if bu == bl:
            continue
        rot = rng.uniform(-math.pi, math.pi)
        c, s = math.cos(rot), math.sin(rot)

        def pt(x, y):
            return (c * x - s * y, s * x + c * y)

        P, Q = pt(0, 0), pt(L, 0)
        W1, W2 = pt(au1, bu), pt(al1, -bl)

        def kind():
            if rng.random() < 0.3:
                return 60.0, HIGHWAY
            return float(rng.choice([30.0, 50.0])), NON_HIGHWAY

        segs = []

        def add(a, b, pa, pb, spd, rt):
            segs.append(
                make_segment(
                    len(segs), pa, math.atan2(pb[1] - pa[1], pb[0] - pa[0]), math.hypot(pb[0] - pa[0], pb[1] - pa[1]),
                    speed_limit=spd, road_type=rt, start_node=a, end_node=b,
                )
            )

        k = kind()
        add("P", "Q", P, Q, *k)
        add("Q", "P", Q, P, *k)
        k = kind()
        add("Q", "W1", Q, W1, *k)
        add("W1", "P", W1, P, *k)
        k = kind()
        add("P", "W2", P, W2, *k)
        add("W2", "Q", W2, Q, *k)
        g = partition_for_intersections(link_segments(segs, (49.01, 8.40)))
        # snap float noise from the rotation back onto the cell lattice
        if len(g) <= max_segments and all(abs(x.length / H_D - round(x.length / H_D)) < 1e-6 for x in g):
            return _snap(g)


def _snap(g):
    from dataclasses import replace

    from semloc.road_map import RoadGraph

    segs = {sid: replace(s, length=round(s.length / H_D) * H_D) for sid, s in g.segments.items()}
    return RoadGraph(segs, g.frame_origin)
