"""Recursive filtering over (segment, continuous pose) with per-segment Gaussian mixtures.

The posterior is stored flat: component ``k`` lives on graph position
``seg[k]`` with global weight ``weight[k]`` (segment weight times mixture
weight), mean ``mean[k]`` and covariance ``cov[k]`` over
``s = (d, d_prev, theta, theta_prev)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .observation import NoiseModel, ObservationFrame
from .road_map import VISIBLE, RoadGraph, positions, wrap_angle
from .solar import SunPosition

log = logging.getLogger(__name__)

_H_END = np.array([2.0, -1.0, 0.0, 0.0])  # d + (d - d_prev): where the step ends
_GH_X, _GH_W = np.polynomial.hermite.hermgauss(24)
_GH_X = _GH_X * math.sqrt(2.0)
_GH_W = _GH_W / math.sqrt(math.pi)


class FilterDivergence(RuntimeError):
    """Every hypothesis was ruled out by an observation."""


@dataclass(frozen=True)
class VehicleState:
    u: int
    s: tuple[float, float, float, float]


def _default_q():
    return np.diag([1.0, 1e-6, math.radians(3.0) ** 2, 1e-8])


@dataclass
class FilterConfig:
    max_components_per_segment: int = 4
    prune_weight: float = 1e-6
    merge_mahalanobis: float = 1.0
    transition_sharpness: float = 5.0
    dt: float = 1.0
    process_noise: np.ndarray = field(default_factory=_default_q)
    heading_decay: float = 0.0
    init_spacing: float = 20.0
    init_speed: float = 10.0
    init_speed_std: float = 4.0
    init_heading_std: float = math.radians(5.0)
    max_hops: int = 3

    def __post_init__(self):
        q = np.asarray(self.process_noise, dtype=float)
        if q.shape != (4, 4) or not np.allclose(q, q.T) or np.linalg.eigvalsh(q).min() <= 0:
            raise ValueError("process_noise must be a 4x4 SPD matrix")
        self.process_noise = q
        for name in ("max_components_per_segment", "prune_weight", "merge_mahalanobis",
                     "transition_sharpness", "dt", "init_spacing", "max_hops"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def dynamics(self) -> np.ndarray:
        rho = self.heading_decay
        return np.array(
            [[2.0, -1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, rho, 0.0], [0.0, 0.0, 1.0, 0.0]]
        )


@dataclass
class Posterior:
    seg: np.ndarray
    weight: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    t: float = 0.0

    def __len__(self) -> int:
        return len(self.weight)

    def copy(self) -> "Posterior":
        return Posterior(self.seg.copy(), self.weight.copy(), self.mean.copy(), self.cov.copy(), self.t)

    def segment_weights(self, n_segments: int) -> np.ndarray:
        """Street marginal indexed by graph position."""
        return np.bincount(self.seg, weights=self.weight, minlength=n_segments)

    def street_marginal(self, graph: RoadGraph) -> dict[int, float]:
        w = self.segment_weights(len(graph))
        return {graph.ids[i]: float(w[i]) for i in np.flatnonzero(w)}

    def mixture(self, graph: RoadGraph, u: int):
        """(pi, means, covs) of the mixture on segment id ``u``; pi sums to 1."""
        mask = self.seg == graph.index[u]
        w = self.weight[mask]
        return w / w.sum(), self.mean[mask], self.cov[mask]

    def check(self, tol: float = 1e-9) -> None:
        if abs(self.weight.sum() - 1.0) > tol:
            raise AssertionError(f"weights sum to {self.weight.sum()}")
        if np.any(self.weight < 0) or not np.all(np.isfinite(self.mean)):
            raise AssertionError("negative weight or non-finite mean")
        if np.linalg.eigvalsh(self.cov).min() <= 0:
            raise AssertionError("covariance lost positive definiteness")


# -- initialisation ----------------------------------------------------------

def init_uniform(graph: RoadGraph, config: FilterConfig | None = None) -> Posterior:
    """Uniform prior over map length, tiled with Gaussians every ``init_spacing`` metres."""
    config = config or FilterConfig()
    if len(graph) == 0:
        raise ValueError("cannot initialise on an empty graph")
    L = graph.arrays.length
    n = np.maximum(1, np.round(L / config.init_spacing)).astype(int)
    seg = np.repeat(np.arange(len(L)), n)
    k = np.arange(len(seg)) - np.repeat(np.cumsum(n) - n, n)
    width = (L / n)[seg]
    d = (k + 0.5) * width
    weight = (L / L.sum() / n)[seg]

    v = config.init_speed * config.dt
    sd, sv = 0.5 * width, config.init_speed_std * config.dt
    sth = config.init_heading_std
    K = len(seg)
    mean = np.zeros((K, 4))
    mean[:, 0] = d
    mean[:, 1] = d - v
    cov = np.zeros((K, 4, 4))
    cov[:, 0, 0] = sd**2
    cov[:, 0, 1] = cov[:, 1, 0] = sd**2
    cov[:, 1, 1] = sd**2 + sv**2
    cov[:, 2, 2] = sth**2
    cov[:, 2, 3] = cov[:, 3, 2] = sth**2
    cov[:, 3, 3] = 2.0 * sth**2
    return Posterior(seg, weight / weight.sum(), mean, cov, 0.0)


# -- transitions -------------------------------------------------------------

def street_transition_probs(mean, u: int, graph: RoadGraph, config: FilterConfig | None = None) -> dict[int, float]:
    """Point-estimate street transition distribution for one component mean.

    Returns ``{u: p_stay, successor: p_leave / n_successors, ...}``.
    """
    config = config or FilterConfig()
    seg = graph[u]
    if not seg.successors:
        return {u: 1.0}
    x = float(_H_END @ np.asarray(mean, dtype=float)) - seg.length
    p = float(expit(x / config.transition_sharpness))
    out = {u: 1.0 - p}
    for w in seg.successors:
        out[w] = out.get(w, 0.0) + p / len(seg.successors)
    return out


def _tilted_moments(mu, var, lam):
    """Mass and moments of N(x; mu, var) * sigmoid(x/lam) and of N * sigmoid(-x/lam)."""
    sd = np.sqrt(var)
    x = mu[:, None] + sd[:, None] * _GH_X[None, :]
    f = expit(x / lam)
    out = []
    for g in (f, 1.0 - f):
        gw = g * _GH_W
        z = gw.sum(1)
        zs = np.where(z > 0, z, 1.0)
        m = (gw * x).sum(1) / zs
        v = np.maximum((gw * (x - m[:, None]) ** 2).sum(1) / zs, 1e-12 * np.maximum(var, 1e-12))
        out.append((z, m, v))
    return out


def _adf(mean, cov, h, mu, var, m_new, v_new):
    """Condition 4-D Gaussians on new 1-D moments along direction h."""
    ph = cov @ h
    k = ph / var[:, None]
    mean = mean + k * (m_new - mu)[:, None]
    cov = cov + k[:, :, None] * k[:, None, :] * (v_new - var)[:, None, None]
    return mean, 0.5 * (cov + cov.transpose(0, 2, 1))


def _pair_affine(graph: RoadGraph, src: np.ndarray, dst: np.ndarray):
    A = graph.arrays
    da = A.alpha[src] - A.alpha[dst]
    c = wrap_angle(A.beta[src] + A.alpha[src] * A.length[src] - A.beta[dst])
    return da, c - da * A.length[src], A.length[src]


def _apply_pair(mean, cov, graph, src, dst):
    da, off, L = _pair_affine(graph, src, dst)
    K = len(src)
    F = np.broadcast_to(np.eye(4), (K, 4, 4)).copy()
    F[:, 2, 0] = da
    F[:, 3, 1] = da
    m = np.einsum("kij,kj->ki", F, mean)
    m[:, 0] -= L
    m[:, 1] -= L
    m[:, 2] += off
    m[:, 3] += off
    P = F @ cov @ F.transpose(0, 2, 1)
    return m, P


def predict(post: Posterior, graph: RoadGraph, config: FilterConfig | None = None) -> Posterior:
    """Branch every component over street transitions, then apply the linear dynamics."""
    config = config or FilterConfig()
    A = graph.arrays
    nsucc = A.n_successors()
    lam = config.transition_sharpness

    seg, w, m, P = post.seg, post.weight, post.mean, post.cov
    out = []
    for hop in range(config.max_hops + 1):
        if len(w) == 0:
            break
        mu = m @ _H_END - A.length[seg]
        var = np.einsum("i,kij,j->k", _H_END, P, _H_END)
        (zl, ml, vl), (zs, ms, vs) = _tilted_moments(mu, var, lam)
        dead = nsucc[seg] == 0
        zl = np.where(dead, 0.0, zl)
        if hop == config.max_hops:
            zl = np.zeros_like(zl)
        no_leave = zl < 1e-12
        no_stay = (1.0 - zl) < 1e-12
        stay = ~no_stay
        leave = ~no_leave

        # stayers
        sm, sP = m[stay], P[stay]
        tilt = stay & ~no_leave
        if tilt.any():
            i = tilt[stay]
            sm[i], sP[i] = _adf(sm[i], sP[i], _H_END, mu[tilt], var[tilt], ms[tilt], vs[tilt])
        sw = w[stay] * np.where(no_leave, 1.0, zs)[stay]
        out.append((seg[stay], sw, sm, sP))

        if not leave.any():
            break
        lm, lP = m[leave], P[leave]
        i = (~no_stay)[leave]
        if i.any():
            sel = leave & ~no_stay
            lm[i], lP[i] = _adf(lm[i], lP[i], _H_END, mu[sel], var[sel], ml[sel], vl[sel])
        lw = w[leave] * np.where(no_stay, 1.0, zl)[leave]
        src = seg[leave]
        reps = nsucc[src]
        rows = np.repeat(np.arange(len(src)), reps)
        within = np.arange(len(rows)) - np.repeat(np.cumsum(reps) - reps, reps)
        dst = A.succ_idx[A.succ_ptr[src][rows] + within]
        w = lw[rows] / reps[rows]
        m, P = _apply_pair(lm[rows], lP[rows], graph, src[rows], dst)
        seg = dst

    seg = np.concatenate([o[0] for o in out])
    w = np.concatenate([o[1] for o in out])
    m = np.concatenate([o[2] for o in out])
    P = np.concatenate([o[3] for o in out])

    F = config.dynamics
    m = m @ F.T
    P = F @ P @ F.T + config.process_noise
    P = 0.5 * (P + P.transpose(0, 2, 1))
    return Posterior(seg, w / w.sum(), m, P, post.t + config.dt)


# -- measurement update --------------------------------------------------------

def _discrete_log_factor(y: ObservationFrame, seg: np.ndarray, graph: RoadGraph, nm: NoiseModel) -> np.ndarray:
    A = graph.arrays
    out = np.zeros(len(seg))
    if y.inter is not None:
        match = (y.inter == VISIBLE) == A.inter_visible[seg]
        out += np.where(match, math.log(nm.gamma_inter), math.log1p(-nm.gamma_inter) if nm.gamma_inter < 1 else -np.inf)
    if y.rtype is not None:
        match = (y.rtype == "highway") == A.highway[seg]
        out += np.where(match, math.log(nm.beta_rtype), math.log1p(-nm.beta_rtype) if nm.beta_rtype < 1 else -np.inf)
    if y.velocity is not None:
        vmax = A.speed_limit[seg] + nm.v0
        out += np.where(y.velocity <= vmax, np.log(0.99 / vmax), math.log(nm.eps_speed))
    return out


def _kalman(mean, cov, H, R, innov):
    """Batched Kalman update; H (K,m,4), R (K,m,m), innov (K,m). Returns mean, cov, loglik."""
    PHt = cov @ H.transpose(0, 2, 1)
    S = H @ PHt + R
    S = 0.5 * (S + S.transpose(0, 2, 1))
    Sinv = np.linalg.inv(S)
    G = PHt @ Sinv
    mean = mean + np.einsum("kij,kj->ki", G, innov)
    IKH = np.eye(4)[None] - G @ H
    cov = IKH @ cov @ IKH.transpose(0, 2, 1) + G @ R @ G.transpose(0, 2, 1)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    maha = np.einsum("ki,kij,kj->k", innov, Sinv, innov)
    _, logdet = np.linalg.slogdet(S)
    ll = -0.5 * (maha + logdet + innov.shape[1] * math.log(2.0 * math.pi))
    return mean, cov, ll


def update(
    post: Posterior,
    y: ObservationFrame,
    graph: RoadGraph,
    sun: SunPosition | None,
    nm: NoiseModel,
) -> tuple[Posterior, float]:
    """Bayes update with one frame; returns the new posterior and log p(y_t | y_1:t-1).

    Raises FilterDivergence if the frame has (numerically) zero probability.
    """
    A = graph.arrays
    seg, m, P = post.seg, post.mean, post.cov
    logw = np.log(np.maximum(post.weight, 1e-320)) + _discrete_log_factor(y, seg, graph, nm)
    K = len(seg)
    alpha = A.alpha[seg]

    if y.odom is not None:
        H = np.zeros((K, 2, 4))
        H[:, 0, 0], H[:, 0, 1] = 1.0, -1.0
        H[:, 1, 0], H[:, 1, 1] = alpha, -alpha
        H[:, 1, 2], H[:, 1, 3] = 1.0, -1.0
        R = np.where(A.highway[seg][:, None, None], nm.sigma_odom_highway, nm.sigma_odom_city)
        innov = np.asarray(y.odom, dtype=float)[None, :] - np.einsum("kij,kj->ki", H, m)
        m, P, ll = _kalman(m, P, H, R, innov)
        logw = logw + ll

    if y.phi is not None and sun is not None and sun.is_daytime:
        H = np.zeros((K, 1, 4))
        H[:, 0, 0] = -alpha
        H[:, 0, 2] = -1.0
        c = sun.map_azimuth - A.beta[seg]
        pred = -alpha * m[:, 0] - m[:, 2] + c
        innov = wrap_angle(y.phi - pred)[:, None]
        R = np.full((K, 1, 1), nm.sigma_sun)
        m, P, ll = _kalman(m, P, H, R, innov)
        logw = logw + ll

    total = logsumexp(logw)
    if not np.isfinite(total) or total < math.log(1e-300):
        raise FilterDivergence(f"observation at t={y.t} annihilated all hypotheses")
    w = np.exp(logw - total)
    return Posterior(seg, w / w.sum(), m, P, post.t), float(total)


# -- mixture reduction -------------------------------------------------------

def _moment_merge(labels, w, m, P):
    """Moment-match components sharing a label. Labels must be 0..n-1."""
    n = labels.max() + 1
    W = np.bincount(labels, weights=w, minlength=n)
    M = np.zeros((n, 4))
    np.add.at(M, labels, w[:, None] * m)
    M /= W[:, None]
    dm = m - M[labels]
    C = np.zeros((n, 4, 4))
    np.add.at(C, labels, w[:, None, None] * (P + dm[:, :, None] * dm[:, None, :]))
    C /= W[:, None, None]
    return W, M, 0.5 * (C + C.transpose(0, 2, 1))


def merge_prune(post: Posterior, config: FilterConfig | None = None) -> Posterior:
    """Prune light components, merge near-duplicates per segment, cap the count per segment."""
    config = config or FilterConfig()
    keep = post.weight >= config.prune_weight
    if not keep.any():
        keep[np.argmax(post.weight)] = True
    seg, w, m, P = post.seg[keep], post.weight[keep], post.mean[keep], post.cov[keep]
    w = w / w.sum()

    order = np.lexsort((-w, seg))
    seg, w, m, P = seg[order], w[order], m[order], P[order]
    K = len(seg)
    starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
    counts = np.diff(np.r_[starts, K])
    rank = np.arange(K) - np.repeat(starts, counts)
    group = np.repeat(np.arange(len(starts)), counts)

    # greedy clustering: heaviest unassigned component absorbs everything close to it
    cluster = np.full(K, -1)
    multi = counts[group] > 1
    cluster[~multi] = 0
    if multi.any():
        Pinv = np.linalg.inv(P[multi])
        idx_multi = np.flatnonzero(multi)
        g = group[multi]
        thr2 = config.merge_mahalanobis**2
        for r in range(counts.max()):
            free = cluster[idx_multi] < 0
            if not free.any():
                break
            # first free member (heaviest) per group is the centre
            fr = idx_multi[free]
            centre_of = np.full(len(starts), -1)
            first = np.r_[True, group[fr][1:] != group[fr][:-1]]
            centre_of[group[fr][first]] = fr[first]
            c = centre_of[g]
            cand = free & (c >= 0)
            ci = c[cand]
            ii = idx_multi[cand]
            dm = m[ii] - m[ci]
            pinv_i = Pinv[cand]
            pinv_c = Pinv[np.searchsorted(idx_multi, ci)]
            d2 = 0.5 * (np.einsum("ki,kij,kj->k", dm, pinv_i, dm) + np.einsum("ki,kij,kj->k", dm, pinv_c, dm))
            hit = (d2 < thr2) | (ii == ci)
            cluster[ii[hit]] = r
    labels_local = cluster

    # merge clusters within each segment
    key = group * (counts.max() + 1) + labels_local
    uniq, labels = np.unique(key, return_inverse=True)
    W, M, C = _moment_merge(labels, w, m, P)
    gseg = seg[np.unique(labels, return_index=True)[1]]

    # cap per segment: keep the heaviest (max-1), fold the rest into the last slot
    cap = config.max_components_per_segment
    order = np.lexsort((-W, gseg))
    gseg, W, M, C = gseg[order], W[order], M[order], C[order]
    starts = np.flatnonzero(np.r_[True, gseg[1:] != gseg[:-1]])
    counts = np.diff(np.r_[starts, len(gseg)])
    rank = np.arange(len(gseg)) - np.repeat(starts, counts)
    if (counts > cap).any():
        slot = np.minimum(rank, cap - 1)
        key = np.repeat(np.arange(len(starts)), counts) * cap + slot
        uniq, labels = np.unique(key, return_inverse=True)
        W, M, C = _moment_merge(labels, W, M, C)
        gseg = gseg[np.unique(labels, return_index=True)[1]]
    return Posterior(gseg, W / W.sum(), M, C, post.t)


def step(
    post: Posterior,
    y: ObservationFrame,
    graph: RoadGraph,
    sun: SunPosition | None,
    nm: NoiseModel,
    config: FilterConfig | None = None,
) -> tuple[Posterior, float]:
    """predict -> update -> merge_prune."""
    config = config or FilterConfig()
    pred = predict(post, graph, config)
    pred.t = y.t
    upd, ll = update(pred, y, graph, sun, nm)
    return merge_prune(upd, config), ll


# -- summaries -----------------------------------------------------------------

def component_positions(post: Posterior, graph: RoadGraph) -> np.ndarray:
    return positions(graph, post.seg, post.mean[:, 0])


def component_headings(post: Posterior, graph: RoadGraph) -> np.ndarray:
    A = graph.arrays
    return wrap_angle(post.mean[:, 2] + A.beta[post.seg] + A.alpha[post.seg] * post.mean[:, 0])


@dataclass
class Mode:
    position: np.ndarray
    mass: float
    heading: float
    members: np.ndarray


def mode_analysis(post: Posterior, graph: RoadGraph, radius: float = 200.0, max_modes: int | None = None) -> list[Mode]:
    """Greedy clustering of posterior mass by planar position.

    The heaviest remaining component seeds a mode that absorbs every
    component within ``radius`` metres; repeat until all mass is assigned
    (or ``max_modes`` modes exist).  Modes come back sorted by mass.
    """
    return cluster_modes(component_positions(post, graph), post.weight, component_headings(post, graph), radius, max_modes)


def cluster_modes(pos, w, head, radius: float = 200.0, max_modes: int | None = None) -> list[Mode]:
    """The clustering behind :func:`mode_analysis`, for any weighted point set."""
    pos, w, head = np.asarray(pos, dtype=float), np.asarray(w, dtype=float), np.asarray(head, dtype=float)
    free = np.ones(len(w), dtype=bool)
    modes = []
    while free.any() and (max_modes is None or len(modes) < max_modes):
        i = np.flatnonzero(free)[np.argmax(w[free])]
        near = free & (np.hypot(*(pos - pos[i]).T) <= radius)
        mass = w[near].sum()
        centre = (w[near, None] * pos[near]).sum(0) / mass if mass > 0 else pos[i]
        hd = math.atan2((w[near] * np.sin(head[near])).sum(), (w[near] * np.cos(head[near])).sum())
        modes.append(Mode(centre, float(mass), hd, np.flatnonzero(near)))
        free &= ~near
    modes.sort(key=lambda md: -md.mass)
    return modes


def is_localized(top_fractions, window: int = 10, dominance: float = 0.95) -> bool:
    """True once ``window`` consecutive frames had a top mode holding >= ``dominance``."""
    return localization_index(top_fractions, window, dominance) is not None


def localization_index(top_fractions, window: int = 10, dominance: float = 0.95) -> int | None:
    """Index of the frame completing the first qualifying window, or None."""
    run = 0
    for i, f in enumerate(top_fractions):
        run = run + 1 if f >= dominance else 0
        if run >= window:
            return i
    return None


def top_mode_fraction(post: Posterior, graph: RoadGraph, radius: float = 200.0) -> float:
    modes = mode_analysis(post, graph, radius, max_modes=1)
    return modes[0].mass / post.weight.sum() if modes else 0.0


# -- dumps ---------------------------------------------------------------------

def posterior_bins(post: Posterior, graph: RoadGraph, bin_size: float = 3.0):
    """Mass per ``bin_size`` bin of every segment.

    Returns (segment position, bin start, mass) arrays covering every bin of
    the map.  Mass falling before/after a segment is assigned to its
    first/last bin.
    """
    from scipy.special import ndtr

    A = graph.arrays
    nb = np.maximum(1, np.ceil(A.length / bin_size - 1e-9)).astype(int)
    offs = np.r_[0, np.cumsum(nb)]
    total = np.zeros(offs[-1])
    k_nb = nb[post.seg]
    rows = np.repeat(np.arange(len(post)), k_nb)
    j = np.arange(len(rows)) - np.repeat(np.cumsum(k_nb) - k_nb, k_nb)
    sd = np.sqrt(post.cov[rows, 0, 0])
    mu = post.mean[rows, 0]
    L = A.length[post.seg[rows]]
    lo = np.where(j == 0, -np.inf, j * bin_size)
    hi = np.where(j == k_nb[rows] - 1, np.inf, np.minimum((j + 1) * bin_size, L))
    mass = post.weight[rows] * (ndtr((hi - mu) / sd) - ndtr((lo - mu) / sd))
    np.add.at(total, offs[post.seg[rows]] + j, mass)
    seg_of_bin = np.repeat(np.arange(len(nb)), nb)
    start = (np.arange(offs[-1]) - offs[seg_of_bin]) * bin_size
    return seg_of_bin, start, total
