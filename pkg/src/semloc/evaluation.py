"""Running the filter over a drive, and the metrics computed from that run."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from .mixture_filter import (
    FilterConfig,
    FilterDivergence,
    Posterior,
    cluster_modes,
    component_headings,
    component_positions,
    init_uniform,
    localization_index,
    posterior_bins,
    step,
)
from .observation import CUES, NoiseModel
from .road_map import RoadGraph, positions, wrap_angle
from .solar import parse_utc, sun_position

log = logging.getLogger(__name__)

DUMP_COLUMNS = ("t", "segment_id", "bin_start_m", "mass")
BIN_SIZE = 3.0
BIN_TAU = 1e-6
DUMP_FLOOR = 1e-12
MODE_RADIUS = 200.0
PEAK_RADIUS = 20.0
SUCCESS_RADIUS = 20.0
WINDOW = 10
DOMINANCE = 0.95


class SunProvider:
    """Sun position at drive time ``t`` seconds after ``start_utc``; picklable."""

    def __init__(self, start_utc, lat: float, lon: float):
        self.t0 = parse_utc(start_utc)
        self.lat, self.lon = float(lat), float(lon)
        self._at = lru_cache(maxsize=4096)(self._compute)

    def _compute(self, t):
        return sun_position(self.t0 + t, self.lat, self.lon)

    def __call__(self, t):
        return self._at(float(t))

    def __getstate__(self):
        return {"t0": self.t0, "lat": self.lat, "lon": self.lon}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._at = lru_cache(maxsize=4096)(self._compute)


def normalize_cues(cues: str) -> str:
    cues = "".join(sorted(set(cues.upper()), key=CUES.index)) if cues else ""
    bad = set(cues) - set(CUES)
    if bad:
        raise ValueError(f"unknown cue letters {sorted(bad)}; use a subset of {CUES}")
    return cues


# -- posterior summaries ----------------------------------------------------------


def point_estimate(post: Posterior, graph: RoadGraph, radius: float = PEAK_RADIUS):
    """Position and heading of the dominant peak.

    The heaviest component and every component within ``radius`` metres of
    it are averaged.  Unlike the global mean this stays on the road when the
    posterior is multimodal.
    """
    pos = component_positions(post, graph)
    head = component_headings(post, graph)
    return _peak(pos, post.weight, head, radius)


def _peak(pos, w, head, radius):
    i = int(np.argmax(w))
    near = np.hypot(*(pos - pos[i]).T) <= radius
    wn = w[near]
    xy = (wn[:, None] * pos[near]).sum(0) / wn.sum()
    hd = math.atan2((wn * np.sin(head[near])).sum(), (wn * np.cos(head[near])).sum())
    return xy, hd


def bin_count(masses, tau: float = BIN_TAU) -> int:
    return int(np.count_nonzero(np.asarray(masses) > tau))


# -- running --------------------------------------------------------------------


@dataclass
class RunHistory:
    """Per-frame summaries of one filter run.

    ``bin_counts`` and ``bin_times`` include the prior at t=0; the other
    arrays have one entry per observation frame.
    """

    cues: str
    t: np.ndarray
    mode_masses: list
    estimate: np.ndarray
    heading: np.ndarray
    loglik: np.ndarray
    wall_time: np.ndarray
    bin_times: np.ndarray
    bin_counts: np.ndarray
    resets: int = 0

    @property
    def top_fraction(self) -> np.ndarray:
        return np.array([m[0] if m else 0.0 for m in self.mode_masses])


class PosteriorDump:
    """Writes ``t,segment_id,bin_start_m,mass`` rows for bins above ``floor``."""

    def __init__(self, path, floor: float = DUMP_FLOOR):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(DUMP_COLUMNS)
        self.floor = floor

    def write(self, t, seg_ids, starts, masses):
        keep = masses > self.floor
        for s, b, m in zip(seg_ids[keep], starts[keep], masses[keep]):
            self.w.writerow((repr(float(t)), int(s), repr(float(b)), repr(float(m))))

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FilterRun:
    """Incremental filter run; ``feed`` may be called repeatedly with more frames.

    The posterior restarts from the uniform prior if it ever diverges.
    """

    def __init__(self, graph: RoadGraph, nm: NoiseModel | None = None, config: FilterConfig | None = None,
                 cues: str = CUES, sun_at=None, dump: PosteriorDump | None = None,
                 mode_radius: float = MODE_RADIUS, on_step=None):
        self.graph = graph
        self.nm = nm or NoiseModel()
        self.config = config or FilterConfig()
        self.cues = normalize_cues(cues)
        self.sun_at = sun_at
        self.dump = dump
        self.mode_radius = mode_radius
        self.on_step = on_step
        self._ids = np.asarray(graph.ids)
        self.post = init_uniform(graph, self.config)
        self.resets = 0
        self._t, self._modes, self._est, self._head, self._ll, self._wall = [], [], [], [], [], []
        self._bin_t, self._counts = [], []
        self._record_bins(0.0)

    def _record_bins(self, t):
        seg, start, mass = posterior_bins(self.post, self.graph, BIN_SIZE)
        self._bin_t.append(t)
        self._counts.append(bin_count(mass))
        if self.dump is not None:
            self.dump.write(t, self._ids[seg], start, mass)

    def feed(self, frames) -> "FilterRun":
        g = self.graph
        for y in frames:
            y = y.masked(self.cues)
            if self._t and y.t <= self._t[-1]:
                raise ValueError(f"frame times must increase; got {y.t} after {self._t[-1]}")
            sun = self.sun_at(y.t) if (self.sun_at is not None and y.phi is not None) else None
            tic = time.perf_counter()
            try:
                self.post, ll = step(self.post, y, g, sun, self.nm, self.config)
            except FilterDivergence as exc:
                log.warning("%s; restarting from the uniform prior", exc)
                self.resets += 1
                self.post, ll = init_uniform(g, self.config), float("nan")
                self.post.t = y.t
            self._wall.append(time.perf_counter() - tic)

            pos = component_positions(self.post, g)
            hd = component_headings(self.post, g)
            ms = cluster_modes(pos, self.post.weight, hd, self.mode_radius)
            xy, h = _peak(pos, self.post.weight, hd, PEAK_RADIUS)
            self._t.append(y.t)
            self._modes.append([m.mass for m in ms])
            self._est.append(xy)
            self._head.append(h)
            self._ll.append(ll)
            self._record_bins(y.t)
            if self.on_step is not None:
                self.on_step(self.post)
        return self

    def history(self) -> RunHistory:
        return RunHistory(
            cues=self.cues,
            t=np.asarray(self._t, dtype=float),
            mode_masses=list(self._modes),
            estimate=np.asarray(self._est, dtype=float).reshape(-1, 2),
            heading=np.asarray(self._head, dtype=float),
            loglik=np.asarray(self._ll, dtype=float),
            wall_time=np.asarray(self._wall, dtype=float),
            bin_times=np.asarray(self._bin_t, dtype=float),
            bin_counts=np.asarray(self._counts, dtype=int),
            resets=self.resets,
        )


def run_filter(
    graph: RoadGraph,
    frames,
    nm: NoiseModel | None = None,
    config: FilterConfig | None = None,
    cues: str = CUES,
    sun_at=None,
    dump: PosteriorDump | None = None,
    mode_radius: float = MODE_RADIUS,
    on_step=None,
) -> RunHistory:
    """Filter a whole observation sequence and return its per-frame summaries."""
    return FilterRun(graph, nm, config, cues, sun_at, dump, mode_radius, on_step).feed(frames).history()


# -- metrics ----------------------------------------------------------------------


def gini_index(counts, times=None, reference: float | None = None) -> float:
    """Area ratio A / (A + B) of the bin-count curve.

    B is the trapezoid area under ``counts`` over ``times``; A is the area
    between the horizontal line at ``reference`` (default: the first count)
    and the curve.  1 means instant collapse, 0 means nothing was pruned.
    """
    counts = np.asarray(counts, dtype=float)
    times = np.arange(len(counts), dtype=float) if times is None else np.asarray(times, dtype=float)
    if len(counts) < 2 or times[-1] <= times[0]:
        return 0.0
    ref = counts[0] if reference is None else float(reference)
    if ref <= 0:
        return 0.0
    B = float(trapezoid(counts, times))
    total = ref * (times[-1] - times[0])
    return float(np.clip((total - B) / total, 0.0, 1.0))


def _gt_lookup(gt):
    return {round(float(f.t), 6): f for f in gt}


def _gt_at(lookup, t):
    f = lookup.get(round(float(t), 6))
    if f is None:
        raise KeyError(f"no ground-truth frame at t={t}")
    return f


def frame_errors(history: RunHistory, gt):
    """Per-frame (position error m, heading error deg) of the peak estimate."""
    lookup = _gt_lookup(gt)
    ref = [_gt_at(lookup, t) for t in history.t]
    xy = np.array([f.xy for f in ref]).reshape(-1, 2)
    hd = np.array([f.heading for f in ref])
    pos_err = np.hypot(*(history.estimate - xy).T)
    head_err = np.degrees(np.abs(wrap_angle(history.heading - hd)))
    return pos_err, np.atleast_1d(head_err)


def localization_frame(history: RunHistory, gt=None, strict: bool = True, window: int = WINDOW,
                       dominance: float = DOMINANCE, tolerance: float = SUCCESS_RADIUS) -> int | None:
    """Index of the frame at which the run counts as localized, or None.

    With ``strict`` the dominant peak must also lie within ``tolerance``
    metres of ground truth at that frame.
    """
    i = localization_index(history.top_fraction, window, dominance)
    if i is None or not strict or gt is None:
        return i
    pos_err, _ = frame_errors(history, gt)
    return i if pos_err[i] <= tolerance else None


def localization_time(history: RunHistory, gt=None, strict: bool = True, **kw) -> float | None:
    """Driving time (s) at which localization is declared; None if never."""
    i = localization_frame(history, gt, strict, **kw)
    return None if i is None else float(history.t[i])


def error_metrics(history: RunHistory, gt, strict: bool = True, **kw):
    """Mean (position m, heading deg) over localized frames; None when never localized."""
    i = localization_frame(history, gt, strict, **kw)
    if i is None:
        return None
    pos_err, head_err = frame_errors(history, gt)
    return float(pos_err[i:].mean()), float(head_err[i:].mean())


@dataclass
class RunReport:
    cues: str
    localized: bool
    localization_time: float | None
    position_error: float | None
    heading_error: float | None
    gini: float
    wall_time_per_frame: float
    n_frames: int
    resets: int = 0
    strict: bool = True
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.gini <= 1.0:
            raise ValueError("gini must lie in [0, 1]")
        if self.localization_time is not None and self.localization_time < 0:
            raise ValueError("localization_time must be non-negative")

    @property
    def time_label(self) -> str:
        return "*" if self.localization_time is None else f"{self.localization_time:g}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["localization_time_label"] = self.time_label
        return d


def make_report(history: RunHistory, gt=None, strict: bool = True) -> RunReport:
    t_loc = localization_time(history, gt, strict)
    errs = error_metrics(history, gt, strict) if gt is not None else None
    return RunReport(
        cues=history.cues,
        localized=t_loc is not None,
        localization_time=t_loc,
        position_error=None if errs is None else errs[0],
        heading_error=None if errs is None else errs[1],
        gini=gini_index(history.bin_counts, history.bin_times),
        wall_time_per_frame=float(history.wall_time.mean()) if len(history.wall_time) else 0.0,
        n_frames=len(history.t),
        resets=history.resets,
        strict=strict,
    )


def failed_report(cues: str, exc: Exception) -> RunReport:
    return RunReport(cues, False, None, None, None, 0.0, 0.0, 0, error=f"{type(exc).__name__}: {exc}")


# -- dumps on disk ------------------------------------------------------------------


def read_dump(path):
    """Load a posterior dump as {t: (segment_ids, bin_starts, masses)} in time order."""
    rows: dict[float, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(DUMP_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"dump is missing columns {sorted(missing)}")
        for r in reader:
            rows.setdefault(float(r["t"]), []).append((int(r["segment_id"]), float(r["bin_start_m"]), float(r["mass"])))
    out = {}
    for t in sorted(rows):
        a = np.array(rows[t], dtype=float).reshape(-1, 3)
        out[t] = (a[:, 0].astype(int), a[:, 1], a[:, 2])
    return out


def history_from_dump(dump, graph: RoadGraph | None = None, cues: str = "", mode_radius: float = MODE_RADIUS) -> RunHistory:
    """Rebuild a RunHistory from dumped bins.

    Without a map only the bin counts are known; with one, each bin stands
    in for a point mass at its centre (heading offset taken as zero).
    """
    times = np.array(sorted(dump))
    counts = np.array([bin_count(dump[t][2]) for t in times])
    frames = times[1:] if len(times) and times[0] == 0.0 else times
    modes, est, head = [], [], []
    if graph is not None:
        A = graph.arrays
        for t in frames:
            sid, start, mass = dump[t]
            p = np.array([graph.index[s] for s in sid], dtype=int)
            centre = np.minimum(start + BIN_SIZE / 2.0, (start + A.length[p]) / 2.0)
            pos = positions(graph, p, centre)
            hd = wrap_angle(A.beta[p] + A.alpha[p] * centre)
            ms = cluster_modes(pos, mass, hd, mode_radius)
            total = mass.sum()
            modes.append([m.mass / total for m in ms])
            xy, h = _peak(pos, mass, hd, PEAK_RADIUS)
            est.append(xy)
            head.append(h)
    return RunHistory(
        cues=cues,
        t=frames,
        mode_masses=modes,
        estimate=np.asarray(est, dtype=float).reshape(-1, 2),
        heading=np.asarray(head, dtype=float),
        loglik=np.full(len(frames), np.nan),
        wall_time=np.zeros(0),
        bin_times=times,
        bin_counts=counts,
    )


# -- ablation -----------------------------------------------------------------------

DEFAULT_SUBSETS = ("O", "OS", "OI", "OR", "OV", "OSIRV")


def _ablation_run(graph, frames, gt, cues, nm, config, sun_at, dump_dir, strict):
    try:
        if dump_dir is not None:
            with PosteriorDump(Path(dump_dir) / f"posterior_{cues or 'none'}.csv") as dump:
                hist = run_filter(graph, frames, nm, config, cues, sun_at, dump)
        else:
            hist = run_filter(graph, frames, nm, config, cues, sun_at)
        return make_report(hist, gt, strict)
    except Exception as exc:  # one bad run must not sink the table
        log.error("run with cues %r failed: %s", cues, exc)
        return failed_report(cues, exc)


def run_ablation(
    graph: RoadGraph,
    frames,
    gt=None,
    subsets=DEFAULT_SUBSETS,
    nm: NoiseModel | None = None,
    config: FilterConfig | None = None,
    sun_at=None,
    n_jobs: int = 1,
    dump_dir=None,
    strict: bool = True,
) -> list[RunReport]:
    """Filter the same observations once per cue subset; one RunReport each."""
    from joblib import Parallel, delayed

    subsets = [normalize_cues(s) for s in subsets]
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    jobs = (delayed(_ablation_run)(graph, frames, gt, s, nm, config, sun_at, dump_dir, strict) for s in subsets)
    return list(Parallel(n_jobs=n_jobs)(jobs))


TABLE_COLUMNS = ("cues", "localized", "localization_time", "position_error_m", "heading_error_deg",
                 "gini", "wall_time_s", "resets", "error")


def write_table(path, reports) -> None:
    def fmt(x):
        return "" if x is None else (f"{x:.6g}" if isinstance(x, float) else str(x))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in reports:
            w.writerow([r.cues, int(r.localized), r.time_label, fmt(r.position_error), fmt(r.heading_error),
                        fmt(r.gini), fmt(r.wall_time_per_frame), r.resets, r.error or ""])
