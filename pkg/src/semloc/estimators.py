"""scikit-learn style wrappers around the noise fitting and the localization filter."""

from __future__ import annotations

import copy
import os
from collections.abc import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import MODE_RADIUS, FilterRun, SunProvider, localization_time, normalize_cues
from .mixture_filter import FilterConfig
from .observation import RESIDUAL_COLUMNS, NoiseModel, ObservationFrame, fit_noise, fit_noise_csv
from .road_map import RoadGraph


def check_frames(frames) -> list[ObservationFrame]:
    """Materialise ``frames`` and check they are observation frames in strictly increasing time."""
    if isinstance(frames, (str, bytes, os.PathLike)):
        raise TypeError("frames must be a sequence of ObservationFrame, not a path; use read_observations")
    frames = list(frames)
    for f in frames:
        if not isinstance(f, ObservationFrame):
            raise TypeError(f"expected ObservationFrame, got {type(f).__name__}")
    t = np.array([f.t for f in frames], dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("frame times must be finite")
    if np.any(np.diff(t) <= 0):
        raise ValueError("frame times must be strictly increasing")
    return frames


def check_graph(graph) -> RoadGraph:
    if not isinstance(graph, RoadGraph):
        raise TypeError(f"graph must be a RoadGraph, got {type(graph).__name__}")
    if len(graph) == 0:
        raise ValueError("graph has no segments")
    return graph


def check_residuals(residuals) -> dict:
    """Normalise residual input to a dict of column lists.

    Accepts a mapping of columns, a sequence of row mappings, or a structured
    numpy array, all keyed by the residual CSV column names.
    """
    if isinstance(residuals, np.ndarray) and residuals.dtype.names:
        cols = {k: residuals[k].tolist() for k in residuals.dtype.names}
    elif isinstance(residuals, Mapping):
        cols = {k: list(np.atleast_1d(v)) for k, v in residuals.items()}
    elif isinstance(residuals, Sequence) and residuals and isinstance(residuals[0], Mapping):
        keys = set().union(*(r.keys() for r in residuals))
        cols = {k: [r.get(k) for r in residuals] for k in keys}
    else:
        raise TypeError("residuals must be a path, a column mapping, a list of row mappings or a structured array")
    unknown = set(cols) - set(RESIDUAL_COLUMNS)
    if unknown:
        raise ValueError(f"unknown residual columns {sorted(unknown)}")
    n = {len(v) for v in cols.values()}
    if len(n) > 1:
        raise ValueError("residual columns differ in length")
    return cols


def _present(v):
    if v is None:
        return False
    if isinstance(v, float) and np.isnan(v):
        return False
    return not (isinstance(v, str) and v.strip() == "")


class NoiseModelEstimator(BaseEstimator):
    """Maximum-likelihood NoiseModel from labelled residuals.

    Parameters not covered by the data keep the value from ``base``.
    """

    def __init__(self, base: NoiseModel | None = None):
        self.base = base

    def fit(self, residuals, y=None):
        if isinstance(residuals, (str, os.PathLike)):
            self.noise_model_ = fit_noise_csv(residuals, base=self.base)
            return self
        cols = check_residuals(residuals)
        n = len(next(iter(cols.values()), []))
        col = lambda k: cols.get(k, [None] * n)  # noqa: E731
        od, cls, sun = [], [], []
        for d, th, c, s in zip(col("res_d"), col("res_theta"), col("class"), col("res_sun")):
            if _present(d) and _present(th):
                od.append((float(d), float(th)))
                cls.append(c if _present(c) else "non_highway")
            if _present(s):
                sun.append(float(s))
        clean = lambda k: [v if _present(v) else None for v in col(k)]  # noqa: E731
        self.noise_model_ = fit_noise(
            od or None, cls, sun or None,
            clean("inter_pred"), clean("inter_gt"), clean("rtype_pred"), clean("rtype_gt"),
            base=self.base,
        )
        return self

    def transform(self, X=None) -> NoiseModel:
        check_is_fitted(self, "noise_model_")
        return self.noise_model_


class SemanticLocalizer(BaseEstimator):
    """Map-based localization filter with an estimator interface.

    ``fit(frames)`` filters a drive from the uniform prior, ``partial_fit``
    continues from the current posterior, and ``predict`` returns one
    ``(x, y, heading)`` row per frame.  Sun cues need ``start_utc``; the
    observer location defaults to the map's frame origin.
    """

    def __init__(
        self,
        graph: RoadGraph | None = None,
        noise_model: NoiseModel | None = None,
        cues: str = "OSIRV",
        start_utc=None,
        origin=None,
        transition_sharpness: float = 5.0,
        max_components_per_segment: int = 4,
        prune_weight: float = 1e-6,
        merge_mahalanobis: float = 1.0,
        heading_decay: float = 0.0,
        mode_radius: float = MODE_RADIUS,
    ):
        self.graph = graph
        self.noise_model = noise_model
        self.cues = cues
        self.start_utc = start_utc
        self.origin = origin
        self.transition_sharpness = transition_sharpness
        self.max_components_per_segment = max_components_per_segment
        self.prune_weight = prune_weight
        self.merge_mahalanobis = merge_mahalanobis
        self.heading_decay = heading_decay
        self.mode_radius = mode_radius

    def _config(self) -> FilterConfig:
        return FilterConfig(
            transition_sharpness=self.transition_sharpness,
            max_components_per_segment=self.max_components_per_segment,
            prune_weight=self.prune_weight,
            merge_mahalanobis=self.merge_mahalanobis,
            heading_decay=self.heading_decay,
        )

    def _new_run(self) -> FilterRun:
        g = check_graph(self.graph)
        cues = normalize_cues(self.cues)
        sun_at = None
        if "S" in cues and self.start_utc is not None:
            lat, lon = self.origin if self.origin is not None else g.frame_origin
            sun_at = SunProvider(self.start_utc, lat, lon)
        return FilterRun(g, self.noise_model, self._config(), cues, sun_at, mode_radius=self.mode_radius)

    def fit(self, frames, y=None):
        self.run_ = self._new_run()
        return self.partial_fit(frames)

    def partial_fit(self, frames, y=None):
        frames = check_frames(frames)
        if not hasattr(self, "run_"):
            self.run_ = self._new_run()
        self.run_.feed(frames)
        self.history_ = self.run_.history()
        self.posterior_ = self.run_.post
        self.n_frames_ = len(self.history_.t)
        return self

    def predict(self, frames=None) -> np.ndarray:
        """Poses for the fitted frames, or for ``frames`` continued from a copy of the posterior."""
        check_is_fitted(self, "run_")
        if frames is None:
            h = self.history_
            start = 0
        else:
            frames = check_frames(frames)
            run = copy.deepcopy(self.run_)
            start = len(run.history().t)
            h = run.feed(frames).history()
        return np.column_stack([h.estimate[start:], h.heading[start:]])

    def localization_time(self, gt=None, strict: bool = True) -> float | None:
        check_is_fitted(self, "history_")
        return localization_time(self.history_, gt, strict)
