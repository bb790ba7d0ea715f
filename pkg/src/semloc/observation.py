"""Per-frame observations and their likelihoods given a vehicle state.

The state ``x = (u, s)`` pairs a segment id with ``s = (d, d_prev, theta,
theta_prev)``.  Sun and odometry terms are Gaussian and linear in ``s``; the
intersection, road-type and speed terms depend on the segment only.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal

import numpy as np

from .road_map import HIGHWAY, NON_HIGHWAY, VISIBLE, RoadGraph, wrap_angle
from .solar import SunPosition

NOT_VISIBLE_OBS = "not_visible"
CUES = "OSIRV"

SUN_VAR_FLOOR = math.radians(2.0) ** 2
ODOM_D_VAR_FLOOR = 0.05**2
ODOM_TH_VAR_FLOOR = math.radians(0.2) ** 2


class FittingError(ValueError):
    pass


@dataclass(frozen=True)
class ObservationFrame:
    """One time step of measurements; ``None`` marks a missing channel.

    ``inter`` is ``"visible"``/``"not_visible"``, ``rtype`` is
    ``"highway"``/``"non_highway"``, ``velocity`` is km/h and ``odom`` is
    (forward distance in m, global heading change in rad).
    """

    t: float
    phi: float | None = None
    inter: str | None = None
    rtype: str | None = None
    velocity: float | None = None
    odom: tuple[float, float] | None = None

    def masked(self, cues: str) -> "ObservationFrame":
        """Drop every channel whose cue letter (O, S, I, R, V) is not in ``cues``."""
        cues = cues.upper()
        return ObservationFrame(
            t=self.t,
            phi=self.phi if "S" in cues else None,
            inter=self.inter if "I" in cues else None,
            rtype=self.rtype if "R" in cues else None,
            velocity=self.velocity if "V" in cues else None,
            odom=self.odom if "O" in cues else None,
        )

    @property
    def is_empty(self) -> bool:
        return all(v is None for v in (self.phi, self.inter, self.rtype, self.velocity, self.odom))


def _cov(sd_d, sd_th):
    return np.diag([sd_d**2, sd_th**2])


@dataclass(frozen=True)
class NoiseModel:
    sigma_sun: float = math.radians(15.0) ** 2
    sigma_odom_city: np.ndarray = field(default_factory=lambda: _cov(0.3, math.radians(0.5)))
    sigma_odom_highway: np.ndarray = field(default_factory=lambda: _cov(0.6, math.radians(1.0)))
    gamma_inter: float = 0.8
    beta_rtype: float = 0.9
    v0: float = 25.0
    eps_speed: float = 1e-4

    def __post_init__(self):
        for name in ("sigma_odom_city", "sigma_odom_highway"):
            c = np.array(getattr(self, name), dtype=float).reshape(2, 2)
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")
            object.__setattr__(self, name, c)
        if not self.sigma_sun > 0:
            raise ValueError("sigma_sun must be positive")
        for name in ("gamma_inter", "beta_rtype"):
            p = getattr(self, name)
            if not 0.5 < p <= 1.0:
                raise ValueError(f"{name} must lie in (0.5, 1]")
        if not self.eps_speed > 0:
            raise ValueError("eps_speed must be positive")

    def odom_cov(self, highway: bool) -> np.ndarray:
        return self.sigma_odom_highway if highway else self.sigma_odom_city

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_odom_city"] = self.sigma_odom_city.tolist()
        d["sigma_odom_highway"] = self.sigma_odom_highway.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "NoiseModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _state(x):
    """Return (u, d, theta, s) from a VehicleState-like or MapPose-like object."""
    if hasattr(x, "s"):
        s = np.asarray(x.s, dtype=float)
        return x.u, s[0], s[2], s
    return x.u, x.d, x.theta, None


def _gauss(r, var):
    return math.exp(-0.5 * r * r / var) / math.sqrt(2.0 * math.pi * var)


# -- sun --------------------------------------------------------------------

def sun_linear_model(u: int, graph: RoadGraph, sun: SunPosition) -> tuple[np.ndarray, float]:
    """``(h, c)`` with predicted relative sun ``h @ s + c`` (before wrapping)."""
    seg = graph[u]
    return np.array([-seg.alpha, 0.0, -1.0, 0.0]), sun.map_azimuth - seg.beta


def sun_residual(phi_obs: float, x, graph: RoadGraph, sun: SunPosition) -> float:
    u, d, theta, _ = _state(x)
    seg = graph[u]
    mu = sun.map_azimuth - (theta + seg.beta + seg.alpha * d)
    return wrap_angle(phi_obs - mu)


def sun_likelihood(phi_obs, x, graph: RoadGraph, sun: SunPosition | None, nm: NoiseModel) -> float:
    if phi_obs is None or sun is None or not sun.is_daytime:
        return 1.0
    return _gauss(sun_residual(phi_obs, x, graph, sun), nm.sigma_sun)


# -- discrete terms -----------------------------------------------------------

def complement(p: float) -> float:
    """1 - p computed on the decimal value of ``p``, so 1 - 0.8 is exactly 0.2."""
    return float(1 - Decimal(repr(float(p))))


def intersection_likelihood(i_obs, u: int, graph: RoadGraph, nm: NoiseModel) -> float:
    if i_obs is None:
        return 1.0
    seg_visible = graph[u].intersection_class == VISIBLE
    return nm.gamma_inter if (i_obs == VISIBLE) == seg_visible else complement(nm.gamma_inter)


def road_type_likelihood(r_obs, u: int, graph: RoadGraph, nm: NoiseModel) -> float:
    if r_obs is None:
        return 1.0
    return nm.beta_rtype if r_obs == graph[u].road_type else complement(nm.beta_rtype)


def speed_likelihood(v, u: int, graph: RoadGraph, nm: NoiseModel) -> float:
    if v is None:
        return 1.0
    vmax = graph[u].speed_limit + nm.v0
    return 0.99 / vmax if v <= vmax else nm.eps_speed


# -- odometry -----------------------------------------------------------------

def odometry_matrix(alpha: float) -> np.ndarray:
    return np.array([[1.0, -1.0, 0.0, 0.0], [alpha, -alpha, 1.0, -1.0]])


def odometry_likelihood(odom, s, u: int, graph: RoadGraph, nm: NoiseModel) -> float:
    if odom is None:
        return 1.0
    seg = graph[u]
    cov = nm.odom_cov(seg.road_type == HIGHWAY)
    det = float(np.linalg.det(cov))
    if det <= 0:
        raise ValueError("odometry covariance is singular")
    r = np.asarray(odom, dtype=float) - odometry_matrix(seg.alpha) @ np.asarray(s, dtype=float)
    return math.exp(-0.5 * r @ np.linalg.solve(cov, r)) / (2.0 * math.pi * math.sqrt(det))


def frame_likelihood(y: ObservationFrame, x, graph: RoadGraph, sun: SunPosition | None, nm: NoiseModel) -> float:
    """Product of the likelihood terms present in ``y``."""
    u, _, _, s = _state(x)
    lik = sun_likelihood(y.phi, x, graph, sun, nm)
    lik *= intersection_likelihood(y.inter, u, graph, nm)
    lik *= road_type_likelihood(y.rtype, u, graph, nm)
    lik *= speed_likelihood(y.velocity, u, graph, nm)
    if y.odom is not None:
        if s is None:
            raise ValueError("odometry needs the full 4-vector state")
        lik *= odometry_likelihood(y.odom, s, u, graph, nm)
    return lik


# -- learning -----------------------------------------------------------------

def _confusion_rate(pred, gt, name):
    pairs = [(p, g) for p, g in zip(pred, gt) if p is not None and g is not None]
    if not pairs:
        return None
    rate = sum(p == g for p, g in pairs) / len(pairs)
    if rate <= 0.5:
        raise FittingError(f"{name}: classifier accuracy {rate:.3f} is not better than chance")
    return rate


def fit_noise(
    odom_residuals=None,
    road_class=None,
    sun_residuals=None,
    inter_pred=(),
    inter_gt=(),
    rtype_pred=(),
    rtype_gt=(),
    base: NoiseModel | None = None,
) -> NoiseModel:
    """Maximum-likelihood noise parameters from residuals and confusion counts.

    ``odom_residuals`` is (N, 2) with ``road_class`` giving "highway" or
    "non_highway" per row.  Covariances divide by N.  Parameters without data
    keep the value from ``base`` (defaults otherwise).
    """
    base = base or NoiseModel()
    updates = {}
    if odom_residuals is not None and len(odom_residuals):
        res = np.asarray(odom_residuals, dtype=float).reshape(-1, 2)
        cls = np.asarray(road_class)
        for label, key in ((NON_HIGHWAY, "sigma_odom_city"), (HIGHWAY, "sigma_odom_highway")):
            r = res[cls == label]
            if len(r) == 0:
                continue
            if len(r) < 2:
                raise FittingError(f"need at least 2 odometry residuals for class {label!r}, got {len(r)}")
            c = r.T @ r / len(r) - np.outer(r.mean(0), r.mean(0))
            c = 0.5 * (c + c.T)
            c[0, 0] = max(c[0, 0], ODOM_D_VAR_FLOOR)
            c[1, 1] = max(c[1, 1], ODOM_TH_VAR_FLOOR)
            lim = 0.999 * math.sqrt(c[0, 0] * c[1, 1])
            c[0, 1] = c[1, 0] = float(np.clip(c[0, 1], -lim, lim))
            updates[key] = c
    if sun_residuals is not None and len(sun_residuals):
        r = wrap_angle(np.asarray(sun_residuals, dtype=float))
        r = np.atleast_1d(r)
        if len(r) < 2:
            raise FittingError("need at least 2 sun residuals")
        updates["sigma_sun"] = max(float(np.var(r)), SUN_VAR_FLOOR)
    g = _confusion_rate(inter_pred, inter_gt, "intersection")
    if g is not None:
        updates["gamma_inter"] = g
    b = _confusion_rate(rtype_pred, rtype_gt, "road type")
    if b is not None:
        updates["beta_rtype"] = b
    return replace(base, **updates)


RESIDUAL_COLUMNS = ("t", "class", "res_d", "res_theta", "res_sun", "inter_pred", "inter_gt", "rtype_pred", "rtype_gt")


def _opt(v):
    v = (v or "").strip()
    return None if v == "" or v.lower() == "nan" else v


def fit_noise_csv(path, base: NoiseModel | None = None) -> NoiseModel:
    """Fit from a residual CSV with columns ``RESIDUAL_COLUMNS``; blank cells are missing."""
    od, cls, sun, ip, ig, rp, rg = [], [], [], [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d, th = _opt(row.get("res_d")), _opt(row.get("res_theta"))
            if d is not None and th is not None:
                od.append((float(d), float(th)))
                cls.append(_opt(row.get("class")) or NON_HIGHWAY)
            s = _opt(row.get("res_sun"))
            if s is not None:
                sun.append(float(s))
            ip.append(_opt(row.get("inter_pred")))
            ig.append(_opt(row.get("inter_gt")))
            rp.append(_opt(row.get("rtype_pred")))
            rg.append(_opt(row.get("rtype_gt")))
    return fit_noise(od or None, cls, sun or None, ip, ig, rp, rg, base=base)


# -- observation CSV ------------------------------------------------------------

OBS_COLUMNS = ("t", "phi", "phi_valid", "inter", "inter_valid", "rtype", "rtype_valid", "v", "v_valid", "od_d", "od_th", "od_valid")


def _fmt(x):
    return repr(float(x))


def write_observations(path, frames) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OBS_COLUMNS)
        for f in frames:
            w.writerow(
                [
                    _fmt(f.t),
                    _fmt(f.phi) if f.phi is not None else "0",
                    int(f.phi is not None),
                    int(f.inter == VISIBLE) if f.inter is not None else "0",
                    int(f.inter is not None),
                    int(f.rtype == HIGHWAY) if f.rtype is not None else "0",
                    int(f.rtype is not None),
                    _fmt(f.velocity) if f.velocity is not None else "0",
                    int(f.velocity is not None),
                    _fmt(f.odom[0]) if f.odom is not None else "0",
                    _fmt(f.odom[1]) if f.odom is not None else "0",
                    int(f.odom is not None),
                ]
            )


def _flag(v) -> bool:
    return str(v).strip().lower() in ("1", "true", "yes")


def _label(v, positive, negative):
    v = str(v).strip().lower()
    if v in ("1", "true", positive):
        return positive
    if v in ("0", "false", negative):
        return negative
    raise ValueError(f"cannot read label {v!r}")


def read_observations(path) -> list[ObservationFrame]:
    frames = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            frames.append(
                ObservationFrame(
                    t=float(row["t"]),
                    phi=wrap_angle(float(row["phi"])) if _flag(row["phi_valid"]) else None,
                    inter=_label(row["inter"], VISIBLE, NOT_VISIBLE_OBS) if _flag(row["inter_valid"]) else None,
                    rtype=_label(row["rtype"], HIGHWAY, NON_HIGHWAY) if _flag(row["rtype_valid"]) else None,
                    velocity=float(row["v"]) if _flag(row["v_valid"]) else None,
                    odom=(float(row["od_d"]), float(row["od_th"])) if _flag(row["od_valid"]) else None,
                )
            )
    return frames
