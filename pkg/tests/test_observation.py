import math

import numpy as np
import pytest
from builders import plus_junction, straight
from hypothesis import given, settings
from hypothesis import strategies as st

from semloc.mixture_filter import VehicleState
from semloc.observation import (
    SUN_VAR_FLOOR,
    FittingError,
    NoiseModel,
    ObservationFrame,
    fit_noise,
    fit_noise_csv,
    frame_likelihood,
    intersection_likelihood,
    odometry_likelihood,
    odometry_matrix,
    read_observations,
    road_type_likelihood,
    speed_likelihood,
    sun_likelihood,
    sun_residual,
    write_observations,
)
from semloc.road_map import HIGHWAY, NON_HIGHWAY, NOT_VISIBLE, TOO_CLOSE, VISIBLE, StreetSegment, link_segments, partition_for_intersections
from semloc.solar import SunPosition

NM = NoiseModel()
SUN = SunPosition(azimuth=math.radians(160.0), elevation=0.6, timestamp=0.0)


def graph_of(**kw):
    return link_segments([straight(100.0, start_node="A", end_node="B", **kw)])


def classed(cls):
    from dataclasses import replace

    g = graph_of()
    seg = replace(g[0], intersection_class=cls)
    return link_segments([seg])


class TestExactConstants:
    def test_intersection(self):
        assert intersection_likelihood(VISIBLE, 0, classed(VISIBLE), NM) == 0.8
        assert intersection_likelihood(VISIBLE, 0, classed(NOT_VISIBLE), NM) == 0.2
        assert intersection_likelihood(NOT_VISIBLE, 0, classed(TOO_CLOSE), NM) == 0.8
        assert intersection_likelihood(NOT_VISIBLE, 0, classed(VISIBLE), NM) == 0.2

    def test_road_type(self):
        g = graph_of(road_type=HIGHWAY)
        assert road_type_likelihood(HIGHWAY, 0, g, NM) == 0.9
        assert road_type_likelihood(NON_HIGHWAY, 0, g, NM) == 0.1
        assert road_type_likelihood(None, 0, g, NM) == 1.0

    def test_speed(self):
        g = graph_of(speed_limit=50.0)
        assert speed_likelihood(60.0, 0, g, NM) == 0.99 / 75.0
        assert speed_likelihood(75.0, 0, g, NM) == 0.99 / 75.0
        assert speed_likelihood(80.0, 0, g, NM) == 1e-4
        assert speed_likelihood(60.0, 0, g, NM) == pytest.approx(0.0132)

    def test_defaults(self):
        assert (NM.gamma_inter, NM.beta_rtype, NM.v0, NM.eps_speed) == (0.8, 0.9, 25.0, 1e-4)
        assert NM.sigma_sun == pytest.approx(math.radians(15.0) ** 2)
        assert NM.sigma_odom_highway[0, 0] == pytest.approx(4 * NM.sigma_odom_city[0, 0])


class TestSun:
    def test_peak_density(self):
        g = graph_of()
        phi = SUN.map_azimuth - 0.0
        assert sun_likelihood(phi, VehicleState(0, (10, 0, 0, 0)), g, SUN, NM) == pytest.approx(1 / math.sqrt(2 * math.pi * NM.sigma_sun))

    def test_one_sigma_symmetric(self):
        g = graph_of()
        sd = math.sqrt(NM.sigma_sun)
        x = VehicleState(0, (10, 0, 0, 0))
        a = sun_likelihood(SUN.map_azimuth + sd, x, g, SUN, NM)
        b = sun_likelihood(SUN.map_azimuth - sd, x, g, SUN, NM)
        assert a == pytest.approx(b)
        assert a == pytest.approx(math.exp(-0.5) / math.sqrt(2 * math.pi * NM.sigma_sun))

    def test_wrapping_consistency(self):
        g = graph_of()
        x = VehicleState(0, (10, 0, 0, 0))
        mu = SUN.map_azimuth
        assert sun_likelihood(mu + math.pi, x, g, SUN, NM) == pytest.approx(sun_likelihood(mu - math.pi, x, g, SUN, NM))

    def test_night_is_unit(self):
        night = SunPosition(azimuth=1.0, elevation=-0.2, timestamp=0.0)
        assert sun_likelihood(0.3, VehicleState(0, (1, 0, 0, 0)), graph_of(), night, NM) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-math.pi, math.pi))
    def test_argmax_at_zero_residual(self, phi):
        g = graph_of()
        thetas = np.linspace(-math.pi, math.pi, 721)
        vals = [sun_likelihood(phi, VehicleState(0, (0, 0, t, 0)), g, SUN, NM) for t in thetas]
        best = thetas[int(np.argmax(vals))]
        assert abs(sun_residual(phi, VehicleState(0, (0, 0, best, 0)), g, SUN)) <= math.radians(0.5) + 1e-9


class TestOdometry:
    def test_matrix_rows(self):
        np.testing.assert_array_equal(odometry_matrix(0.01), [[1, -1, 0, 0], [0.01, -0.01, 1, -1]])

    @pytest.mark.parametrize("alpha,expected", [(0.0, (10.0, 0.0)), (0.01, (10.0, 0.1))])
    def test_mean(self, alpha, expected):
        s = np.array([12.0, 2.0, 0.05, 0.05])
        np.testing.assert_allclose(odometry_matrix(alpha) @ s, expected, atol=1e-12)

    def test_mode_density(self):
        g = graph_of()
        s = np.array([12.0, 2.0, 0.05, 0.05])
        c = NM.sigma_odom_city
        assert odometry_likelihood((10.0, 0.0), s, 0, g, NM) == pytest.approx(1 / (2 * math.pi * math.sqrt(np.linalg.det(c))))

    def test_highway_covariance_selected(self):
        s = np.array([12.0, 2.0, 0.0, 0.0])
        city = odometry_likelihood((10.0, 0.0), s, 0, graph_of(), NM)
        hwy = odometry_likelihood((10.0, 0.0), s, 0, graph_of(road_type=HIGHWAY), NM)
        assert hwy == pytest.approx(city / 4.0)


class TestFrame:
    def test_empty_is_one(self):
        assert frame_likelihood(ObservationFrame(t=1.0), VehicleState(0, (1, 0, 0, 0)), graph_of(), SUN, NM) == 1.0

    def test_only_intersection(self):
        y = ObservationFrame(t=1.0, inter=NOT_VISIBLE)
        assert frame_likelihood(y, VehicleState(0, (1, 0, 0, 0)), graph_of(), SUN, NM) == 0.8

    def test_factorisation_random_frames(self):
        g = partition_for_intersections(plus_junction())
        rng = np.random.default_rng(0)
        for _ in range(1000):
            u = int(rng.choice(g.ids))
            s = np.array([rng.uniform(0, g[u].length), rng.uniform(-5, 20), rng.normal(0, 0.2), rng.normal(0, 0.2)])
            s[1] = s[0] - s[1]
            y = ObservationFrame(
                t=1.0,
                phi=rng.uniform(-math.pi, math.pi) if rng.random() < 0.8 else None,
                inter=rng.choice([VISIBLE, NOT_VISIBLE]) if rng.random() < 0.8 else None,
                rtype=rng.choice([HIGHWAY, NON_HIGHWAY]) if rng.random() < 0.8 else None,
                velocity=rng.uniform(0, 120) if rng.random() < 0.8 else None,
                odom=(rng.uniform(0, 20), rng.normal(0, 0.05)) if rng.random() < 0.8 else None,
            )
            x = VehicleState(u, tuple(s))
            prod = (sun_likelihood(y.phi, x, g, SUN, NM) * intersection_likelihood(y.inter, u, g, NM)
                    * road_type_likelihood(y.rtype, u, g, NM) * speed_likelihood(y.velocity, u, g, NM)
                    * odometry_likelihood(y.odom, s, u, g, NM))
            assert frame_likelihood(y, x, g, SUN, NM) == pytest.approx(prod, rel=1e-12, abs=0)

    def test_discrete_bounds(self):
        g = partition_for_intersections(plus_junction())
        lo = min(1 - NM.gamma_inter, 1 - NM.beta_rtype, NM.eps_speed)
        for u in g.ids:
            for v in (intersection_likelihood(VISIBLE, u, g, NM), road_type_likelihood(HIGHWAY, u, g, NM)):
                assert lo <= v <= 1.0

    def test_speed_mass(self):
        g = graph_of(speed_limit=50.0)
        grid = np.linspace(0, 75, 75001)
        vals = np.array([speed_likelihood(v, 0, g, NM) for v in grid[:-1]])
        assert float(np.sum(vals) * (grid[1] - grid[0])) == pytest.approx(0.99, rel=1e-9)

    def test_masking(self):
        y = ObservationFrame(t=2.0, phi=0.1, inter=VISIBLE, rtype=HIGHWAY, velocity=30.0, odom=(5.0, 0.0))
        m = y.masked("OS")
        assert (m.phi, m.odom, m.inter, m.rtype, m.velocity) == (0.1, (5.0, 0.0), None, None, None)
        assert y.masked("").is_empty


class TestNoiseModel:
    def test_rejects_bad_covariance(self):
        with pytest.raises(ValueError):
            NoiseModel(sigma_odom_city=np.array([[1.0, 2.0], [2.0, 1.0]]))

    @pytest.mark.parametrize("kw", [dict(gamma_inter=0.5), dict(beta_rtype=1.2), dict(eps_speed=0.0), dict(sigma_sun=0.0)])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            NoiseModel(**kw)

    def test_json_round_trip(self, tmp_path):
        nm = NoiseModel(sigma_sun=0.1, gamma_inter=0.75)
        nm.save(tmp_path / "n.json")
        back = NoiseModel.load(tmp_path / "n.json")
        assert back.to_dict() == nm.to_dict()


class TestFit:
    def test_sun_mle(self):
        nm = fit_noise(sun_residuals=[-1.0, 1.0])
        assert nm.sigma_sun == pytest.approx(1.0)

    def test_identical_residuals_floored(self):
        nm = fit_noise(sun_residuals=[0.2, 0.2, 0.2])
        assert nm.sigma_sun == SUN_VAR_FLOOR

    def test_confusion_rate(self):
        pred = [VISIBLE] * 80 + [NOT_VISIBLE] * 20
        gt = [VISIBLE] * 100
        assert fit_noise(inter_pred=pred, inter_gt=gt).gamma_inter == pytest.approx(0.8)

    def test_odometry_per_class(self):
        rng = np.random.default_rng(1)
        city = rng.normal(0, [0.3, 0.01], size=(4000, 2))
        hwy = rng.normal(0, [0.8, 0.02], size=(4000, 2))
        nm = fit_noise(np.vstack([city, hwy]), [NON_HIGHWAY] * 4000 + [HIGHWAY] * 4000)
        assert math.sqrt(nm.sigma_odom_city[0, 0]) == pytest.approx(0.3, rel=0.05)
        assert math.sqrt(nm.sigma_odom_highway[0, 0]) == pytest.approx(0.8, rel=0.05)
        # divide-by-N estimator
        r = city
        np.testing.assert_allclose(nm.sigma_odom_city, np.cov(r.T, bias=True), rtol=1e-9)

    def test_insufficient_class_data(self):
        with pytest.raises(FittingError, match="highway"):
            fit_noise([[0.1, 0.0], [0.2, 0.0], [0.3, 0.0]], [NON_HIGHWAY, NON_HIGHWAY, HIGHWAY])

    def test_csv(self, tmp_path):
        p = tmp_path / "res.csv"
        lines = ["t,class,res_d,res_theta,res_sun,inter_pred,inter_gt,rtype_pred,rtype_gt"]
        for k in range(10):
            lines.append(f"{k},non_highway,{(-1) ** k * 0.2},{(-1) ** k * 0.01},{(-1) ** k * 0.3},"
                         f"{'visible' if k < 9 else 'not_visible'},visible,highway,highway")
        p.write_text("\n".join(lines) + "\n")
        nm = fit_noise_csv(p)
        assert nm.sigma_sun == pytest.approx(0.09)
        assert nm.sigma_odom_city[0, 0] == pytest.approx(0.04)
        assert nm.gamma_inter == pytest.approx(0.9)
        assert nm.beta_rtype == 1.0
        assert nm.sigma_odom_highway[0, 0] == NoiseModel().sigma_odom_highway[0, 0]


def test_observation_csv_round_trip(tmp_path):
    frames = [
        ObservationFrame(t=1.0, phi=0.25, inter=VISIBLE, rtype=HIGHWAY, velocity=47.5, odom=(13.2, -0.01)),
        ObservationFrame(t=2.0, odom=(12.9, 0.002)),
        ObservationFrame(t=3.0, inter=NOT_VISIBLE, velocity=0.0),
    ]
    p = tmp_path / "obs.csv"
    write_observations(p, frames)
    assert read_observations(p) == frames
    assert p.read_text().splitlines()[0] == "t,phi,phi_valid,inter,inter_valid,rtype,rtype_valid,v,v_valid,od_d,od_th,od_valid"


def test_state_helper_types():
    assert isinstance(graph_of()[0], StreetSegment)
