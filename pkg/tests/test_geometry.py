import numpy as np
import pytest

from conecraft import (DimensionLimit, OutsideCone, PolyhedralCone,
                       active_faces, check_drift_stability, halfline, orthant,
                       skewed_orthant_2d, stability_margin, validate_cone)

SQ2 = np.sqrt(2.0)


class TestValidateCone:
    def test_orthant_passes_with_diagonal_certificate(self):
        rep = validate_cone(orthant(2))
        assert rep.passed
        interior = [c for c in rep.checks if c.name == "interior_point"][0]
        assert interior.margin == pytest.approx(1 / SQ2, abs=1e-6)
        assert rep.spectral_summary["min_diagonal"] == 1.0

    def test_orthogonal_direction_rejected_with_face_index(self):
        rep = validate_cone(PolyhedralCone([[1.0, 0.0]], [[0.0, 1.0]]))
        bad = rep.failures()
        assert len(bad) == 1
        assert bad[0].name == "oblique_margin[1]"
        assert bad[0].margin == 0.0
        with pytest.raises(Exception, match="oblique_margin"):
            rep.raise_if_failed()

    def test_skewed_direction_margin(self):
        rep = validate_cone(skewed_orthant_2d())
        assert rep.passed
        margin = [c for c in rep.checks if c.name == "oblique_margin[2]"][0]
        assert margin.margin == pytest.approx(1 / SQ2)

    def test_non_unit_normal_rejected(self):
        rep = validate_cone(PolyhedralCone([[2.0, 0.0]], [[1.0, 0.0]]))
        assert any(c.name == "unit_normal[1]" for c in rep.failures())


class TestActiveFaces:
    def test_single_face(self):
        assert active_faces(orthant(2), [0.0, 1.0], 1e-9).active == (1,)

    def test_vertex(self):
        assert active_faces(orthant(2), [0.0, 0.0], 1e-9).active == (1, 2)

    def test_interior(self):
        fa = active_faces(orthant(2), [1.0, 1.0], 1e-9)
        assert fa.active == () and fa.is_interior

    def test_outside_rejected(self):
        with pytest.raises(OutsideCone):
            active_faces(orthant(2), [-1.0, 0.5], 1e-9)

    def test_monotone_in_tolerance(self):
        cone = orthant(2)
        rng = np.random.default_rng(5)
        for _ in range(50):
            x = np.abs(rng.standard_normal(2)) * rng.choice([0.0, 1e-8, 1.0], 2)
            small = set(active_faces(cone, x, 1e-10).active)
            large = set(active_faces(cone, x, 1e-6).active)
            assert small <= large


class TestStabilityMargin:
    def test_interior_vector(self):
        rep = stability_margin(orthant(2), [-1.0, -1.0])
        assert rep.member and rep.margin == pytest.approx(1.0)

    def test_opposite_cone(self):
        rep = stability_margin(orthant(2), [1.0, 1.0])
        assert not rep.member and rep.margin == pytest.approx(-SQ2)

    def test_boundary_generator(self):
        rep = stability_margin(orthant(2), [-1.0, 0.0])
        assert rep.member and rep.margin == 0.0

    def test_positive_homogeneity_inside(self):
        cone = skewed_orthant_2d()
        rng = np.random.default_rng(11)
        for _ in range(100):
            alpha = rng.uniform(0.1, 2.0, size=2)
            v = -(alpha @ cone.directions)
            c = rng.uniform(0.1, 10.0)
            m1 = stability_margin(cone, v).margin
            m2 = stability_margin(cone, c * v).margin
            assert m2 == pytest.approx(c * m1, abs=1e-9 * (1 + c))

    def test_degenerate_cone_reported_not_fatal(self):
        cone = PolyhedralCone([[1.0, 0.0]], [[1.0, 0.0]])
        on_ray = stability_margin(cone, [-2.0, 0.0])
        assert on_ray.degenerate and on_ray.member and on_ray.margin == 0.0
        off_ray = stability_margin(cone, [-1.0, 0.5])
        assert off_ray.degenerate and not off_ray.member
        assert off_ray.margin == pytest.approx(-0.5)

    def test_dimension_limit(self):
        with pytest.raises(DimensionLimit):
            stability_margin(orthant(7), -np.ones(7))

    def test_halfline(self):
        rep = stability_margin(halfline(), [-3.0])
        assert rep.member and rep.margin == pytest.approx(3.0)


class TestDriftStability:
    def test_diagonal_drift_satisfies_margin(self):
        res = check_drift_stability(
            orthant(2), lambda x: -np.ones(2) / SQ2,
            [[0.5, 0.5], [1.0, 2.0], [0.0, 0.0]], delta=0.5)
        assert res.satisfied
        assert res.worst_margin == pytest.approx(1 / SQ2)

    def test_axis_drift_fails(self):
        res = check_drift_stability(
            orthant(2), lambda x: np.array([0.0, -1.0]), [[1.0, 1.0]], delta=0.1)
        assert not res.satisfied and res.worst_margin == pytest.approx(0.0)

    def test_degenerate_surfaced(self):
        cone = PolyhedralCone([[1.0, 0.0]], [[1.0, 0.0]])
        res = check_drift_stability(cone, lambda x: np.array([-1.0, 0.0]),
                                    [[1.0, 0.0]], delta=0.1)
        assert res.degenerate and not res.satisfied

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError):
            check_drift_stability(orthant(2), lambda x: -np.ones(2), [], 0.1)


def test_cone_scale_invariance():
    cone = skewed_orthant_2d()
    rng = np.random.default_rng(3)
    for _ in range(200):
        x = rng.standard_normal(2) * rng.uniform(0.1, 5.0)
        g = float(np.min(cone.gaps(x)))
        if abs(g) < 1e-9:
            continue
        c = rng.uniform(0.01, 100.0)
        assert bool(cone.contains(x)) == bool(cone.contains(c * x))
