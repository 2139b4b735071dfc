import numpy as np
import pytest
from scipy import stats

from conecraft import (FloorReport, GeometryError, IncompatibleGeometry,
                       MinorizationGeometry, PreconditionError,
                       chapman_floor_compose, constant_model, halfline,
                       halfline_zero, killed_kernel_floor, minorization_check,
                       orthant, terminal_histogram, wilson_lower)
from conecraft.density import ComposedFloor, default_start_grid

SQ2 = np.sqrt(2.0)
REFERENCE_DRIFT = np.array([-1.0, -1.0]) / SQ2


def reflected_gaussian_bin_average(lo, hi, x0=1.0, t=1.0):
    """Exact bin average of the half-line reflected-Gaussian density."""
    s = np.sqrt(t)
    mass = (stats.norm.cdf((hi - x0) / s) - stats.norm.cdf((lo - x0) / s)
            + stats.norm.cdf((hi + x0) / s) - stats.norm.cdf((lo + x0) / s))
    return mass / (hi - lo)


class TestWilson:
    def test_below_point_estimate(self):
        assert wilson_lower(50, 100) < 0.5

    def test_zero_count(self):
        assert wilson_lower(0, 1000) == 0.0

    def test_monotone_in_count(self):
        vals = [wilson_lower(c, 1000) for c in (10, 50, 200, 900)]
        assert all(a < b for a, b in zip(vals, vals[1:]))


class TestTerminalHistogram:
    def test_reflected_brownian_density_oracle(self):
        h = terminal_histogram(halfline(), halfline_zero(1.0), [1.0], t=1.0,
                               dt=1e-3, replicas=40_000, lo=[0.95], hi=[1.05],
                               bins=1, seed=42)
        est = float(h.density()[0])
        exact = reflected_gaussian_bin_average(0.95, 1.05)
        se = np.sqrt(est / (h.replicas * h.bin_volume))
        assert abs(est - exact) <= 3 * se

    def test_zero_replicas_rejected(self):
        with pytest.raises(PreconditionError):
            terminal_histogram(halfline(), halfline_zero(1.0), [1.0], 1.0,
                               1e-2, 0, [0.0], [2.0], 4, seed=0)

    def test_mass_conservation(self):
        h = terminal_histogram(halfline(), halfline_zero(1.0), [1.0], 1.0,
                               1e-2, 2000, [0.0], [1.5], 5, seed=1)
        inside = int(h.counts.sum())
        assert inside <= h.replicas
        assert inside / h.replicas + h.outside_fraction == pytest.approx(1.0)
        assert float(h.density().sum() * h.bin_volume) <= 1.0 + 1e-12

    def test_deterministic_given_seed(self):
        args = (halfline(), halfline_zero(1.0), [1.0], 0.5, 1e-2, 3000,
                [0.0], [2.0], 4)
        a = terminal_histogram(*args, seed=9)
        b = terminal_histogram(*args, seed=9)
        assert np.array_equal(a.counts, b.counts)

    def test_batch_split_invariance(self):
        args = (halfline(), halfline_zero(1.0), [1.0], 0.5, 1e-2, 3000,
                [0.0], [2.0], 4)
        a = terminal_histogram(*args, seed=9, batch_size=1000)
        b = terminal_histogram(*args, seed=9, batch_size=1000)
        assert np.array_equal(a.counts, b.counts)


def reference_geometry(**overrides):
    kw = dict(x0=[0.5, 0.5], r0=0.1, r1=0.2, r2=0.28, big_m=2.0, m1=1.0,
              t1=1.0, t2=0.5)
    kw.update(overrides)
    return MinorizationGeometry(**kw)


class TestMinorizationGeometry:
    def test_reference_geometry_valid(self):
        reference_geometry().validate(orthant(2))

    def test_radius_order_enforced(self):
        with pytest.raises(GeometryError, match="r0 < r1 < r2"):
            reference_geometry(r0=0.2, r1=0.1).validate(orthant(2))

    def test_m1_containment_enforced(self):
        with pytest.raises(GeometryError, match="M1"):
            reference_geometry(r2=0.3).validate(orthant(2))

    def test_cone_interior_containment_enforced(self):
        with pytest.raises(GeometryError, match="interior"):
            reference_geometry(x0=[0.2, 0.5], r2=0.25, m1=1.0).validate(orthant(2))

    def test_bump_profile_levels(self):
        g = reference_geometry()
        assert g.bump(np.array([0.5, 0.5])) == 1.0
        assert g.bump(np.array([0.5 + 0.15, 0.5])) == pytest.approx(0.5)
        assert g.bump(np.array([0.9, 0.9])) == 0.0


class TestMinorizationCheck:
    def test_reference_model_floors_agree_across_eps(self):
        cone = orthant(2)
        model = constant_model(REFERENCE_DRIFT, np.eye(2), eps=1.0)
        starts = np.array([[0.1, 0.1], [1.4, 0.2], [0.2, 1.4], [1.0, 1.0]])
        rep = minorization_check(cone, model, reference_geometry(),
                                 eps_grid=[0.4, 0.2], replicas=20_000,
                                 dt=2e-3, seed=7, start_grid=starts, bins=3)
        assert rep.verdict == "PASS"
        assert rep.kappa_min > 0.0
        assert np.all(np.asarray(rep.extra["kappa0_lcb99"]) > 0.0)
        # constant coefficients: the rescaled law is eps-independent
        diff = abs(rep.floors[0] - rep.floors[1])
        assert diff <= 4 * np.hypot(rep.ses[0], rep.ses[1])
        assert len(rep.rows) == 8

    def test_outward_drift_inconclusive_not_fail(self):
        cone = orthant(2)
        model = constant_model([3.0 / SQ2, 3.0 / SQ2], np.eye(2), eps=1.0)
        rep = minorization_check(cone, model, reference_geometry(),
                                 eps_grid=[0.4], replicas=4000, dt=2e-3,
                                 seed=3, start_grid=np.array([[1.4, 1.4]]),
                                 bins=3)
        assert rep.verdict == "INCONCLUSIVE"

    def test_start_grid_outside_ball_rejected(self):
        cone = orthant(2)
        model = constant_model(REFERENCE_DRIFT, np.eye(2), eps=1.0)
        with pytest.raises(GeometryError, match="radius M"):
            minorization_check(cone, model, reference_geometry(),
                               eps_grid=[0.4], replicas=100, dt=1e-2, seed=0,
                               start_grid=np.array([[3.0, 0.0]]))

    def test_too_coarse_bins_rejected(self):
        cone = orthant(2)
        model = constant_model(REFERENCE_DRIFT, np.eye(2), eps=1.0)
        with pytest.raises(GeometryError, match="increase bins"):
            minorization_check(cone, model, reference_geometry(),
                               eps_grid=[0.4], replicas=100, dt=1e-2, seed=0,
                               start_grid=np.array([[0.1, 0.1]]), bins=2)

    def test_default_start_grid_respects_cone_and_ball(self):
        grid = default_start_grid(orthant(2), 2.0, per_axis=9)
        assert np.all(np.linalg.norm(grid, axis=1) <= 2.0 + 1e-12)
        assert np.all(grid >= 0.0)

    def test_threads_do_not_change_results(self):
        cone = orthant(2)
        model = constant_model(REFERENCE_DRIFT, np.eye(2), eps=1.0)
        starts = np.array([[0.1, 0.1], [1.0, 1.0]])
        kw = dict(eps_grid=[0.4], replicas=4000, dt=5e-3, seed=11,
                  start_grid=starts, bins=3)
        a = minorization_check(cone, model, reference_geometry(), **kw)
        b = minorization_check(cone, model, reference_geometry(), threads=2, **kw)
        assert np.array_equal(a.floors, b.floors)
        assert np.array_equal(a.lcbs, b.lcbs)


class TestKilledKernelFloor:
    def test_unit_ball_survivor_floor_positive(self):
        model = constant_model([0.0, 0.0], np.eye(2), eps=1.0)
        rep = killed_kernel_floor(model, [0.0, 0.0], radius=1.0, gamma=0.5,
                                  t=0.25, eps_grid=[0.4, 0.2], replicas=20_000,
                                  dt=1e-3, seed=11)
        assert rep.verdict == "PASS"
        assert np.all(rep.lcbs > 0.0)
        assert np.all(np.asarray(rep.extra["min_survival"]) > 0.0)

    def test_gamma_near_one_degrades_reported_not_failed(self):
        model = constant_model([0.0, 0.0], np.eye(2), eps=1.0)
        center = np.zeros(2)[None, :]
        mid = killed_kernel_floor(model, [0.0, 0.0], 1.0, gamma=0.5, t=0.25,
                                  eps_grid=[0.2], replicas=20_000, dt=1e-3,
                                  seed=5, start_grid=center)
        rim = killed_kernel_floor(model, [0.0, 0.0], 1.0, gamma=0.95, t=0.25,
                                  eps_grid=[0.2], replicas=20_000, dt=1e-3,
                                  seed=5, start_grid=center)
        assert rim.floors[0] < mid.floors[0]

    def test_short_time_distinct_bins_inconclusive(self):
        model = constant_model([0.0, 0.0], np.eye(2), eps=1.0)
        rep = killed_kernel_floor(model, [0.0, 0.0], 1.0, gamma=0.5, t=2e-3,
                                  eps_grid=[0.2], replicas=2000, dt=1e-3,
                                  seed=5, start_grid=np.zeros(2)[None, :],
                                  bins=5)
        assert rep.verdict == "INCONCLUSIVE"

    def test_gamma_domain_checked(self):
        model = constant_model([0.0, 0.0], np.eye(2), eps=1.0)
        with pytest.raises(GeometryError):
            killed_kernel_floor(model, [0.0, 0.0], 1.0, gamma=1.5, t=0.1,
                                eps_grid=[0.2], replicas=10, dt=1e-2, seed=0)

    def test_killing_only_removes_mass(self):
        # same bins: killed density <= unconstrained density + 3 radii
        model = constant_model([0.0, 0.0], np.eye(2), eps=1.0)
        center = np.array([4.0, 4.0])
        killed = killed_kernel_floor(model, center, 1.0, gamma=0.5, t=0.25,
                                     eps_grid=[0.2], replicas=30_000, dt=1e-3,
                                     seed=13, start_grid=center[None, :],
                                     bins=3)
        lo, hi = center - 0.5, center + 0.5
        free = terminal_histogram(orthant(2),
                                  constant_model([0.0, 0.0], np.eye(2), eps=0.2),
                                  center, t=0.25, dt=1e-3, replicas=30_000,
                                  lo=lo, hi=hi, bins=3, seed=14)
        killed_min = killed.floors[0]
        free_dens = free.density()
        mask = free.bins_inside_ball(center, 0.5)
        se = np.sqrt(np.maximum(free.counts, 1)) / (free.replicas * free.bin_volume)
        assert killed_min <= np.min(free_dens[mask] + 3 * se[mask])


class TestChapmanCompose:
    @staticmethod
    def _mk_stage1(kappa0, lcb):
        return FloorReport(
            epsilons=np.array([0.4, 0.2]), floors=np.array([0.5, 0.5]),
            lcbs=np.array([0.4, 0.4]), ses=np.array([0.01, 0.01]),
            min_counts=np.array([100, 100]), verdict="PASS", kappa_min=0.4,
            target={"shape": "ball", "center": [0.5, 0.5], "radius": 0.1,
                    "x0": [0.5, 0.5], "r0": 0.1, "r1": 0.2, "r2": 0.28},
            starts=np.array([[0.1, 0.1]]), rows=[],
            extra={"kappa0": [kappa0, kappa0], "kappa0_lcb99": [lcb, lcb]})

    @staticmethod
    def _mk_stage2(kappa1, lcb, verdict="PASS"):
        return FloorReport(
            epsilons=np.array([0.4, 0.2]),
            floors=np.array([kappa1, kappa1]), lcbs=np.array([lcb, lcb]),
            ses=np.array([0.01, 0.01]), min_counts=np.array([50, 50]),
            verdict=verdict, kappa_min=lcb,
            target={"shape": "killed_ball", "center": [0.5, 0.5],
                    "radius": 0.28, "gamma": 0.2 / 0.28,
                    "target_radius": 0.2, "t": 0.02},
            starts=np.array([[0.5, 0.5]]), rows=[], extra={})

    def test_product_arithmetic(self):
        comp = chapman_floor_compose(self._mk_stage1(0.3, 0.29),
                                     self._mk_stage2(0.2, 0.19))
        assert np.allclose(comp.kappas, 0.06)
        assert comp.verdict == "PASS"

    def test_inconclusive_propagates(self):
        comp = chapman_floor_compose(
            self._mk_stage1(0.3, 0.29),
            self._mk_stage2(0.2, 0.0, verdict="INCONCLUSIVE"))
        assert comp.verdict == "INCONCLUSIVE"

    def test_incompatible_geometry_rejected(self):
        s2 = self._mk_stage2(0.2, 0.19)
        s2.target["target_radius"] = 0.15
        with pytest.raises(IncompatibleGeometry):
            chapman_floor_compose(self._mk_stage1(0.3, 0.29), s2)

    def test_composition_below_direct_floor_on_real_runs(self):
        cone = orthant(2)
        model = constant_model(REFERENCE_DRIFT, np.eye(2), eps=1.0)
        geom = reference_geometry(t1=1.0, t2=0.98)
        starts = np.array([[0.1, 0.1], [1.0, 1.0]])
        stage1 = minorization_check(cone, model, geom, eps_grid=[0.4, 0.2],
                                    replicas=10_000, dt=2e-3, seed=31,
                                    start_grid=starts, bins=3)
        stage2 = killed_kernel_floor(model, geom.x0, radius=geom.r2,
                                     gamma=geom.r1 / geom.r2, t=geom.t3,
                                     eps_grid=[0.4, 0.2], replicas=10_000,
                                     dt=1e-3, seed=32, bins=3)
        comp = chapman_floor_compose(stage1, stage2)
        assert isinstance(comp, ComposedFloor)
        assert stage2.verdict == "PASS"
        assert comp.verdict == "PASS"
        assert np.all(comp.kappas <= stage1.floors + 3 * stage1.ses)
