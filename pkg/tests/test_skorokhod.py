import numpy as np
import pytest

from conecraft import (NoConvergence, PiecewisePath, PolyhedralCone,
                       StartOutside, halfline, lipschitz_probe, orthant,
                       project_step, random_path_pairs, reflect_halfline,
                       reflection_matrix, skewed_orthant_2d, solve_sp,
                       solve_sp_many)
from conecraft.skorokhod import _is_s_matrix

SQ2 = np.sqrt(2.0)


def random_halfline_path(rng, n_breaks=30, start_low=0.0):
    times = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, n_breaks - 1)), [1.0]])
    times = np.unique(times)
    vals = np.empty((len(times), 1))
    vals[0, 0] = rng.uniform(start_low, 2.0)
    steps = rng.standard_normal(len(times) - 1) * np.sqrt(np.diff(times)) * 2.0
    vals[1:, 0] = vals[0, 0] + np.cumsum(steps)
    return PiecewisePath(times, vals)


class TestReflectionMatrix:
    def test_orthant_identity(self):
        rm = reflection_matrix(orthant(2))
        assert np.array_equal(rm.matrix, np.eye(2))
        assert rm.completely_s is True

    def test_skewed(self):
        rm = reflection_matrix(skewed_orthant_2d())
        expected = np.array([[1.0, 1 / SQ2], [0.0, 1 / SQ2]])
        assert np.allclose(rm.matrix, expected, atol=1e-15)
        assert rm.completely_s is True

    def test_mutually_opposed_directions_flagged(self):
        cone = PolyhedralCone(np.eye(2),
                              np.array([[1.0, -2.0], [-2.0, 1.0]]) / np.sqrt(5))
        assert reflection_matrix(cone).completely_s is False

    def test_certificate_skipped_beyond_limit(self):
        k = 13
        with pytest.warns(UserWarning, match="skipped"):
            rm = reflection_matrix(orthant(k))
        assert rm.completely_s is None

    def test_s_matrix_lp(self):
        assert _is_s_matrix(np.eye(3))
        assert not _is_s_matrix(np.array([[1.0, -3.0], [-3.0, 1.0]]))


class TestProjectStep:
    def test_halfspace_projection(self):
        cone = orthant(2)
        rm = reflection_matrix(cone)
        z, a = project_step(cone, rm, np.array([-1.0, 2.0]))
        assert np.allclose(z, [0.0, 2.0]) and np.allclose(a, [1.0, 0.0])

    def test_interior_untouched(self):
        cone = orthant(2)
        rm = reflection_matrix(cone)
        z, a = project_step(cone, rm, np.array([1.0, 1.0]))
        assert np.array_equal(z, [1.0, 1.0]) and np.array_equal(a, [0.0, 0.0])

    def test_skew_push(self):
        cone = skewed_orthant_2d()
        rm = reflection_matrix(cone)
        z, a = project_step(cone, rm, np.array([1.0, -1.0]))
        assert np.allclose(z, [2.0, 0.0], atol=1e-12)
        assert np.allclose(a, [0.0, SQ2], atol=1e-12)

    def test_no_convergence_on_pathological_data(self):
        cone = PolyhedralCone(np.eye(2),
                              np.array([[1.0, -2.0], [-2.0, 1.0]]) / np.sqrt(5))
        rm = reflection_matrix(cone)
        with pytest.raises(NoConvergence) as err:
            project_step(cone, rm, np.array([-1.0, -1.0]))
        assert err.value.residual is not None


class TestSolveSp:
    def test_1d_drift_into_boundary(self):
        psi = PiecewisePath([0.0, 1.0], [[1.0], [-1.0]])
        rp = solve_sp(halfline(), psi, refine=1e-3)
        assert rp.values[-1, 0] == pytest.approx(0.0, abs=1e-12)
        assert rp.pushing[-1, 0] == pytest.approx(1.0, abs=1e-12)
        oracle = reflect_halfline(rp.input_values[:, 0])
        assert np.max(np.abs(rp.values[:, 0] - oracle)) < 1e-6

    def test_1d_oracle_on_random_paths(self):
        rng = np.random.default_rng(1234)
        paths = [random_halfline_path(rng) for _ in range(200)]
        solved = solve_sp_many(halfline(), paths, refine=1e-3)
        for rp in solved:
            oracle = reflect_halfline(rp.input_values[:, 0])
            assert np.max(np.abs(rp.values[:, 0] - oracle)) < 1e-6
            assert rp.complementarity_residual(halfline()) <= 1e-10

    def test_interior_path_untouched(self):
        psi = PiecewisePath([0.0, 0.5, 1.0], [[1.0, 1.0], [2.0, 1.5], [1.2, 3.0]])
        rp = solve_sp(orthant(2), psi, refine=1e-2)
        assert np.array_equal(rp.values, rp.input_values)
        assert np.all(rp.pushing == 0.0)
        assert rp.total_variation[-1] == 0.0

    def test_orthant_decouples_to_coordinate_oracles(self):
        times = np.array([0.0, 1.0])
        vals = np.array([[1.0, 1.0], [-1.0, -1.0]])
        rp = solve_sp(orthant(2), PiecewisePath(times, vals), refine=1e-3)
        assert np.allclose(rp.values[-1], [0.0, 0.0], atol=1e-12)
        for j in range(2):
            oracle = reflect_halfline(rp.input_values[:, j])
            assert np.max(np.abs(rp.values[:, j] - oracle)) < 1e-6

    def test_start_outside_rejected(self):
        with pytest.raises(StartOutside):
            solve_sp(halfline(), PiecewisePath([0.0, 1.0], [[-0.5], [1.0]]), 1e-2)

    def test_identity_and_pushing_consistency(self):
        cone = skewed_orthant_2d()
        rng = np.random.default_rng(9)
        gen = random_path_pairs(cone, n_breaks=12)
        for _ in range(20):
            psi, _ = gen(rng)
            rp = solve_sp(cone, psi, refine=5e-3)
            # phi = psi + eta on the grid
            assert np.allclose(rp.values, rp.input_values + rp.pushing,
                               atol=1e-10, rtol=1e-10)
            # eta is the cumulative directional push
            deta = rp.pushes @ cone.directions
            assert np.allclose(np.diff(rp.pushing, axis=0), deta, atol=1e-12)
            # containment and complementarity
            gaps = rp.values @ cone.normals.T
            assert np.min(gaps) >= -1e-9 * (1 + np.max(np.linalg.norm(rp.values, axis=1)))
            assert rp.complementarity_residual(cone) <= 1e-10
            assert np.all(np.diff(rp.total_variation) >= -1e-15)


class TestScalingProperties:
    def test_positive_homogeneity(self):
        cone = skewed_orthant_2d()
        rng = np.random.default_rng(21)
        gen = random_path_pairs(cone, n_breaks=15)
        for c in (0.5, 2.0, 0.01):
            for _ in range(10):
                psi, _ = gen(rng)
                base = solve_sp(cone, psi, refine=1e-2)
                scaled = solve_sp(cone, PiecewisePath(psi.times, c * psi.values),
                                  refine=1e-2)
                ref = c * base.values
                err = np.max(np.abs(scaled.values - ref))
                assert err <= 1e-9 * (1.0 + np.max(np.abs(ref)))

    def test_time_change_equivariance(self):
        cone = skewed_orthant_2d()
        rng = np.random.default_rng(22)
        gen = random_path_pairs(cone, n_breaks=15)
        for c in (0.5, 2.0):
            for _ in range(10):
                psi, _ = gen(rng)
                warped = PiecewisePath(psi.times / c, psi.values)
                base = solve_sp(cone, psi, refine=1e-2)
                moved = solve_sp(cone, warped, refine=1e-2 / c)
                assert moved.values.shape == base.values.shape
                assert np.allclose(moved.values, base.values, atol=1e-12)
                assert np.allclose(moved.times * c, base.times, atol=1e-12)

    def test_mesh_refinement_is_factor_bounded(self):
        cone = skewed_orthant_2d()
        times = np.array([0.0, 0.5, 1.0])
        vals = np.array([[0.2, 0.6], [0.4, -0.9], [-0.8, 0.5]])
        psi = PiecewisePath(times, vals)
        sups = []
        solutions = {}
        for h in (0.02, 0.01, 0.005):
            solutions[h] = solve_sp(cone, psi, refine=h)
        for h_coarse, h_fine in ((0.02, 0.01), (0.01, 0.005)):
            coarse = solutions[h_coarse]
            fine = solutions[h_fine]
            idx = np.searchsorted(fine.times, coarse.times)
            assert np.allclose(fine.times[idx], coarse.times, atol=1e-12)
            sups.append(np.max(np.linalg.norm(
                fine.values[idx] - coarse.values, axis=1)))
        assert sups[1] <= max(2.0 * sups[0], 1e-12)
        if sups[0] > 1e-12 and sups[1] > 1e-12:
            order = np.log2(sups[0] / sups[1])
            print(f"empirical mesh order: {order:.2f}")


class TestLipschitzProbe:
    def test_identical_pairs_skipped(self):
        cone = halfline()

        def gen(rng):
            p = random_halfline_path(rng, n_breaks=5)
            return p, PiecewisePath(p.times, p.values.copy())

        probe = lipschitz_probe(cone, gen, n_pairs=5, seed=0, refine=None)
        assert probe.n_used == 0 and probe.n_skipped == 5
        assert probe.k_hat == 0.0

    def test_1d_constant_bound(self):
        cone = halfline()
        gen = random_path_pairs(cone, n_breaks=20)
        probe = lipschitz_probe(cone, gen, n_pairs=300, seed=7, refine=2e-2)
        assert probe.n_used == 300
        assert probe.k_hat <= 2.0 + 1e-6

    def test_orthant_probe_stable_across_seeds(self):
        cone = orthant(2)
        gen = random_path_pairs(cone, n_breaks=20)
        p1 = lipschitz_probe(cone, gen, n_pairs=400, seed=101, refine=2e-2)
        p2 = lipschitz_probe(cone, gen, n_pairs=400, seed=202, refine=2e-2)
        assert np.isfinite(p1.k_hat) and np.isfinite(p2.k_hat)
        assert abs(p1.k_hat - p2.k_hat) <= 0.2 * max(p1.k_hat, p2.k_hat)

    def test_deterministic_given_seed(self):
        cone = halfline()
        gen = random_path_pairs(cone, n_breaks=10)
        a = lipschitz_probe(cone, gen, n_pairs=50, seed=5, refine=2e-2)
        b = lipschitz_probe(cone, gen, n_pairs=50, seed=5, refine=2e-2)
        assert np.array_equal(a.ratios, b.ratios)
