import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm, t as tdist

from tse.elliptical import (
    IndexPartition,
    TruncationBox,
    normal_joint,
    student_joint,
)
from tse.errors import MomentNotDefinedError, SpecError
from tse.oracle import estimate_mean_cov, sample_truncated_gibbs
from tse.truncated import (
    existence_check,
    moment_flags,
    moments_out_of_bounds,
    moments_with_double_infinite,
    omega_12,
    tmvn_mean_cov,
    tmvn_product_moment,
    tmvt_mean_cov,
    truncated_mean_cov,
)

from conftest import z_within


def _random_pd(rng, p, diag=2.0):
    a = rng.standard_normal((p, p))
    return a @ a.T + diag * np.eye(p)


class TestNormalMeanCov:
    def test_untruncated_is_exact(self):
        j = normal_joint([0.4, -1.2], [[1.0, 0.3], [0.3, 2.0]])
        rep = tmvn_mean_cov(j, TruncationBox([-np.inf] * 2, [np.inf] * 2))
        np.testing.assert_allclose(rep.mean, j.xi, atol=1e-12)
        np.testing.assert_allclose(rep.covariance, j.omega, atol=1e-10)
        assert rep.prob_mass == 1.0

    def test_half_line_closed_form(self):
        j = normal_joint([0.0], [[1.0]])
        rep = tmvn_mean_cov(j, TruncationBox([0.0], [np.inf]))
        mean = norm.pdf(0) / norm.sf(0)
        np.testing.assert_allclose(rep.mean[0], mean, atol=1e-9)
        np.testing.assert_allclose(rep.covariance[0, 0], 1 - mean ** 2, atol=1e-9)

    def test_general_one_sided_closed_form(self):
        # mu + sigma * phi(a)/sf(a) for a one-sided box
        mu, s, a = 0.7, 1.6, -0.3
        j = normal_joint([mu], [[s * s]])
        rep = tmvn_mean_cov(j, TruncationBox([a], [np.inf]))
        z = (a - mu) / s
        np.testing.assert_allclose(rep.mean[0], mu + s * norm.pdf(z) / norm.sf(z),
                                   atol=1e-10)

    def test_symmetric_box_against_gibbs(self):
        j = normal_joint([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
        b = TruncationBox([-1.0, -1.0], [1.0, 1.0])
        rep = tmvn_mean_cov(j, b)
        np.testing.assert_allclose(rep.mean, [0.0, 0.0], atol=1e-9)
        batch = sample_truncated_gibbs(j, b, 400_000, seed=13)
        est = estimate_mean_cov(batch)
        assert z_within(rep.covariance, est["cov"].value, est["cov"].std_error)

    def test_prob_mass_in_unit_interval(self, rng):
        j = normal_joint(rng.standard_normal(3), _random_pd(rng, 3))
        b = TruncationBox([-1.0, -np.inf, 0.0], [1.0, 0.5, np.inf])
        rep = tmvn_mean_cov(j, b)
        assert 0.0 <= rep.prob_mass <= 1.0


class TestStudentMeanCov:
    def test_untruncated_scaling(self):
        omega = np.array([[1.0, 0.3], [0.3, 2.0]])
        j = student_joint([0.5, -0.5], omega, 4.0)
        rep = tmvt_mean_cov(j, TruncationBox([-np.inf] * 2, [np.inf] * 2))
        np.testing.assert_allclose(rep.mean, j.xi, atol=1e-12)
        np.testing.assert_allclose(rep.covariance, 2.0 * omega, atol=1e-8)

    def test_cauchy_half_line_mean_does_not_exist(self):
        j = student_joint([0.0], [[1.0]], 1.0)
        rep = tmvt_mean_cov(j, TruncationBox([0.0], [np.inf]))
        assert not rep.existence.mean
        assert rep.mean is None
        with pytest.raises(MomentNotDefinedError):
            rep.require_mean()

    def test_box_against_gibbs(self):
        j = student_joint([0.0, 0.0], np.eye(2), 5.0)
        b = TruncationBox([0.0, 0.0], [2.0, 1.0])
        rep = tmvt_mean_cov(j, b)
        batch = sample_truncated_gibbs(j, b, 400_000, seed=21)
        est = estimate_mean_cov(batch)
        assert z_within(rep.mean, est["mean"].value, est["mean"].std_error)
        assert z_within(rep.covariance, est["cov"].value, est["cov"].std_error)

    def test_univariate_against_quadrature(self):
        nu, s2 = 4.5, 1.7
        j = student_joint([0.2], [[s2]], nu)
        a, b = -0.5, 2.0
        rep = tmvt_mean_cov(j, TruncationBox([a], [b]))

        def pdf(x):
            return tdist.pdf((x - 0.2) / np.sqrt(s2), nu) / np.sqrt(s2)

        mass, _ = quad(pdf, a, b)
        m1, _ = quad(lambda x: x * pdf(x), a, b)
        m2, _ = quad(lambda x: x * x * pdf(x), a, b)
        np.testing.assert_allclose(rep.prob_mass, mass, rtol=1e-10)
        np.testing.assert_allclose(rep.mean[0], m1 / mass, rtol=1e-9)
        np.testing.assert_allclose(rep.covariance[0, 0],
                                   m2 / mass - (m1 / mass) ** 2, rtol=1e-8)

    def test_low_df_finite_box_uses_mc(self):
        # Second moments exist on a bounded box for nu <= 2 but have no
        # analytic face path; the Gibbs fallback serves them.
        j = student_joint([0.0, 0.0], np.eye(2), 1.5)
        b = TruncationBox([-1.0, -1.0], [1.0, 2.0])
        rep = tmvt_mean_cov(j, b)
        assert rep.existence.second
        assert "mc-gibbs" in rep.method
        assert rep.mc_stderr is not None
        batch = sample_truncated_gibbs(j, b, 200_000, seed=77)
        est = estimate_mean_cov(batch)
        assert z_within(rep.mean, est["mean"].value, est["mean"].std_error, k=5)

    def test_cauchy_bounded_univariate_mean(self):
        # Exact logarithmic antiderivative at nu = 1.
        j = student_joint([0.0], [[1.0]], 1.0)
        rep = tmvt_mean_cov(j, TruncationBox([0.0], [2.0]))
        m1, _ = quad(lambda x: x / (np.pi * (1 + x * x)), 0.0, 2.0)
        mass = tdist.cdf(2.0, 1) - 0.5
        np.testing.assert_allclose(rep.mean[0], m1 / mass, rtol=1e-12)


class TestProductMoments:
    def test_zero_order_is_one(self):
        j = normal_joint([0.0, 0.0], np.eye(2))
        assert tmvn_product_moment(j, TruncationBox([-1, -1], [1, 1]), [0, 0]) == 1.0

    def test_half_line_second_moment(self):
        j = normal_joint([0.0], [[1.0]])
        val = tmvn_product_moment(j, TruncationBox([0.0], [np.inf]), [2])
        assert val == pytest.approx(1.0, abs=1e-10)

    def test_against_gibbs(self, rng):
        omega = _random_pd(rng, 2, diag=1.0)
        j = normal_joint([0.2, -0.4], omega)
        b = TruncationBox([-1.5, -1.0], [1.0, 2.0])
        val = tmvn_product_moment(j, b, [2, 1])
        batch = sample_truncated_gibbs(j, b, 600_000, seed=5)
        prods = batch.draws[:, 0] ** 2 * batch.draws[:, 1]
        se = prods.std() / np.sqrt(prods.size)
        assert abs(val - prods.mean()) < 4 * se

    def test_consistency_with_mean_cov(self, rng):
        omega = _random_pd(rng, 3, diag=1.5)
        j = normal_joint(rng.standard_normal(3) * 0.5, omega)
        b = TruncationBox([-1.0, -np.inf, 0.0], [2.0, 1.0, np.inf])
        rep = tmvn_mean_cov(j, b)
        for i in range(3):
            e = np.zeros(3, dtype=int)
            e[i] = 1
            assert abs(tmvn_product_moment(j, b, e) - rep.mean[i]) < 1e-9
        for i in range(3):
            for k in range(i, 3):
                e = np.zeros(3, dtype=int)
                e[i] += 1
                e[k] += 1
                assert abs(tmvn_product_moment(j, b, e)
                           - rep.second_moment[i, k]) < 1e-8

    def test_odd_moments_vanish_on_symmetric_box(self):
        j = normal_joint([0.0, 0.0], [[1.0, -0.4], [-0.4, 1.0]])
        b = TruncationBox([-1.2, -0.8], [1.2, 0.8])
        assert abs(tmvn_product_moment(j, b, [1, 0])) < 1e-9
        assert abs(tmvn_product_moment(j, b, [3, 0])) < 1e-9
        assert abs(tmvn_product_moment(j, b, [1, 2])) < 1e-9

    def test_order_cap(self):
        j = normal_joint([0.0], [[1.0]])
        with pytest.raises(SpecError):
            tmvn_product_moment(j, TruncationBox([0.0], [1.0]), [9])

    def test_student_kernel_rejected(self):
        j = student_joint([0.0], [[1.0]], 4.0)
        with pytest.raises(SpecError):
            tmvn_product_moment(j, TruncationBox([0.0], [1.0]), [1])


class TestOmega12:
    def test_normal_kernel_is_one(self):
        j = normal_joint([0.0], [[1.0]])
        assert omega_12(j, TruncationBox([0.0], [1.0])) == 1.0

    def test_no_truncation_ratio(self):
        j = student_joint([0.0, 0.0], np.eye(2), 4.0)
        w = omega_12(j, TruncationBox([-np.inf] * 2, [np.inf] * 2))
        assert w == pytest.approx(2.0, rel=1e-12)

    def test_quadrature_oracle(self):
        j = student_joint([0.0], [[1.0]], 5.0)
        w = omega_12(j, TruncationBox([0.0], [1.0]))
        mass = tdist.cdf(1, 5) - 0.5
        val, _ = quad(lambda x: (5 + x * x) / 4.0 * tdist.pdf(x, 5) / mass, 0, 1)
        assert w == pytest.approx(val, rel=1e-7)

    def test_low_df_rejected(self):
        j = student_joint([0.0], [[1.0]], 2.0)
        with pytest.raises(MomentNotDefinedError):
            omega_12(j, TruncationBox([0.0], [1.0]))


class TestDoubleInfinite:
    def test_all_coordinates_unbounded(self):
        omega = np.array([[1.0, 0.2], [0.2, 1.5]])
        j = student_joint([1.0, 2.0], omega, 6.0)
        rep = tmvt_mean_cov(j, TruncationBox([-np.inf] * 2, [np.inf] * 2))
        np.testing.assert_allclose(rep.covariance, 1.5 * omega, atol=1e-10)

    def test_cross_covariance_formula(self):
        # 2-D normal, first coordinate unbounded: the cross block equals
        # Sigma22 Omega22^{-1} Omega21 with Sigma22 from the truncated block.
        j = normal_joint([0.0, 0.0], [[2.0, 0.8], [0.8, 1.0]])
        b = TruncationBox([-np.inf, 0.0], [np.inf, np.inf])
        rep = moments_with_double_infinite(j, b)
        assert "double-infinite" in rep.method
        sub = tmvn_mean_cov(normal_joint([0.0], [[1.0]]), TruncationBox([0.0], [np.inf]))
        s22 = sub.covariance[0, 0]
        np.testing.assert_allclose(rep.covariance[0, 1], s22 * 0.8 / 1.0, rtol=1e-9)
        direct = truncated_mean_cov(j, b, force_direct=True)
        np.testing.assert_allclose(rep.covariance, direct.covariance, atol=1e-6)
        np.testing.assert_allclose(rep.mean, direct.mean, atol=1e-6)

    def test_three_dim_student_against_gibbs(self, rng):
        omega = _random_pd(rng, 3)
        j = student_joint([0.1, -0.2, 0.3], omega, 6.0)
        b = TruncationBox([-np.inf, -1.0, 0.0], [np.inf, 1.0, 2.0])
        rep = truncated_mean_cov(j, b)
        assert "double-infinite" in rep.method
        batch = sample_truncated_gibbs(j, b, 400_000, seed=31)
        est = estimate_mean_cov(batch)
        assert z_within(rep.mean, est["mean"].value, est["mean"].std_error)
        assert z_within(rep.covariance, est["cov"].value, est["cov"].std_error, k=4.5)

    def test_split_equals_direct(self, rng):
        omega = _random_pd(rng, 3)
        j = student_joint(rng.standard_normal(3) * 0.3, omega, 7.0)
        b = TruncationBox([-np.inf, -0.5, 0.0], [np.inf, 1.5, 2.5])
        split = truncated_mean_cov(j, b)
        direct = truncated_mean_cov(j, b, force_direct=True)
        np.testing.assert_allclose(split.mean, direct.mean, atol=1e-6)
        np.testing.assert_allclose(split.covariance, direct.covariance, atol=1e-6)

    def test_requires_unbounded_coordinate(self):
        j = normal_joint([0.0], [[1.0]])
        with pytest.raises(SpecError):
            moments_with_double_infinite(j, TruncationBox([0.0], [1.0]))


class TestOutOfBounds:
    def test_lower_tail_box_collapses_to_upper_face(self):
        j = normal_joint([0.0, 0.0], [[1.0, 0.6], [0.6, 1.0]])
        b = TruncationBox([-1.0, -50.0], [1.0, -49.0])
        rep = truncated_mean_cov(j, b)
        assert "out-of-bounds" in rep.method
        assert rep.mean[1] == pytest.approx(-49.0)
        assert abs(rep.covariance[1, 1]) < 1e-12

    def test_upper_tail_box_collapses_to_lower_face(self):
        j = normal_joint([0.0, 0.0], [[1.0, 0.2], [0.2, 1.0]])
        b = TruncationBox([-1.0, 40.0], [1.0, 41.0])
        rep = truncated_mean_cov(j, b)
        assert rep.mean[1] == pytest.approx(40.0)

    def test_against_gibbs_in_extreme_box(self):
        j = normal_joint([0.0, 0.0], [[1.0, 0.4], [0.4, 1.0]])
        b = TruncationBox([-0.5, -50.0], [1.5, -49.0])
        rep = truncated_mean_cov(j, b)
        batch = sample_truncated_gibbs(j, b, 200_000, seed=17)
        est = estimate_mean_cov(batch)
        assert np.all(np.abs(rep.mean - est["mean"].value) < 0.05)

    def test_explicit_partition_api(self):
        j = normal_joint([0.0, 0.0], [[1.0, 0.6], [0.6, 1.0]])
        b = TruncationBox([-1.0, -50.0], [1.0, -49.0])
        part = IndexPartition(set_one=(0,), set_two=(1,))
        rep = moments_out_of_bounds(j, b, part)
        auto = truncated_mean_cov(j, b)
        np.testing.assert_allclose(rep.mean, auto.mean, atol=1e-12)
        np.testing.assert_allclose(rep.covariance, auto.covariance, atol=1e-12)

    def test_all_blocks_out_of_bounds(self):
        j = normal_joint([0.0, 0.0], np.eye(2))
        b = TruncationBox([44.0, -50.0], [45.0, -49.0])
        rep = truncated_mean_cov(j, b)
        np.testing.assert_allclose(rep.mean, [44.0, -49.0])
        assert np.all(rep.covariance == 0.0)
        assert rep.notes  # warning annotation present

    def test_gibbs_draws_stay_inside_extreme_box(self):
        j = normal_joint([0.0], [[1.0]])
        b = TruncationBox([-50.0], [-49.0])
        batch = sample_truncated_gibbs(j, b, 50_000, seed=3)
        assert np.all(batch.draws >= -50.0) and np.all(batch.draws <= -49.0)
        # tail slice mean sits 1/49 below the near face
        assert abs(batch.draws.mean() + 49.0) < 0.05


class TestExistence:
    def test_bounded_box_any_order(self):
        b = TruncationBox([-1.0, 0.0], [1.0, 2.0])
        assert existence_check("student_t", 0.3, b, [6, 2])

    def test_cauchy_unbounded_first_moment(self):
        b = TruncationBox([-np.inf, -1.0], [np.inf, np.inf])
        assert not existence_check("student_t", 1.0, b, [1, 0])

    def test_low_df_with_two_finite(self):
        b = TruncationBox([-1.0, 0.0, -np.inf], [1.0, 2.0, np.inf])
        assert existence_check("student_t", 0.5, b, [0, 0, 2])

    def test_normal_always_exists(self):
        b = TruncationBox([-np.inf], [np.inf])
        assert existence_check("normal", None, b, [8])

    def test_strict_boundary_case(self):
        # order exactly nu + p1 does not exist (strict inequality)
        b = TruncationBox([-np.inf, 0.0], [np.inf, 1.0])
        assert not existence_check("student_t", 1.0, b, [2, 0])

    def test_flags(self):
        b = TruncationBox([0.0, -np.inf], [np.inf, np.inf])
        f = moment_flags("student_t", 1.5, b)
        assert f.mean and not f.second

    def test_monotone_in_df(self):
        b = TruncationBox([-np.inf, 0.0], [np.inf, np.inf])
        order = [2, 1]
        prev = False
        for nu in (0.5, 1.0, 2.0, 3.5, 10.0):
            cur = existence_check("student_t", nu, b, order)
            assert cur or not prev
            prev = cur


class TestReportInvariants:
    def test_permutation_equivariance(self, rng):
        omega = _random_pd(rng, 3)
        xi = rng.standard_normal(3)
        lo = np.array([-1.0, -np.inf, 0.0])
        hi = np.array([1.0, 0.5, 2.0])
        j = normal_joint(xi, omega)
        rep = tmvn_mean_cov(j, TruncationBox(lo, hi))
        perm = [2, 0, 1]
        jp = normal_joint(xi[perm], omega[np.ix_(perm, perm)])
        repp = tmvn_mean_cov(jp, TruncationBox(lo[perm], hi[perm]))
        np.testing.assert_allclose(repp.mean, rep.mean[perm], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(repp.covariance,
                                   rep.covariance[np.ix_(perm, perm)],
                                   rtol=1e-9, atol=1e-12)

    def test_sandwich(self, rng):
        omega = _random_pd(rng, 2)
        j = student_joint(rng.standard_normal(2), omega, 5.0)
        lo = np.array([-0.5, -np.inf])
        hi = np.array([1.0, 0.0])
        rep = tmvt_mean_cov(j, TruncationBox(lo, hi))
        assert np.all(rep.mean >= lo - 1e-9)
        assert np.all(rep.mean <= hi + 1e-9)

    def test_cov_consistent_and_psd(self, rng):
        omega = _random_pd(rng, 3)
        j = normal_joint(rng.standard_normal(3), omega)
        b = TruncationBox([-1.0, -2.0, 0.0], [1.0, 0.5, 3.0])
        rep = tmvn_mean_cov(j, b)
        recon = rep.second_moment - np.outer(rep.mean, rep.mean)
        np.testing.assert_allclose(rep.covariance, recon, atol=1e-8)
        eigvals = np.linalg.eigvalsh(rep.covariance)
        assert eigvals.min() > -1e-8

    def test_degenerate_coordinate_reduces_by_conditioning(self):
        j = normal_joint([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
        b = TruncationBox([0.25, -1.0], [0.25, 1.0], allow_degenerate=True)
        rep = tmvn_mean_cov(j, b)
        assert "degenerate" in rep.method
        assert rep.mean[0] == 0.25
        assert np.all(rep.covariance[0] == 0.0)
        # remaining coordinate equals the conditioned univariate problem
        from tse.elliptical import conditional
        sub = conditional(j, [0], [0.25])
        sub_rep = tmvn_mean_cov(sub, TruncationBox([-1.0], [1.0]))
        np.testing.assert_allclose(rep.mean[1], sub_rep.mean[0], rtol=1e-12)
