import numpy as np
import pytest

from factorkit.core import make_rng, matmul
from factorkit.factors import reconstruct
from factorkit.svd import SvdResult, spectrum_curve, svd, truncate


def check_invariants(res: SvdResult, w):
    k = min(w.shape)
    assert res.s.shape == (k,)
    assert np.all(res.s >= 0)
    assert np.all(np.diff(res.s) <= 0)
    assert np.linalg.norm(res.u.T @ res.u - np.eye(k)) < 1e-10
    assert np.linalg.norm(res.vt @ res.vt.T - np.eye(k)) < 1e-10
    recon = res.u @ np.diag(res.s) @ res.vt
    assert np.linalg.norm(recon - w) <= 1e-9 * max(np.linalg.norm(w), 1e-300)
    for col in range(k):
        idx = np.argmax(np.abs(res.u[:, col]))
        assert res.u[idx, col] >= 0


class TestSvd:
    def test_diagonal(self):
        res = svd(np.diag([3.0, 2.0, 1.0]))
        assert np.allclose(res.s, [3.0, 2.0, 1.0])
        check_invariants(res, np.diag([3.0, 2.0, 1.0]))

    def test_identity(self):
        res = svd(np.eye(4))
        assert np.allclose(res.s, np.ones(4))
        check_invariants(res, np.eye(4))

    def test_against_lapack_oracle(self):
        # Independent route: LAPACK's divide-and-conquer singular values.
        w = make_rng(0).normal(size=(8, 6))
        res = svd(w)
        ref = np.linalg.svd(w, compute_uv=False)
        assert np.max(np.abs(res.s - ref)) < 1e-9 * ref[0]
        check_invariants(res, w)

    @pytest.mark.parametrize("shape", [(5, 5), (12, 7), (7, 12), (20, 3), (3, 20), (1, 6), (6, 1)])
    def test_shapes(self, shape):
        w = make_rng(shape[0] * 100 + shape[1]).normal(size=shape)
        res = svd(w)
        ref = np.linalg.svd(w, compute_uv=False)
        assert np.max(np.abs(res.s - ref)) < 1e-9 * max(ref[0], 1.0)
        check_invariants(res, w)

    def test_deterministic(self):
        w = make_rng(1).normal(size=(10, 8))
        r1, r2 = svd(w), svd(w)
        assert np.array_equal(r1.u, r2.u)
        assert np.array_equal(r1.s, r2.s)
        assert np.array_equal(r1.vt, r2.vt)

    def test_rank_deficient(self):
        rng = make_rng(2)
        w = rng.normal(size=(8, 2)) @ rng.normal(size=(2, 6))
        res = svd(w)
        check_invariants(res, w)
        assert res.s[2] < 1e-12 * res.s[0]

    def test_zero_matrix(self):
        res = svd(np.zeros((4, 3)))
        check_invariants(res, np.zeros((4, 3)))
        assert np.all(res.s == 0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            svd(np.array([[1.0, np.inf]]))


class TestTruncate:
    def test_diag_r2(self):
        res = svd(np.diag([3.0, 2.0, 1.0]))
        fac = truncate(res, 2)
        recon = reconstruct(fac)
        assert np.allclose(recon, np.diag([3.0, 2.0, 0.0]), atol=1e-12)
        assert abs(np.linalg.norm(np.diag([3.0, 2.0, 1.0]) - recon) - 1.0) < 1e-12

    def test_full_rank_reconstructs(self):
        w = make_rng(3).normal(size=(9, 6))
        fac = truncate(svd(w), 6)
        assert np.linalg.norm(reconstruct(fac) - w) <= 1e-9 * np.linalg.norm(w)

    def test_error_equals_tail_of_spectrum(self):
        w = make_rng(4).normal(size=(10, 7))
        res = svd(w)
        fac = truncate(res, 3)
        err = np.linalg.norm(w - reconstruct(fac))
        want = np.sqrt(np.sum(res.s[3:] ** 2))
        assert abs(err - want) <= 1e-9 * want

    def test_sqrt_split_balances_factors(self):
        w = make_rng(5).normal(size=(8, 8))
        fac = truncate(svd(w), 4)
        # each column pair carries sqrt(s) on both sides
        for col in range(4):
            assert np.isclose(np.linalg.norm(fac.u[:, col]), np.linalg.norm(fac.v[:, col]), rtol=1e-10)

    def test_rank_out_of_range(self):
        res = svd(np.eye(3))
        with pytest.raises(ValueError):
            truncate(res, 0)
        with pytest.raises(ValueError):
            truncate(res, 4)


class TestSpectrumCurve:
    def test_identity4_exact(self):
        curve = spectrum_curve(np.eye(4))
        want = [np.sqrt(3) / 2, np.sqrt(2) / 2, 0.5, 0.0]
        assert [r for r, _ in curve] == [1, 2, 3, 4]
        for (_, got), expect in zip(curve, want):
            assert abs(got - expect) < 1e-12

    def test_exact_low_rank(self):
        rng = make_rng(6)
        w = np.outer(rng.normal(size=8), rng.normal(size=5))
        w += np.outer(rng.normal(size=8), rng.normal(size=5))
        curve = dict(spectrum_curve(w))
        assert curve[2] < 1e-12

    def test_matches_truncate_oracle(self):
        w = make_rng(7).normal(size=(64, 64))
        res = svd(w)
        norm = np.linalg.norm(w)
        for r, err in spectrum_curve(w):
            recon = reconstruct(truncate(res, r)) if r else None
            want = np.linalg.norm(w - recon) / norm
            assert abs(err - want) <= 1e-9

    def test_monotone_and_terminal(self):
        w = make_rng(8).normal(size=(12, 9))
        errs = [e for _, e in spectrum_curve(w)]
        assert all(a >= b - 1e-15 for a, b in zip(errs, errs[1:]))
        assert errs[-1] <= 1e-9


def test_eckart_young_vs_random_candidates():
    rng = make_rng(9)
    for trial in range(10):
        m, n = int(rng.integers(4, 12)), int(rng.integers(4, 12))
        r = int(rng.integers(1, min(m, n) + 1))
        w = rng.normal(size=(m, n))
        best = np.linalg.norm(w - reconstruct(truncate(svd(w), r)))
        for _ in range(50):
            cand = rng.normal(size=(m, r)) @ rng.normal(size=(r, n))
            assert best <= np.linalg.norm(w - cand) + 1e-12
