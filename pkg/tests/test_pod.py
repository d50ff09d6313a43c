import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from strom.pde_fom import SolverError, make_problem_1d
from strom.pod import (Basis, collect_snapshots, left_singular, pod_basis, rrf_basis, select_K,
                       snapshots_from_trajectories)


def brute_K(s, e_tol):
    total = sum(x * x for x in s)
    acc = 0.0
    for k, x in enumerate(s, 1):
        acc += x * x
        if acc / total >= e_tol - 1e-14:
            return k
    return len(s)


class TestSelectK:
    def test_worked_example(self):
        # energies 25/35.25, 34/35.25, 35/35.25
        assert select_K([5, 3, 1, 0.5], 0.97) == 3
        assert select_K([5, 3, 1, 0.5], 0.96) == 2
        assert select_K([5, 3, 1, 0.5], 1.0) == 4

    def test_single_dominant(self):
        assert select_K([1.0, 0.0, 0.0], 0.999999) == 1

    @pytest.mark.parametrize("s, e", [([], 0.9), ([1, 2], 0.9), ([0, 0], 0.9), ([1, -1], 0.9),
                                      ([1, 0.5], 0.0), ([1, 0.5], 1.5)])
    def test_invalid(self, s, e):
        with pytest.raises(ValueError):
            select_K(s, e)

    @settings(max_examples=200, deadline=None)
    @given(arrays(float, st.integers(1, 30), elements=st.floats(1e-3, 1e3)), st.floats(0.01, 1.0))
    def test_matches_brute_force_and_bound(self, s, e_tol):
        s = np.sort(s)[::-1]
        K = select_K(s, e_tol)
        assert K == brute_K(s, e_tol)
        energy = np.cumsum(s**2) / np.sum(s**2)
        assert energy[K - 1] >= e_tol - 1e-12
        if K > 1:
            assert energy[K - 2] < e_tol


class TestLeftSingular:
    @pytest.mark.parametrize("shape", [(8, 30), (40, 6)])
    def test_against_numpy_svd(self, rng, shape):
        U = rng.standard_normal(shape)
        L, s = left_singular(U)
        ref = np.linalg.svd(U, compute_uv=False)
        k = min(shape)
        np.testing.assert_allclose(s[:k], ref, rtol=1e-10)
        np.testing.assert_allclose(L[:, :k].T @ L[:, :k], np.eye(k), atol=1e-12)
        # L diag(s) spans the column space: reconstruct U U^T
        np.testing.assert_allclose((L[:, :k] * s[:k] ** 2) @ L[:, :k].T, U @ U.T, atol=1e-9)


class TestPOD:
    def test_rank_deficient(self, rng):
        U = rng.standard_normal((50, 3)) @ rng.standard_normal((3, 40))
        B = pod_basis(U, 0.999999)
        assert B.K == 3
        P = B.columns @ B.columns.T
        np.testing.assert_allclose(P @ U, U, atol=1e-10 * np.abs(U).max())

    def test_orthonormal_and_energy(self, desk_snapshots):
        for snaps in desk_snapshots:
            B = pod_basis(snaps, 0.999999)
            np.testing.assert_allclose(B.columns.T @ B.columns, np.eye(B.K), atol=1e-10)
            assert B.energy_captured >= 0.999999 - 1e-12
            s = B.singular_values
            assert B.K == brute_K(s, 0.999999)

    def test_optimal_among_random_subspaces(self, rng, desk_snapshots):
        U = desk_snapshots[0].data
        B = pod_basis(U, 0.999)
        err = np.linalg.norm(U - B.columns @ (B.columns.T @ U))
        for _ in range(100):
            Q, _ = np.linalg.qr(rng.standard_normal((U.shape[0], B.K)))
            assert np.linalg.norm(U - Q @ (Q.T @ U)) >= err - 1e-12
        # Eckart-Young: squared error equals the discarded energy
        s = B.singular_values
        np.testing.assert_allclose(err**2, np.sum(s[B.K:] ** 2), rtol=1e-6)

    def test_sign_convention(self, rng):
        U = rng.standard_normal((20, 12))
        B = pod_basis(U, 1.0)
        cols = B.columns
        idx = np.argmax(np.abs(cols), axis=0)
        assert np.all(cols[idx, np.arange(B.K)] > 0)
        B2 = pod_basis(-U, 1.0)
        np.testing.assert_allclose(B2.columns, cols, atol=1e-10)

    def test_zero_snapshots(self):
        with pytest.raises(ValueError):
            pod_basis(np.zeros((5, 4)), 0.99)

    def test_snapshot_layouts(self, desk_training):
        sp_ = snapshots_from_trajectories(desk_training, "spatial")
        st_ = snapshots_from_trajectories(desk_training, "spacetime")
        assert sp_.shape == (63, 100 * 20)
        assert st_.shape == (6300, 20)
        np.testing.assert_array_equal(sp_.data[:, 100], desk_training[1].states[:, 0])
        np.testing.assert_array_equal(st_.data[63:126, 2], desk_training[2].states[:, 1])


class TestRRF:
    def test_exact_low_rank(self, rng):
        U = rng.standard_normal((60, 5)) @ rng.standard_normal((5, 30))
        B = rrf_basis(U, 5, seed=3)
        np.testing.assert_allclose(B.columns @ (B.columns.T @ U), U, atol=1e-9 * np.abs(U).max())
        np.testing.assert_allclose(B.columns.T @ B.columns, np.eye(5), atol=1e-12)

    def test_deterministic(self, rng):
        U = rng.standard_normal((30, 20))
        np.testing.assert_array_equal(rrf_basis(U, 4, 7).columns, rrf_basis(U, 4, 7).columns)
        assert not np.allclose(rrf_basis(U, 4, 7).columns, rrf_basis(U, 4, 8).columns)

    def test_close_to_pod(self, desk_snapshots):
        U = desk_snapshots[0].data
        pod = pod_basis(U, 0.999999)
        rrf = rrf_basis(U, pod.K + 5, seed=0)
        e_pod = np.linalg.norm(U - pod.columns @ (pod.columns.T @ U))
        e_rrf = np.linalg.norm(U - rrf.columns @ (rrf.columns.T @ U))
        assert e_rrf <= 10 * e_pod

    @pytest.mark.parametrize("k", [0, 31])
    def test_invalid_k(self, rng, k):
        with pytest.raises(ValueError):
            rrf_basis(rng.standard_normal((40, 30)), k)


class TestCollect:
    def test_collect_matches_trajectories(self, desk_ivp, dist1d, desk_training):
        from strom.uq_mc import sample_parameters
        mus = sample_parameters(dist1d, 3, 0)
        S = collect_snapshots(desk_ivp, mus, "spacetime")
        np.testing.assert_array_equal(S.data[:, 1], desk_training[1].stacked())

    def test_empty_and_bad_kind(self, desk_ivp):
        with pytest.raises(ValueError):
            collect_snapshots(desk_ivp, [])
        with pytest.raises(ValueError):
            collect_snapshots(desk_ivp, [[1.0, 0.01]], kind="nope")

    def test_failure_reports_sample(self):
        ivp = make_problem_1d(3, 0.5, 1.0)
        # with nu = 0, I/dt - A/2 is lower triangular with diagonal 1/dt + c/(2h)
        h = 0.25
        bad_c = -2 * h / 0.5
        with pytest.raises(SolverError) as info:
            collect_snapshots(ivp, [[0.1, 0.0], [bad_c, 0.0]])
        assert info.value.sample == 1

    def test_identity_basis(self):
        B = Basis.identity(4)
        assert B.K == 4 and B.n_rows == 4
        v = np.arange(4.0)
        np.testing.assert_array_equal(B.lift(B.project(v)), v)
