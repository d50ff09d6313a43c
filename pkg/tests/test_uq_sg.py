import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.special import eval_hermitenorm, eval_legendre

from strom.pde_fom import fom_solve, make_problem_1d
from strom.pod import Basis, pod_basis
from strom.rom import build_space_rom, build_st_rom
from strom.uq_mc import Normal, ParameterDistribution, Uniform, distribution_1d, distribution_2d
from strom.uq_sg import (PCECoefficients, assemble_sg_rom_system, assemble_sg_system, build_poly_basis,
                         gauss_quadrature, orthonormal_1d, pce_moments, sg_space_solve, sg_spacetime_solve,
                         stochastic_blocks, total_degree_indices)

STD_NORMAL = ParameterDistribution((Normal(0.0, 1.0),))


class TestPolynomials:
    def test_hermite_value(self):
        vals = orthonormal_1d(Normal(0.0, 1.0), np.array(2.0), 3)
        assert vals[2] == pytest.approx(3 / math.sqrt(2), rel=1e-15)

    @pytest.mark.parametrize("n", range(7))
    def test_against_scipy(self, n):
        x = np.linspace(-1, 1, 9)
        h = orthonormal_1d(Normal(0.0, 1.0), x, 6)[n]
        np.testing.assert_allclose(h, eval_hermitenorm(n, x) / math.sqrt(math.factorial(n)), atol=1e-13)
        p = orthonormal_1d(Uniform(-1.0, 1.0), x, 6)[n]
        np.testing.assert_allclose(p, eval_legendre(n, x) * math.sqrt(2 * n + 1), atol=1e-13)

    def test_basis_sizes(self):
        assert build_poly_basis(distribution_2d(), 2).size == 10
        assert build_poly_basis(distribution_1d(), 3).size == 10
        for d in (1, 2, 3):
            for p in range(6):
                assert total_degree_indices(d, p).shape[0] == math.comb(d + p, p)

    def test_index_order(self):
        idx = total_degree_indices(2, 2).tolist()
        assert idx == [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]

    @pytest.mark.parametrize("dist", [distribution_1d(), distribution_2d()])
    @pytest.mark.parametrize("p", [1, 3, 5])
    def test_gram_identity(self, dist, p):
        basis = build_poly_basis(dist, p)
        assert basis.gram_error <= 1e-10
        assert basis.is_orthonormal

    def test_gram_identity_tight_1d(self):
        assert build_poly_basis(STD_NORMAL, 8).gram_error <= 1e-12

    def test_gram_by_monte_carlo_independent(self, rng):
        # coarse check without the library quadrature
        dist = distribution_1d()
        basis = build_poly_basis(dist, 2)
        mus = np.column_stack([rng.normal(1.0, 0.15, 400_000), rng.uniform(0.01, 0.02, 400_000)])
        P = basis(mus)
        assert np.abs(P.T @ P / len(mus) - np.eye(basis.size)).max() < 0.03

    def test_batch_matches_single(self):
        basis = build_poly_basis(distribution_2d(), 3)
        mus = np.array([[0.5, 0.004, 1.0], [0.3, 0.0035, 0.95]])
        np.testing.assert_allclose(basis(mus)[1], basis(mus[1]), rtol=1e-15)


class TestQuadrature:
    def test_weights_sum_to_one(self):
        q = gauss_quadrature(distribution_2d(), 4)
        assert q.weights.sum() == pytest.approx(1.0, abs=1e-14)
        assert q.nodes.shape == (64, 3)

    def test_moments(self):
        q = gauss_quadrature(distribution_1d(), 3)
        assert q.expect(q.nodes[:, 0] ** 2) == pytest.approx(1.0 + 0.15**2, rel=1e-14)
        assert q.expect(q.nodes[:, 1]) == pytest.approx(0.015, rel=1e-14)

    def test_too_coarse_rule_raises(self):
        basis = build_poly_basis(distribution_1d(), 3)
        op = make_problem_1d(5, 0.1, 1.0).op
        with pytest.raises(ValueError):
            stochastic_blocks(op.components, basis, gauss_quadrature(distribution_1d(), 2))


def dense_operator(ivp, mu):
    return sum(c(mu) * (m.toarray() if sp.issparse(m) else m) for c, m in ivp.op.components)


class TestAssembly:
    def test_linear_coefficient_block(self):
        basis = build_poly_basis(STD_NORMAL, 1)
        from strom.pde_fom import Coefficient
        G = stochastic_blocks([(Coefficient(0), None)], basis, gauss_quadrature(STD_NORMAL, 2))[0]
        np.testing.assert_allclose(G, [[0, 1], [1, 0]], atol=1e-15)

    def test_node_loop_oracle(self):
        ivp = make_problem_1d(6, 0.1, 1.0)
        basis = build_poly_basis(distribution_1d(), 2)
        quad = gauss_quadrature(distribution_1d(), 3)
        mat, vec = assemble_sg_system(ivp.op, _const_vec(ivp.source), basis, quad)
        ref = np.zeros((6 * basis.size,) * 2)
        for mu, w in zip(quad.nodes, quad.weights):
            psi = basis(mu)
            ref += w * np.kron(np.outer(psi, psi), dense_operator(ivp, mu))
        M = mat.toarray()
        np.testing.assert_allclose(M, ref, atol=1e-12 * np.abs(ref).max())
        e1 = np.eye(basis.size)[0]
        np.testing.assert_allclose(vec, np.kron(e1, ivp.source), atol=1e-14)

    def test_deterministic_collapse(self):
        # degree 0: SG reduces to the solve at the mean parameter
        ivp = make_problem_1d(15, 0.05, 1.0)
        basis = build_poly_basis(distribution_1d(), 0)
        coeffs = sg_space_solve(ivp, basis)
        np.testing.assert_allclose(coeffs[-1].m, fom_solve(ivp, distribution_1d().mean).final, rtol=1e-12)

    def test_spacetime_identity_matches_space(self):
        ivp = make_problem_1d(5, 0.1, 1.0)
        basis = build_poly_basis(distribution_1d(), 2)
        st = sg_spacetime_solve(ivp, basis, allow_full=True)
        steps = sg_space_solve(ivp, basis)
        stacked = np.stack([c.blocks for c in steps], axis=1).reshape(basis.size, -1)
        np.testing.assert_allclose(st.blocks, stacked, rtol=1e-10, atol=1e-12 * np.abs(stacked).max())
        model = build_st_rom(ivp, Basis.identity(50))
        rom = sg_spacetime_solve(model, basis)
        np.testing.assert_allclose(rom.blocks, stacked, rtol=1e-10, atol=1e-12 * np.abs(stacked).max())

    def test_full_spacetime_guards(self):
        ivp = make_problem_1d(5, 0.1, 1.0)
        basis = build_poly_basis(distribution_1d(), 1)
        with pytest.raises(ValueError):
            sg_spacetime_solve(ivp, basis)
        with pytest.raises(ValueError):
            sg_spacetime_solve(ivp, basis, allow_full=True, max_full_size=10)

    def test_rom_sg_commutes_with_projection(self, rng):
        ivp = make_problem_1d(9, 0.1, 1.0)
        Phi, _ = np.linalg.qr(rng.standard_normal((9, 3)))
        model = build_space_rom(ivp, Basis(Phi))
        basis = build_poly_basis(distribution_1d(), 2)
        red, _ = assemble_sg_rom_system(model, basis)
        full, _ = assemble_sg_system(ivp.op, _const_vec(ivp.source), basis)
        big = np.kron(np.eye(basis.size), Phi)
        np.testing.assert_allclose(red, big.T @ full.toarray() @ big, atol=1e-12 * np.abs(red).max())

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.9, 1.1), st.floats(0.011, 0.019))
    def test_pce_near_fom(self, c, nu):
        ivp = make_problem_1d(15, 0.05, 1.0)
        coeffs = _cached_sg(ivp)
        ref = fom_solve(ivp, [c, nu]).final
        assert np.linalg.norm(coeffs.evaluate([c, nu]) - ref) / np.linalg.norm(ref) < 2e-3


_SG_CACHE = {}


def _cached_sg(ivp):
    if "c" not in _SG_CACHE:
        _SG_CACHE["c"] = sg_space_solve(ivp, build_poly_basis(distribution_1d(), 4))[-1]
    return _SG_CACHE["c"]


def _const_vec(v):
    from strom.pde_fom import CONSTANT, AffineVector
    return AffineVector(((CONSTANT, v),))


class TestMoments:
    def test_worked_example(self):
        basis = build_poly_basis(STD_NORMAL, 1)
        m = pce_moments(PCECoefficients(np.array([2.0, 3.0]), 1, basis))
        assert m.mean[0] == 2.0 and m.variance[0] == 9.0

    def test_linear_in_parameters(self):
        # u(mu) = a + b * (c - 1) / 0.15 has mean a, variance b^2
        basis = build_poly_basis(distribution_1d(), 2)
        coeffs = PCECoefficients(np.array([1.0, 2.0, 0, 0, 0, 0]), 1, basis)
        mus = np.array([[1.15, 0.012]])
        assert coeffs.evaluate(mus)[0, 0] == pytest.approx(3.0, rel=1e-14)
        m = pce_moments(coeffs)
        assert (m.mean[0], m.variance[0]) == (1.0, 4.0)

    def test_basis_handle_lifts(self, rng):
        basis = build_poly_basis(STD_NORMAL, 2)
        Phi, _ = np.linalg.qr(rng.standard_normal((6, 2)))
        m = rng.standard_normal(3 * 2)
        lifted = pce_moments(PCECoefficients(m, 2, basis), Phi)
        direct = pce_moments(PCECoefficients(np.kron(np.eye(3), Phi) @ m, 6, basis))
        np.testing.assert_allclose(lifted.mean, direct.mean, rtol=1e-13)
        np.testing.assert_allclose(lifted.variance, direct.variance, rtol=1e-12)

    def test_matches_quadrature_of_fom(self):
        ivp = make_problem_1d(15, 0.05, 1.0)
        coeffs = _cached_sg(ivp)
        mom = pce_moments(coeffs)
        quad = gauss_quadrature(distribution_1d(), 8)
        vals = np.array([fom_solve(ivp, mu).final for mu in quad.nodes])
        mean = quad.expect(vals)
        var = quad.expect((vals - mean) ** 2)
        assert np.linalg.norm(mom.mean - mean) / np.linalg.norm(mean) < 1e-4
        assert np.linalg.norm(mom.variance - var) / np.linalg.norm(var) < 1e-2

    def test_csv(self, tmp_path):
        basis = build_poly_basis(STD_NORMAL, 1)
        PCECoefficients(np.arange(6.0), 3, basis).to_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "block_index,dof_index,value"
        assert lines[5] == "1,1,4"


class TestRomSG:
    def test_space_rom_sg_close_to_full(self, desk_ivp, desk_snapshots):
        basis = build_poly_basis(distribution_1d(), 3)
        pod = pod_basis(desk_snapshots[0], 0.999999)
        model = build_space_rom(desk_ivp, pod)
        red = pce_moments(sg_space_solve(model, basis)[-1], pod)
        full = pce_moments(sg_space_solve(desk_ivp, basis)[-1])
        assert np.linalg.norm(red.mean - full.mean) / np.linalg.norm(full.mean) < 1e-2
