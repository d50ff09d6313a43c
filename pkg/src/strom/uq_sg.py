"""Stochastic Galerkin propagation with orthonormal polynomial chaos.

Hermite polynomials are paired with Normal marginals and Legendre with
Uniform ones, truncated at total degree ``p``. Expectations are evaluated with
tensor Gauss rules; affinity of the operators means only the small
``N_psi x N_psi`` stochastic blocks ``E[theta_q psi psi^T]`` are integrated.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from .pde_fom import AffineOperator, ParametrizedIVP, SolverError, st_affine
from .rom import SPACE, SPACETIME, ReducedModel
from .uq_mc import MomentEstimate, Normal, Uniform

GRAM_TOL = 1e-8
# full-order space-time SG is only allowed below this many unknowns
FULL_ST_SG_LIMIT = 200_000


def _standardize(marginal, mu):
    if isinstance(marginal, Normal):
        return (mu - marginal.mean) / marginal.std
    if isinstance(marginal, Uniform):
        return 2.0 * (mu - marginal.lo) / (marginal.hi - marginal.lo) - 1.0
    raise TypeError(f"unsupported marginal {type(marginal).__name__}")


def orthonormal_1d(marginal, x, degree):
    """Values of the degree ``0..degree`` orthonormal polynomials at standardized ``x``.

    Returns an array of shape ``(degree + 1,) + x.shape``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((degree + 1,) + x.shape)
    out[0] = 1.0
    if degree == 0:
        return out
    if isinstance(marginal, Normal):
        out[1] = x
        for n in range(1, degree):
            out[n + 1] = (x * out[n] - np.sqrt(n) * out[n - 1]) / np.sqrt(n + 1)
    elif isinstance(marginal, Uniform):
        # recurrence of sqrt(2n+1) P_n
        out[1] = np.sqrt(3.0) * x
        for n in range(1, degree):
            a = np.sqrt((2 * n + 1) * (2 * n + 3)) / (n + 1)
            b = n / (n + 1) * np.sqrt((2 * n + 3) / (2 * n - 1))
            out[n + 1] = a * x * out[n] - b * out[n - 1]
    else:
        raise TypeError(f"unsupported marginal {type(marginal).__name__}")
    return out


def total_degree_indices(dim, degree):
    """Multi-indices with ``|alpha| <= degree``, graded, then lexicographically descending."""
    idx = [a for a in itertools.product(range(degree + 1), repeat=dim) if sum(a) <= degree]
    idx.sort(key=lambda a: (sum(a), tuple(-v for v in a)))
    return np.array(idx, dtype=int).reshape(-1, dim)


@dataclass(frozen=True)
class PolyBasis:
    dist: object
    degree: int

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")
        for m in self.dist.marginals:
            if not isinstance(m, (Normal, Uniform)):
                raise TypeError(f"unsupported marginal {type(m).__name__}")

    @cached_property
    def indices(self):
        return total_degree_indices(self.dist.dim, self.degree)

    @property
    def size(self):
        return self.indices.shape[0]

    def __call__(self, mu):
        """``psi(mu)``: shape ``(N_psi,)`` for one point, ``(n, N_psi)`` for a batch."""
        mu = np.asarray(mu, dtype=float)
        single = mu.ndim == 1
        mu = np.atleast_2d(mu)
        out = np.ones((mu.shape[0], self.size))
        for k, marginal in enumerate(self.dist.marginals):
            vals = orthonormal_1d(marginal, _standardize(marginal, mu[:, k]), self.degree)
            out *= vals[self.indices[:, k]].T
        return out[0] if single else out

    @cached_property
    def gram_error(self):
        """Max deviation of ``E[psi psi^T]`` from the identity on an exact rule."""
        quad = gauss_quadrature(self.dist, self.degree + 1)
        P = self(quad.nodes)
        return float(np.max(np.abs(P.T @ (quad.weights[:, None] * P) - np.eye(self.size))))

    @property
    def is_orthonormal(self):
        return self.gram_error <= GRAM_TOL


def build_poly_basis(dist, degree):
    return PolyBasis(dist, int(degree))


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    nodes_per_axis: tuple

    def expect(self, values):
        """``E[g]`` for ``values`` of shape ``(n_nodes, ...)``."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def gauss_quadrature(dist, nodes_per_axis):
    """Tensor Gauss-Hermite / Gauss-Legendre rule with probability weights."""
    n = int(nodes_per_axis)
    if n < 1:
        raise ValueError(f"nodes_per_axis must be >= 1, got {nodes_per_axis}")
    axes_x, axes_w = [], []
    for m in dist.marginals:
        if isinstance(m, Normal):
            x, w = hermegauss(n)
            axes_x.append(m.mean + m.std * x)
            axes_w.append(w / np.sqrt(2 * np.pi))
        elif isinstance(m, Uniform):
            x, w = leggauss(n)
            axes_x.append(m.lo + 0.5 * (m.hi - m.lo) * (x + 1.0))
            axes_w.append(0.5 * w)
        else:
            raise TypeError(f"unsupported marginal {type(m).__name__}")
    nodes = np.array(list(itertools.product(*axes_x)))
    weights = np.prod(np.array(list(itertools.product(*axes_w))), axis=1)
    return QuadratureRule(nodes, weights, (n,) * dist.dim)


def default_quadrature(basis):
    return gauss_quadrature(basis.dist, basis.degree + 1)


def _psi_at_nodes(basis, quad):
    P = basis(quad.nodes)
    gram = P.T @ (quad.weights[:, None] * P)
    if np.max(np.abs(gram - np.eye(basis.size))) > GRAM_TOL:
        raise ValueError("quadrature too coarse: E[psi psi^T] deviates from the identity")
    return P


def stochastic_blocks(components, basis, quad):
    """``E[theta_q psi psi^T]`` for each coefficient in ``components``."""
    P = _psi_at_nodes(basis, quad)
    out = []
    for c, _ in components:
        wt = quad.weights * np.broadcast_to(c(quad.nodes), quad.weights.shape)
        out.append(P.T @ (wt[:, None] * P))
    return out


def stochastic_moments(components, basis, quad):
    """``E[theta_q psi]`` for each coefficient."""
    P = _psi_at_nodes(basis, quad)
    return [P.T @ (quad.weights * np.broadcast_to(c(quad.nodes), quad.weights.shape))
            for c, _ in components]


def _kron_sum(blocks, mats):
    if all(sp.issparse(m) for m in mats):
        out = sum(sp.kron(sp.csr_matrix(G), m, format="csr") for G, m in zip(blocks, mats))
        return out.tocsr()
    return sum(np.kron(G, m.toarray() if sp.issparse(m) else m) for G, m in zip(blocks, mats))


def assemble_sg_system(op, rhs, basis, quad=None):
    """``E[psi psi^T (x) A] m = E[psi (x) b]`` assembled as ``sum_q E[theta_q psi psi^T] (x) A_q``."""
    quad = quad or default_quadrature(basis)
    G = stochastic_blocks(op.components, basis, quad)
    mat = _kron_sum(G, [m for _, m in op.components])
    e = stochastic_moments(rhs.components, basis, quad)
    vec = sum(np.kron(ei, v) for ei, (_, v) in zip(e, rhs.components))
    return mat, vec


def assemble_sg_rom_system(reduced, basis, quad=None):
    """SG system of a reduced model: the spatial blocks are ``Phi^T A_q Phi``."""
    return assemble_sg_system(reduced.reduced_op, reduced.reduced_source, basis, quad)


@dataclass(frozen=True)
class PCECoefficients:
    """Coefficient vector ``m`` in psi-major blocks of length ``n_block``."""

    m: np.ndarray
    n_block: int
    basis: PolyBasis

    @property
    def blocks(self):
        return self.m.reshape(self.basis.size, self.n_block)

    def evaluate(self, mu):
        """``(psi(mu)^T (x) I) m``; batched over rows of ``mu``."""
        return self.basis(mu) @ self.blocks

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("block_index,dof_index,value\n")
            for j, block in enumerate(self.blocks):
                for i, v in enumerate(block):
                    fh.write(f"{j},{i},{v:.17g}\n")


class _Factor:
    def __init__(self, mat):
        if sp.issparse(mat):
            try:
                self._lu = spla.splu(sp.csc_matrix(mat))
            except RuntimeError as exc:
                raise SolverError(f"singular SG matrix: {exc}") from exc
            self.solve = self._lu.solve
        else:
            lu, piv = sla.lu_factor(mat, check_finite=False)
            if np.any(np.abs(np.diag(lu)) <= np.finfo(float).tiny):
                raise SolverError("singular SG matrix")
            self.solve = lambda b: sla.lu_solve((lu, piv), b, check_finite=False)


def sg_space_solve(model, basis, quad=None):
    """March the SG system in coefficient space, one ``PCECoefficients`` per step.

    ``model`` is a ``ParametrizedIVP`` (full order) or a space-regime ``ReducedModel``.
    """
    if isinstance(model, ReducedModel) and model.regime != SPACE:
        raise ValueError("sg_space_solve needs a space-regime model")
    quad = quad or default_quadrature(basis)
    system = model.step_system()
    G = stochastic_blocks(system.lhs.components, basis, quad)
    lhs = _kron_sum(G, [m for _, m in system.lhs.components])
    rhs = _kron_sum(G, [m for _, m in system.rhs.components])
    e = stochastic_moments(system.source.components, basis, quad)
    f = sum(np.kron(ei, v) for ei, (_, v) in zip(e, system.source.components))
    n = system.u0.size
    e1 = np.zeros(basis.size)
    e1[0] = 1.0
    m = np.kron(e1, system.u0)
    fac = _Factor(lhs)
    out = []
    for _ in range(system.n_t):
        m = fac.solve(rhs @ m + f)
        out.append(PCECoefficients(m, n, basis))
    return out


def sg_spacetime_solve(model, basis, quad=None, allow_full=False, max_full_size=FULL_ST_SG_LIMIT):
    """One SG solve for all time steps.

    ``model`` is a space-time ``ReducedModel``; a ``ParametrizedIVP`` selects the
    unreduced stacked system, which requires ``allow_full`` and a small problem.
    """
    quad = quad or default_quadrature(basis)
    if isinstance(model, ParametrizedIVP):
        size = model.n_s * model.n_t * basis.size
        if not allow_full:
            raise ValueError("full-order space-time SG requires allow_full=True")
        if size > max_full_size:
            raise ValueError(f"full-order space-time SG system has {size} unknowns, limit is {max_full_size}")
        op, rhs = st_affine(model)
        n = model.n_s * model.n_t
    elif isinstance(model, ReducedModel) and model.regime == SPACETIME:
        op, rhs = model.reduced_op, model.reduced_source
        n = model.K
    else:
        raise ValueError("sg_spacetime_solve needs a space-time ReducedModel or a ParametrizedIVP")
    mat, vec = assemble_sg_system(op, rhs, basis, quad)
    m = _Factor(mat).solve(vec)
    return PCECoefficients(np.asarray(m), n, basis)


def pce_moments(coeffs, basis_handle=None):
    """Mean and variance of ``Phi (psi^T (x) I) m``; exact by orthonormality."""
    if not coeffs.basis.is_orthonormal:
        raise ValueError("polynomial basis is not orthonormal")
    blocks = coeffs.blocks
    if basis_handle is not None:
        Phi = getattr(basis_handle, "columns", basis_handle)
        blocks = blocks @ np.asarray(Phi).T
    return MomentEstimate(blocks[0].copy(), np.sum(blocks[1:] ** 2, axis=0), 0)

