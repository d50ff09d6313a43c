"""Parametrized advection-diffusion(-reaction) full-order models.

Finite-difference operators on the unit interval / unit square with homogeneous
Dirichlet nodes eliminated, stored in affine form ``A(mu) = sum_q theta_q(mu) A_q``,
plus Crank-Nicolson time stepping and the stacked space-time system.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """A linear solve failed (singular or non-finite system)."""

    def __init__(self, message, step=None, sample=None):
        super().__init__(message)
        self.step = step
        self.sample = sample


@dataclass(frozen=True)
class Coefficient:
    """Scalar coefficient ``theta(mu)``: a constant, ``mu[param]`` or ``transform(mu[param])``."""

    param: int | None = None
    transform: Callable | None = None
    label: str = ""

    @property
    def is_constant(self):
        return self.param is None

    def __call__(self, mu):
        # mu is (n_mu,) or a batch (n_nodes, n_mu)
        mu = np.asarray(mu, dtype=float)
        if self.param is None:
            return np.ones(mu.shape[:-1]) if mu.ndim > 1 else 1.0
        x = mu[..., self.param]
        return self.transform(x) if self.transform is not None else x


CONSTANT = Coefficient(label="1")


def _is_sparse(a):
    return sp.issparse(a)


@dataclass(frozen=True)
class AffineOperator:
    """Parametric matrix as an ordered list of ``(Coefficient, A_q)`` pairs.

    Components may be scipy sparse matrices or dense ndarrays (reduced models).
    """

    components: tuple

    def __post_init__(self):
        comps = tuple((c, m) for c, m in self.components)
        if not comps:
            raise ValueError("AffineOperator needs at least one component")
        n = comps[0][1].shape[0]
        for _, m in comps:
            if m.shape != (n, n):
                raise ValueError(f"component shape {m.shape} does not match ({n}, {n})")
        object.__setattr__(self, "components", comps)

    @property
    def n(self):
        return self.components[0][1].shape[0]

    @property
    def n_params(self):
        """Minimum parameter-vector length the coefficients need."""
        idx = [c.param for c, _ in self.components if c.param is not None]
        return max(idx) + 1 if idx else 0

    @property
    def sparse(self):
        return all(_is_sparse(m) for _, m in self.components)

    def coefficients(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if mu.shape[-1] < self.n_params:
            raise ValueError(f"parameter vector of length {mu.shape[-1]}, need {self.n_params}")
        return [c(mu) for c, _ in self.components]

    def __call__(self, mu):
        return evaluate_operator(self, mu)

    def map(self, fn):
        """New operator with ``fn`` applied to every component matrix."""
        return AffineOperator(tuple((c, fn(m)) for c, m in self.components))

    @cached_property
    def _aligned(self):
        # all components on the union sparsity pattern, so evaluation is data @ thetas
        pattern = sum(abs(m) for _, m in self.components).tocsr()
        pattern.sum_duplicates()
        pattern.sort_indices()
        rows = np.repeat(np.arange(self.n), np.diff(pattern.indptr))
        data = np.column_stack([np.asarray(m.tocsr()[rows, pattern.indices]).ravel()
                                for _, m in self.components])
        return pattern.indices, pattern.indptr, data


@dataclass(frozen=True)
class AffineVector:
    """Parametric vector ``b(mu) = sum_q theta_q(mu) b_q``."""

    components: tuple

    def __post_init__(self):
        comps = tuple((c, np.asarray(v, dtype=float)) for c, v in self.components)
        if not comps:
            raise ValueError("AffineVector needs at least one component")
        n = comps[0][1].shape
        if any(v.shape != n or v.ndim != 1 for _, v in comps):
            raise ValueError("AffineVector components must be equal-length 1-D arrays")
        object.__setattr__(self, "components", comps)

    @property
    def n(self):
        return self.components[0][1].shape[0]

    def __call__(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        out = np.zeros(self.n)
        for c, v in self.components:
            out += c(mu) * v
        return out

    def map(self, fn):
        return AffineVector(tuple((c, fn(v)) for c, v in self.components))


def evaluate_operator(op, mu):
    """Realize ``A(mu) = sum_q theta_q(mu) A_q`` (sparse CSR or dense)."""
    thetas = op.coefficients(mu)
    if op.sparse:
        indices, indptr, data = op._aligned
        return sp.csr_matrix((data @ np.array(thetas, dtype=float), indices, indptr), shape=(op.n, op.n))
    out = np.zeros((op.n, op.n))
    for t, (_, m) in zip(thetas, op.components):
        out += float(t) * (m.toarray() if _is_sparse(m) else m)
    return out


@dataclass(frozen=True)
class SpatialMesh:
    """Uniform interior grid on [0, 1]^dim; boundary nodes are not unknowns."""

    n_x: tuple

    def __post_init__(self):
        n = tuple(int(k) for k in np.atleast_1d(self.n_x))
        if len(n) not in (1, 2):
            raise ValueError("mesh dimension must be 1 or 2")
        if any(k < 2 for k in n):
            raise ValueError(f"need at least 2 interior nodes per axis, got {n}")
        object.__setattr__(self, "n_x", n)

    @property
    def dim(self):
        return len(self.n_x)

    @property
    def h(self):
        return tuple(1.0 / (k + 1) for k in self.n_x)

    @property
    def n_s(self):
        return int(np.prod(self.n_x))

    def coordinates(self):
        """Node coordinates, shape (n_s, dim), x varying fastest."""
        axes = [np.arange(1, k + 1) * h for k, h in zip(self.n_x, self.h)]
        if self.dim == 1:
            return axes[0][:, None]
        X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
        return np.column_stack([X.ravel(), Y.ravel()])


def _second_difference(n, h):
    return sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n, n)) / h**2


def _backward_difference(n, h):
    return sp.diags([-1.0, 1.0], [-1, 0], shape=(n, n)) / h


def _backward_difference2(n, h):
    # (3u_i - 4u_{i-1} + u_{i-2}) / 2h, first-order at the first interior node
    d = sp.diags([1.0, -4.0, 3.0], [-2, -1, 0], shape=(n, n)).tolil() / (2 * h)
    d[0, 0] = 1.0 / h
    return d.tocsr()


def assemble_1d_advdiff(n_x):
    """``A(c, nu) = -c D1 + nu D2`` on ``n_x`` interior nodes, parameters ``(c, nu)``."""
    if int(n_x) < 2:
        raise ValueError(f"n_x must be >= 2, got {n_x}")
    n = int(n_x)
    h = 1.0 / (n + 1)
    d1 = _backward_difference(n, h).tocsr()
    d2 = _second_difference(n, h).tocsr()
    return AffineOperator((
        (Coefficient(0, label="c"), -d1),
        (Coefficient(1, label="nu"), d2),
    ))


ADVECTION_ANGLE = np.pi / 3


def assemble_2d_advdiff(n_x, n_y):
    """2D advection-diffusion-reaction operator with parameters ``(b, sigma, nu)``.

    Unknowns are ordered x-fastest. Advection uses the second-order backward
    stencil in each direction, diffusion the 5-point Laplacian.
    """
    if int(n_x) < 3 or int(n_y) < 3:
        raise ValueError(f"2D mesh needs >= 3 nodes per axis, got ({n_x}, {n_y})")
    n_x, n_y = int(n_x), int(n_y)
    hx, hy = 1.0 / (n_x + 1), 1.0 / (n_y + 1)
    ix, iy = sp.identity(n_x, format="csr"), sp.identity(n_y, format="csr")
    d1x = sp.kron(iy, _backward_difference2(n_x, hx))
    d1y = sp.kron(_backward_difference2(n_y, hy), ix)
    lap = sp.kron(iy, _second_difference(n_x, hx)) + sp.kron(_second_difference(n_y, hy), ix)
    adv = -(np.cos(ADVECTION_ANGLE) * d1x + np.sin(ADVECTION_ANGLE) * d1y)
    return AffineOperator((
        (Coefficient(0, label="b"), adv.tocsr()),
        (Coefficient(1, label="sigma"), -sp.identity(n_x * n_y, format="csr")),
        (Coefficient(2, label="nu"), lap.tocsr()),
    ))


def cn_step_operators(op, dt):
    """Crank-Nicolson pair ``lhs = I/dt - A/2``, ``rhs = I/dt + A/2`` in affine form."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    eye = sp.identity(op.n, format="csr") if op.sparse else np.eye(op.n)
    lhs = [(CONSTANT, eye / dt)] + [(c, -0.5 * m) for c, m in op.components]
    rhs = [(CONSTANT, eye / dt)] + [(c, 0.5 * m) for c, m in op.components]
    return AffineOperator(tuple(lhs)), AffineOperator(tuple(rhs))


@dataclass(frozen=True)
class StateTrajectory:
    """States ``u^1..u^{N_t}`` as columns of an ``(N_s, N_t)`` array."""

    states: np.ndarray

    @property
    def n_s(self):
        return self.states.shape[0]

    @property
    def n_t(self):
        return self.states.shape[1]

    @property
    def final(self):
        return self.states[:, -1]

    def stacked(self):
        """Time-major stacking ``[u^1; u^2; ...; u^{N_t}]``."""
        return self.states.T.reshape(-1)

    @classmethod
    def from_stacked(cls, vec, n_s):
        vec = np.asarray(vec)
        return cls(vec.reshape(-1, n_s).T.copy())

    def to_csv(self, path):
        """One row per time step, 17 significant digits."""
        np.savetxt(path, self.states.T, delimiter=",", fmt="%.17g")


@dataclass(frozen=True)
class ParametrizedIVP:
    """``du/dt = A(mu) u + g``, ``u(0) = u0`` on ``[0, T]`` with ``n_t`` CN steps."""

    mesh: SpatialMesh
    op: AffineOperator
    source: np.ndarray
    u0: np.ndarray
    T: float
    dt: float
    n_t: int = field(init=False)

    def __post_init__(self):
        src = np.asarray(self.source, dtype=float)
        u0 = np.asarray(self.u0, dtype=float)
        if self.op.n != self.mesh.n_s or src.shape != (self.mesh.n_s,) or u0.shape != (self.mesh.n_s,):
            raise ValueError("operator, source and initial state must match the mesh size")
        if not np.all(np.isfinite(u0)):
            raise ValueError("initial state must be finite")
        if not (self.dt > 0 and self.T > 0):
            raise ValueError("T and dt must be positive")
        n_t = int(round(self.T / self.dt))
        if n_t < 1 or abs(n_t * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "u0", u0)
        object.__setattr__(self, "n_t", n_t)

    @property
    def n_s(self):
        return self.mesh.n_s

    @cached_property
    def _step_operators(self):
        return cn_step_operators(self.op, self.dt)

    def step_operators(self):
        return self._step_operators

    def step_system(self):
        lhs, rhs = self.step_operators()
        return StepSystem(lhs, rhs, AffineVector(((CONSTANT, self.source),)), self.u0, self.n_t, self.dt)


@dataclass(frozen=True)
class StepSystem:
    """Affine one-step recurrence ``lhs(mu) u^n = rhs(mu) u^{n-1} + source(mu)``."""

    lhs: AffineOperator
    rhs: AffineOperator
    source: AffineVector
    u0: np.ndarray
    n_t: int
    dt: float


def make_problem_1d(n_x=255, dt=1e-3, T=1.0, source=1.0):
    mesh = SpatialMesh((n_x,))
    return ParametrizedIVP(mesh, assemble_1d_advdiff(n_x), np.full(mesh.n_s, float(source)),
                           np.zeros(mesh.n_s), T, dt)


def make_problem_2d(n_x=63, n_y=63, dt=5e-3, T=2.5, source=1.0):
    mesh = SpatialMesh((n_x, n_y))
    return ParametrizedIVP(mesh, assemble_2d_advdiff(n_x, n_y), np.full(mesh.n_s, float(source)),
                           np.zeros(mesh.n_s), T, dt)


# small systems: dense matvec beats sparse dispatch overhead
DENSE_MATVEC_LIMIT = 256


def _factorize(mat, step=None):
    try:
        lu = spla.splu(sp.csc_matrix(mat))
    except RuntimeError as exc:
        raise SolverError(f"singular step matrix: {exc}", step=step) from exc
    return lu


def fom_solve(ivp, mu, forcing=None):
    """March Crank-Nicolson over all ``n_t`` steps; ``u0`` itself is not stored.

    ``forcing(t)`` optionally adds a time-dependent source, averaged
    trapezoidally over each step.
    """
    lhs_op, rhs_op = ivp.step_operators()
    lhs, rhs = lhs_op(mu), rhs_op(mu)
    lu = _factorize(lhs, step=1)
    if ivp.n_s <= DENSE_MATVEC_LIMIT:
        rhs = rhs.toarray()
    out = np.empty((ivp.n_s, ivp.n_t))
    u = ivp.u0
    f_prev = forcing(0.0) if forcing is not None else None
    for n in range(ivp.n_t):
        b = rhs @ u + ivp.source
        if forcing is not None:
            f_next = forcing((n + 1) * ivp.dt)
            b += 0.5 * (f_prev + f_next)
            f_prev = f_next
        u = out[:, n] = lu.solve(b)
    bad = ~np.isfinite(out).all(axis=0)
    if bad.any():
        step = int(np.argmax(bad)) + 1
        raise SolverError(f"non-finite state at step {step}", step=step)
    return StateTrajectory(out)


def _shift(n_t):
    return sp.diags([1.0], [-1], shape=(n_t, n_t), format="csr")


def st_affine(ivp):
    """Affine form of the stacked space-time system ``M(mu) u_vec = r(mu)``.

    ``M = (I - S) (x) I/dt - sum_q theta_q (I + S) (x) A_q/2`` with ``S`` the
    time shift; the initial state enters only the first rhs block.
    """
    n_t = ivp.n_t
    it, s = sp.identity(n_t, format="csr"), _shift(n_t)
    eye = sp.identity(ivp.n_s, format="csr")
    mat = [(CONSTANT, sp.kron(it - s, eye / ivp.dt, format="csr"))]
    mat += [(c, sp.kron(it + s, -0.5 * a, format="csr")) for c, a in ivp.op.components]

    e1 = np.zeros(n_t)
    e1[0] = 1.0
    vec = [(CONSTANT, np.tile(ivp.source, n_t) + np.kron(e1, ivp.u0 / ivp.dt))]
    if np.any(ivp.u0):
        vec += [(c, np.kron(e1, 0.5 * (a @ ivp.u0))) for c, a in ivp.op.components]
    return AffineOperator(tuple(mat)), AffineVector(tuple(vec))


def st_assemble(ivp, mu):
    """Block lower-bidiagonal space-time matrix and rhs at ``mu``."""
    mat, vec = st_affine(ivp)
    return evaluate_operator(mat, mu), vec(mu)


def st_solve(ivp, mu):
    mat, rhs = st_assemble(ivp, mu)
    try:
        u = spla.spsolve(sp.csc_matrix(mat), rhs)
    except RuntimeError as exc:
        raise SolverError(f"singular space-time system: {exc}") from exc
    return StateTrajectory.from_stacked(u, ivp.n_s)
