"""Galerkin reduced-order models in the space and space-time regimes."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .pde_fom import (CONSTANT, AffineOperator, AffineVector, SolverError, StateTrajectory,
                      StepSystem, cn_step_operators, st_affine)

SPACE = "space"
SPACETIME = "spacetime"


def galerkin_project(op, basis):
    """Component-wise ``Phi^T A_q Phi``; coefficient tags are kept."""
    Phi = getattr(basis, "columns", basis)
    if Phi.shape[0] != op.n:
        raise ValueError(f"basis has {Phi.shape[0]} rows, operator dimension is {op.n}")
    return op.map(lambda A: np.asarray(Phi.T @ (A @ Phi)))


def project_vector(vec, basis):
    Phi = getattr(basis, "columns", basis)
    if Phi.shape[0] != vec.n:
        raise ValueError(f"basis has {Phi.shape[0]} rows, vector length is {vec.n}")
    return vec.map(lambda v: Phi.T @ v)


@dataclass(frozen=True)
class ReducedModel:
    """Reduced operator and source over a basis.

    In the space regime ``reduced_op`` holds ``Phi^T A_q Phi`` of the spatial
    operator; in the space-time regime it holds the projected components of
    the stacked space-time matrix, and ``reduced_source`` its projected rhs.
    """

    basis: object
    regime: str
    reduced_op: AffineOperator
    reduced_source: AffineVector
    n_s: int
    n_t: int
    dt: float
    u0_hat: np.ndarray | None = None

    @property
    def K(self):
        return self.basis.K

    @cached_property
    def _step_operators(self):
        return cn_step_operators(self.reduced_op, self.dt)

    def step_system(self):
        if self.regime != SPACE:
            raise ValueError("time stepping is only defined for the space regime")
        lhs, rhs = self._step_operators
        return StepSystem(lhs, rhs, self.reduced_source, self.u0_hat, self.n_t, self.dt)

    @cached_property
    def final_rows(self):
        """Rows of the basis that map to the final-time field."""
        Phi = self.basis.columns
        return Phi if self.regime == SPACE else Phi[(self.n_t - 1) * self.n_s:]


@dataclass(frozen=True)
class ReducedState:
    coeffs: np.ndarray
    regime: str


def build_space_rom(ivp, basis):
    if basis.n_rows != ivp.n_s:
        raise ValueError(f"space ROM needs a spatial basis with {ivp.n_s} rows, got {basis.n_rows}")
    reduced_op = galerkin_project(ivp.op, basis)
    source = project_vector(AffineVector(((CONSTANT, ivp.source),)), basis)
    u0_hat = basis.project(ivp.u0)
    return ReducedModel(basis, SPACE, reduced_op, source, ivp.n_s, ivp.n_t, ivp.dt, u0_hat)


def build_st_rom(ivp, basis):
    if basis.n_rows != ivp.n_s * ivp.n_t:
        raise ValueError(f"space-time ROM needs {ivp.n_s * ivp.n_t} basis rows, got {basis.n_rows}")
    mat, vec = st_affine(ivp)
    return ReducedModel(basis, SPACETIME, galerkin_project(mat, basis), project_vector(vec, basis),
                        ivp.n_s, ivp.n_t, ivp.dt)


def _factor(mat, model, mu):
    lu, piv = sla.lu_factor(mat, check_finite=False)
    if not np.all(np.isfinite(lu)) or np.any(np.abs(np.diag(lu)) <= np.finfo(float).tiny):
        raise SolverError(f"singular reduced matrix ({model.regime} regime, mu={list(np.atleast_1d(mu))})")
    return lu, piv


RESIDUAL_TOL = 1e-10


def _check_residual(res, scale, model, mu):
    if not np.all(np.isfinite(res)) or np.linalg.norm(res) > RESIDUAL_TOL * max(scale, 1e-300):
        raise SolverError(f"reduced solve residual too large ({model.regime} regime, mu={list(np.atleast_1d(mu))})")


def rom_solve(model, mu):
    """Space regime: ``N_t`` dense ``K x K`` solves. Space-time regime: one solve."""
    if model.regime == SPACETIME:
        M = model.reduced_op(mu)
        r = model.reduced_source(mu)
        u = sla.lu_solve(_factor(M, model, mu), r, check_finite=False)
        _check_residual(M @ u - r, np.linalg.norm(M) * np.linalg.norm(u) + np.linalg.norm(r), model, mu)
        return ReducedState(u, SPACETIME)

    lhs_op, rhs_op = model._step_operators
    L, R = lhs_op(mu), rhs_op(mu)
    f = model.reduced_source(mu)
    factors = _factor(L, model, mu)
    out = np.empty((model.K, model.n_t))
    u = model.u0_hat
    for n in range(model.n_t):
        u = out[:, n] = sla.lu_solve(factors, R @ u + f, check_finite=False)
    # residual of every step at once
    prev = np.column_stack([model.u0_hat, out[:, :-1]])
    res = L @ out - R @ prev - f[:, None]
    scale = np.linalg.norm(L) * np.linalg.norm(out) + np.linalg.norm(R) * np.linalg.norm(prev) \
        + np.sqrt(model.n_t) * np.linalg.norm(f)
    _check_residual(res, scale, model, mu)
    return ReducedState(out, SPACE)


def reconstruct(model, state):
    """Lift a reduced state back to an ``N_s x N_t`` trajectory."""
    Phi = model.basis.columns
    c = state.coeffs
    if state.regime != model.regime:
        raise ValueError("state regime does not match the model")
    if model.regime == SPACE:
        if c.shape != (model.K, model.n_t):
            raise ValueError(f"expected reduced state of shape {(model.K, model.n_t)}, got {c.shape}")
        return StateTrajectory(Phi @ c)
    if c.shape != (model.K,):
        raise ValueError(f"expected reduced state of length {model.K}, got {c.shape}")
    return StateTrajectory.from_stacked(Phi @ c, model.n_s)


def reconstruct_final(model, state):
    """Final-time field only, without lifting the whole trajectory."""
    c = state.coeffs
    return model.final_rows @ (c[:, -1] if model.regime == SPACE else c)
