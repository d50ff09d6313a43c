"""Snapshot collection and trial-subspace extraction (POD and random range finder)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .pde_fom import SolverError, fom_solve

SPATIAL = "spatial"
SPACETIME = "spacetime"


@dataclass(frozen=True)
class SnapshotMatrix:
    """Training solutions as columns.

    ``spatial``: ``N_s x (N_t * N_train)``, all steps of sample 1 then sample 2, ...
    ``spacetime``: ``(N_s * N_t) x N_train``, one stacked trajectory per column.
    """

    data: np.ndarray
    kind: str

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Basis:
    """Orthonormal trial basis ``Phi`` (columns)."""

    columns: np.ndarray
    singular_values: np.ndarray = None
    energy_captured: float | None = None

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim != 2 or cols.shape[1] < 1:
            raise ValueError("basis needs at least one column")
        sv = np.array([]) if self.singular_values is None else np.asarray(self.singular_values, dtype=float)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "singular_values", sv)

    @property
    def n_rows(self):
        return self.columns.shape[0]

    @property
    def K(self):
        return self.columns.shape[1]

    def project(self, u):
        return self.columns.T @ u

    def lift(self, u_hat):
        return self.columns @ u_hat

    def to_csv(self, path):
        # one row per basis vector, i.e. column-major over Phi
        np.savetxt(path, self.columns.T, delimiter=",", fmt="%.17g")

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))


def collect_snapshots(ivp, training_params, kind=SPATIAL):
    """Solve the FOM at each training parameter and arrange the results."""
    training_params = list(training_params)
    if not training_params:
        raise ValueError("training set is empty")
    if kind not in (SPATIAL, SPACETIME):
        raise ValueError(f"unknown snapshot kind {kind!r}")
    trajs = []
    for i, mu in enumerate(training_params):
        try:
            trajs.append(fom_solve(ivp, mu))
        except SolverError as exc:
            exc.sample = i
            raise
    return snapshots_from_trajectories(trajs, kind)


def snapshots_from_trajectories(trajs, kind):
    if kind == SPATIAL:
        data = np.hstack([t.states for t in trajs])
    else:
        data = np.column_stack([t.stacked() for t in trajs])
    return SnapshotMatrix(data, kind)


def select_K(singular_values, e_tol):
    """Smallest ``K`` whose leading singular values capture at least ``e_tol`` of the energy."""
    s = np.asarray(singular_values, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("singular values must be a non-empty 1-D sequence")
    if np.any(s < 0) or np.any(np.diff(s) > 0) or not np.any(s > 0):
        raise ValueError("singular values must be nonnegative, nonincreasing and not all zero")
    if not 0 < e_tol <= 1:
        raise ValueError(f"e_tol must lie in (0, 1], got {e_tol}")
    energy = np.cumsum(s**2) / np.sum(s**2)
    # round-off can leave the full sum a hair below 1
    k = int(np.searchsorted(energy, e_tol * (1 - 1e-14), side="left")) + 1
    return min(k, s.size)


def _fix_signs(cols):
    idx = np.argmax(np.abs(cols), axis=0)
    signs = np.sign(cols[idx, np.arange(cols.shape[1])])
    signs[signs == 0] = 1.0
    return cols * signs


def left_singular(U):
    """Left singular vectors and values of ``U`` at min-dimension cost.

    Wide matrices go through the eigendecomposition of ``U U^T``; tall ones
    through a thin QR followed by an SVD of the small triangular factor.
    """
    n_rows, n_cols = U.shape
    if n_rows <= n_cols:
        gram = U @ U.T
        lam, vecs = sla.eigh(gram)
        order = np.argsort(lam)[::-1]
        lam, vecs = lam[order], vecs[:, order]
        s = np.sqrt(np.clip(lam, 0.0, None))
        return vecs, s
    Q, R = sla.qr(U, mode="economic")
    W, s, _ = sla.svd(R)
    return Q @ W, s


def pod_basis(snapshots, e_tol):
    U = snapshots.data if isinstance(snapshots, SnapshotMatrix) else np.asarray(snapshots)
    if not np.any(U):
        raise ValueError("snapshot matrix is identically zero")
    try:
        L, s = left_singular(U)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ValueError(f"SVD failed: {exc}") from exc
    K = select_K(s, e_tol)
    energy = float(np.sum(s[:K] ** 2) / np.sum(s**2))
    return Basis(_fix_signs(L[:, :K]), s, energy)


def rrf_basis(snapshots, k_hat, seed=0):
    """Random range finder: SVD of the sketch ``U G`` with Gaussian ``G``."""
    U = snapshots.data if isinstance(snapshots, SnapshotMatrix) else np.asarray(snapshots)
    n_rows, n_cols = U.shape
    if not 1 <= k_hat <= min(n_rows, n_cols):
        raise ValueError(f"k_hat must lie in [1, {min(n_rows, n_cols)}], got {k_hat}")
    G = np.random.default_rng(seed).standard_normal((n_cols, k_hat))
    Y = U @ G
    L, _, _ = sla.svd(Y, full_matrices=False)
    return Basis(_fix_signs(L[:, :k_hat]))
