"""Monte Carlo propagation: parameter sampling, ensemble solves and moments."""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .pde_fom import SolverError, fom_solve
from .rom import SPACE, reconstruct, reconstruct_final, rom_solve

# samples are drawn in fixed blocks keyed by (seed, block); the sequence
# therefore does not depend on how blocks are distributed over workers
SAMPLE_BLOCK = 1024


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float
    name: str = ""

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"Normal std must be positive, got {self.std}")

    def from_unit(self, q):
        return self.mean + self.std * ndtri(q)


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float
    name: str = ""

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"Uniform needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def mean(self):
        return 0.5 * (self.lo + self.hi)

    def from_unit(self, q):
        return self.lo + (self.hi - self.lo) * q


@dataclass(frozen=True)
class ParameterDistribution:
    """Independent marginals, one per parameter."""

    marginals: tuple

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if not self.marginals:
            raise ValueError("distribution needs at least one marginal")

    @property
    def dim(self):
        return len(self.marginals)

    @property
    def mean(self):
        return np.array([m.mean for m in self.marginals])

    def from_unit(self, q):
        q = np.atleast_2d(q)
        return np.column_stack([m.from_unit(q[:, i]) for i, m in enumerate(self.marginals)])


def distribution_1d():
    return ParameterDistribution((Normal(1.0, 0.15, "c"), Uniform(0.01, 0.02, "nu")))


def distribution_2d():
    return ParameterDistribution((Normal(0.5, 0.1, "b"), Uniform(0.003, 0.005, "sigma"),
                                  Uniform(0.9, 1.1, "nu")))


def _unit_block(seed, block, dim):
    rng = np.random.default_rng([int(seed), int(block)])
    q = rng.random((SAMPLE_BLOCK, dim))
    # keep the inverse normal CDF finite
    return np.clip(q, 1e-300, None)


def sample_parameters(dist, n, seed, start=0):
    """Samples ``start .. start+n-1`` of the stream identified by ``seed``; shape ``(n, dim)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    first, last = start // SAMPLE_BLOCK, (start + n - 1) // SAMPLE_BLOCK
    q = np.vstack([_unit_block(seed, b, dist.dim) for b in range(first, last + 1)])
    off = start - first * SAMPLE_BLOCK
    return dist.from_unit(q[off:off + n])


@dataclass(frozen=True)
class MomentEstimate:
    mean: np.ndarray
    variance: np.ndarray
    n_samples: int
    solve_seconds: float = 0.0

    def to_csv(self, path):
        idx = np.arange(self.mean.size)
        with open(path, "w") as fh:
            fh.write("dof_index,mean,variance\n")
            for i, m, v in zip(idx, self.mean, self.variance):
                fh.write(f"{i},{m:.17g},{v:.17g}\n")


def _chunk_stats(block):
    block = np.asarray(block, dtype=float)
    mean = block.mean(axis=0)
    m2 = ((block - mean) ** 2).sum(axis=0)
    return block.shape[0], mean, m2


def _merge(a, b):
    na, ma, sa = a
    nb, mb, sb = b
    n = na + nb
    delta = mb - ma
    return n, ma + delta * (nb / n), sa + sb + delta**2 * (na * nb / n)


def _tree_reduce(stats):
    stats = list(stats)
    while len(stats) > 1:
        nxt = [_merge(stats[i], stats[i + 1]) for i in range(0, len(stats) - 1, 2)]
        if len(stats) % 2:
            nxt.append(stats[-1])
        stats = nxt
    return stats[0]


def _finish(stats):
    n, mean, m2 = stats
    if n < 2:
        raise ValueError("variance needs at least 2 samples")
    return MomentEstimate(mean, m2 / (n - 1), int(n))


def sample_moments(ensemble):
    """Mean and unbiased componentwise variance of an ensemble of equal-shape vectors."""
    ens = np.asarray(ensemble, dtype=float)
    if ens.ndim == 1:
        ens = ens[:, None]
    if ens.shape[0] == 0:
        raise ValueError("ensemble is empty")
    chunks = [ens[i:i + SAMPLE_BLOCK] for i in range(0, ens.shape[0], SAMPLE_BLOCK)]
    return _finish(_tree_reduce(_chunk_stats(c) for c in chunks))


class FOMSolver:
    """Full-order solver handle."""

    method = "fom"

    def __init__(self, ivp):
        self.ivp = ivp

    def field(self, mu, which="final"):
        traj = fom_solve(self.ivp, mu)
        return traj.final if which == "final" else traj.stacked()


class ROMSolver:
    """Reduced solver handle; lifts only the requested field."""

    def __init__(self, model, method=None):
        self.model = model
        self.method = method or ("space-rom" if model.regime == SPACE else "st-rom")

    def field(self, mu, which="final"):
        state = rom_solve(self.model, mu)
        if which == "final":
            return reconstruct_final(self.model, state)
        return reconstruct(self.model, state).stacked()


def _run_chunk(solver, dist, seed, start, n, which):
    mus = sample_parameters(dist, n, seed, start)
    fields = []
    t0 = time.perf_counter()
    for i, mu in enumerate(mus):
        try:
            fields.append(solver.field(mu, which))
        except SolverError as exc:
            exc.sample = start + i
            raise
    elapsed = time.perf_counter() - t0
    return _chunk_stats(np.vstack(fields)), elapsed


_WORKER_SOLVER = None


def _init_worker(solver):
    global _WORKER_SOLVER
    _WORKER_SOLVER = solver


def _run_chunk_worker(args):
    return _run_chunk(_WORKER_SOLVER, *args)


def mc_propagate(solver, dist, n, seed, which="final", workers=1):
    """Sample, solve and reduce to moments.

    Aborts on the first failing sample. Moments are merged in a fixed tree
    over blocks, so results are bit-identical for any ``workers``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    tasks = [(dist, seed, s, min(SAMPLE_BLOCK, n - s), which) for s in range(0, n, SAMPLE_BLOCK)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(solver,)) as pool:
            results = list(pool.map(_run_chunk_worker, tasks))
    else:
        results = [_run_chunk(solver, *t) for t in tasks]
    m = _finish(_tree_reduce(r[0] for r in results))
    return MomentEstimate(m.mean, m.variance, m.n_samples, float(sum(r[1] for r in results)))
