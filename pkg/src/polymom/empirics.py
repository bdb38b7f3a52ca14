"""Sampling from model trees and empirical moment estimation."""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import BudgetExceeded, DomainError, InvalidArgument
from .polyfam import (
    Family,
    Leaf,
    Mixture,
    MomentVector,
    MVGaussian,
    Product,
    Reparam,
    enumerate_indices,
    model_moment,
    model_to_json,
)

CHUNK_ROWS = 1 << 16
MAX_ROWS = 50_000_000
DEFAULT_SAMPLE_HARD_CAP = 10**12


@dataclass(frozen=True, eq=False)
class Dataset:
    rows: np.ndarray
    source_seed: int | None = None
    model_hash: str | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise InvalidArgument(f"dataset needs at least one row of a fixed dimension, got shape {rows.shape}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def M(self) -> int:
        return self.rows.shape[0]

    @property
    def l(self) -> int:
        return self.rows.shape[1]

    def to_csv(self, path) -> None:
        np.savetxt(path, self.rows, fmt="%.17g", delimiter=",")

    @classmethod
    def from_csv(cls, path, source_seed=None) -> "Dataset":
        rows = np.loadtxt(Path(path), delimiter=",", ndmin=2)
        if rows.shape[0] > MAX_ROWS:
            raise BudgetExceeded(f"dataset has {rows.shape[0]} rows, cap is {MAX_ROWS}", rows.shape[0])
        return cls(rows, source_seed=source_seed)


def model_hash(model) -> str:
    return hashlib.sha256(model_to_json(model, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def _sample_leaf(leaf: Leaf, size: int, rng: np.random.Generator) -> np.ndarray:
    f, p = leaf.family, leaf.params
    if f is Family.GAUSSIAN:
        return rng.normal(p[0], math.sqrt(p[1]), size)
    if f is Family.UNIFORM:
        return rng.uniform(p[0], p[1], size)
    if f is Family.GAMMA:
        return rng.gamma(p[1], p[0], size)
    if f is Family.LAPLACE:
        return rng.laplace(p[0], p[1], size)
    if f is Family.EXPONENTIAL:
        return rng.exponential(p[0], size)
    if f is Family.CHI_SQUARE:
        return rng.chisquare(p[0], size)
    if f is Family.INVERSE_GAUSSIAN:
        # density sqrt(1/(2 pi lam x^3)) exp(-(x-mu)^2 / (2 lam mu^2 x)): shape parameter 1/lam
        return rng.wald(p[0], 1.0 / p[1], size)
    if f is Family.POISSON:
        return rng.poisson(p[0], size).astype(float)
    if f is Family.BINOMIAL:
        return rng.binomial(int(p[0]), p[1], size).astype(float)
    if f is Family.GEOMETRIC:
        # success probability 1/p, counting failures before the first success
        return (rng.geometric(1.0 / p[0], size) - 1).astype(float)
    if f is Family.NEGATIVE_BINOMIAL:
        return rng.negative_binomial(p[0], 1.0 / (1.0 + p[1]), size).astype(float)
    raise DomainError(f"no sampler for {f!r}")


def sample_model(model, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` i.i.d. draws from ``model`` as a (size, dim) array."""
    if isinstance(model, Leaf):
        return _sample_leaf(model, size, rng)[:, None]
    if isinstance(model, Reparam):
        return sample_model(model.effective, size, rng)
    if isinstance(model, MVGaussian):
        return rng.multivariate_normal(np.asarray(model.mean), np.asarray(model.cov), size, method="eigh")
    if isinstance(model, Mixture):
        labels = rng.choice(len(model.weights), size=size, p=np.asarray(model.weights))
        out = np.empty((size, model.dim))
        for c, child in enumerate(model.children):
            mask = labels == c
            count = int(mask.sum())
            if count:
                out[mask] = sample_model(child, count, rng)
        return out
    if isinstance(model, Product):
        return np.hstack([sample_model(c, size, rng) for c in model.children])
    raise DomainError(f"cannot sample from {type(model).__name__}")


def chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chunk),)))


def draw_samples(model, M: int, seed: int, workers: int = 1) -> Dataset:
    """Draw ``M`` samples in fixed-size chunks, each with its own derived stream.

    The chunking makes the dataset independent of ``workers``.
    """
    if M < 1:
        raise InvalidArgument(f"sample count must be positive, got {M}")
    if M > MAX_ROWS:
        raise BudgetExceeded(f"requested {M} rows, in-memory cap is {MAX_ROWS}", M)
    sizes = [min(CHUNK_ROWS, M - start) for start in range(0, M, CHUNK_ROWS)]

    def one(c):
        return sample_model(model, sizes[c], chunk_rng(seed, c))

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, range(len(sizes))))
    else:
        parts = [one(c) for c in range(len(sizes))]
    return Dataset(np.vstack(parts), source_seed=int(seed), model_hash=model_hash(model))


# ---------------------------------------------------------------------------
# empirical moments
# ---------------------------------------------------------------------------


def _monomials(rows: np.ndarray, indices) -> np.ndarray:
    """f_i(x) = prod_t x_t^{a_t} for every row and index, shape (rows, N)."""
    D = max(sum(i) for i in indices)
    powers = [np.ones_like(rows)]
    for _ in range(D):
        powers.append(powers[-1] * rows)
    cols = []
    for idx in indices:
        col = np.ones(rows.shape[0])
        for t, a in enumerate(idx):
            if a:
                col = col * powers[a][:, t]
        cols.append(col)
    return np.stack(cols, axis=1)


def empirical_moment_vector(data, N: int) -> MomentVector:
    """Sample averages of the first ``N`` monomials in canonical order."""
    rows = data.rows if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    if rows.size == 0 or rows.shape[0] == 0:
        raise InvalidArgument("empty dataset")
    indices = enumerate_indices(rows.shape[1], N)
    total = np.zeros(N)
    for start in range(0, rows.shape[0], CHUNK_ROWS):
        total += _monomials(rows[start : start + CHUNK_ROWS], indices).sum(axis=0)
    return MomentVector(tuple(indices), total / rows.shape[0])


# ---------------------------------------------------------------------------
# sample-size bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplePlan:
    N: int
    l: int
    B: float
    eps: float
    delta: float
    C: float = 1.0

    def __post_init__(self):
        if self.N < 1 or self.l < 1:
            raise InvalidArgument(f"need N >= 1 and l >= 1, got N={self.N}, l={self.l}")
        if not (self.eps > 0 and 0 < self.delta < 1 and self.B > 0 and self.C > 0):
            raise InvalidArgument(f"invalid sample plan {self}")


def _exact(x) -> Fraction:
    # shortest decimal repr, so 0.1 is read as 1/10 rather than its binary neighbour
    return Fraction(repr(float(x))) if not isinstance(x, int) else Fraction(x)


def sample_bound(plan: SamplePlan) -> Fraction:
    """C N B^(2 ceil(N/l)) / (eps^2 delta) as an exact rational."""
    expo = 2 * (-(-plan.N // plan.l))
    return _exact(plan.C) * plan.N * _exact(plan.B) ** expo / (_exact(plan.eps) ** 2 * _exact(plan.delta))


def required_samples(plan: SamplePlan, cap: int = DEFAULT_SAMPLE_HARD_CAP) -> int:
    """Smallest integer strictly above the moment-concentration bound, plus one.

    Returns ``ceil(bound) + 1``.  Raises :class:`BudgetExceeded` (carrying the
    value) when that exceeds ``cap``.
    """
    M = math.ceil(sample_bound(plan)) + 1
    if M > cap:
        raise BudgetExceeded(f"required sample size {M} exceeds cap {cap}", M)
    return M


@dataclass(frozen=True)
class Calibration:
    C: float
    variances: tuple[float, ...]
    scale: float


def calibrate_constant(N: int, l: int, B: float, model=None, data=None) -> Calibration:
    """Smallest C for which C B^(2 ceil(N/l)) dominates every Var f_i(X).

    With that C the Chebyshev-plus-union-bound argument behind
    :func:`required_samples` goes through.  Variances come from exact moments
    when ``model`` is given (Var f_a = M_{2a} - M_a^2), else from ``data``.
    """
    indices = enumerate_indices(l, N)
    if model is not None:
        var = [model_moment(model, tuple(2 * a for a in idx)) - model_moment(model, idx) ** 2 for idx in indices]
    elif data is not None:
        rows = data.rows if isinstance(data, Dataset) else np.asarray(data, dtype=float)
        var = np.var(_monomials(rows.reshape(rows.shape[0], -1), indices), axis=0).tolist()
    else:
        raise InvalidArgument("calibration needs a model or a dataset")
    scale = float(B) ** (2 * (-(-N // l)))
    return Calibration(C=max(var) / scale, variances=tuple(float(v) for v in var), scale=scale)


def concentration_frequency(model, plan: SamplePlan, trials: int, seed: int, workers: int = 1) -> tuple[int, int]:
    """How often all of the first N empirical moments land within eps.

    Each trial draws ``required_samples(plan)`` fresh samples.  Returns
    ``(successes, M)``.
    """
    M = required_samples(plan)
    exact = np.array([model_moment(model, i) for i in enumerate_indices(plan.l, plan.N)])
    seeds = np.random.SeedSequence(int(seed)).generate_state(trials, dtype=np.uint64)
    hits = 0
    for s in seeds:
        data = draw_samples(model, M, int(s), workers=workers)
        est = empirical_moment_vector(data, plan.N).values
        hits += bool(np.all(np.abs(est - exact) <= plan.eps))
    return hits, M
