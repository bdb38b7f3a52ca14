"""Gaussian-mixture parameter algebra.

Parameters are handled in the flattened layout ``(mu_1, Sigma_1, w_1, ...,
mu_k, Sigma_k, w_k)`` with every covariance stored as all ``n*n`` row-major
entries, so Euclidean distance on the flat vector is the sum of squared
mean distances, squared Frobenius covariance distances and squared weight
differences.

Coordinate planes are 0-based index sets throughout.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BudgetExceeded, DomainError, InvalidArgument, UndefinedForSingleton


@dataclass(frozen=True, eq=False)
class GMParams:
    """k-component Gaussian mixture in n dimensions.

    ``means`` is (k, n), ``covs`` is (k, n, n), ``weights`` is (k,).
    """

    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        k, n = means.shape
        covs = np.asarray(self.covs, dtype=float).reshape(k, n, n)
        weights = np.asarray(self.weights, dtype=float).reshape(k)
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covs)) and np.all(np.isfinite(weights))):
            raise DomainError("non-finite mixture parameters")
        if np.max(np.abs(covs - covs.transpose(0, 2, 1)), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(covs))):
            raise DomainError("covariance is not symmetric")
        if np.min(np.linalg.eigvalsh(covs)) < -1e-10:
            raise DomainError("covariance is not positive semi-definite")
        if np.any(weights < 0) or abs(math.fsum(weights) - 1.0) > 1e-12:
            raise DomainError(f"weights must be non-negative and sum to 1, got {weights.tolist()}")
        for name, arr in (("means", means), ("covs", covs), ("weights", weights)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def n(self) -> int:
        return self.means.shape[1]

    @property
    def components(self):
        return [(self.means[i], self.covs[i], float(self.weights[i])) for i in range(self.k)]

    @classmethod
    def from_components(cls, components: Iterable) -> "GMParams":
        comps = list(components)
        return cls(
            np.array([np.atleast_1d(m) for m, _, _ in comps], dtype=float),
            np.array([np.atleast_2d(c) for _, c, _ in comps], dtype=float),
            np.array([w for _, _, w in comps], dtype=float),
        )

    def permuted(self, perm: Sequence[int]) -> "GMParams":
        perm = list(perm)
        return GMParams(self.means[perm], self.covs[perm], self.weights[perm])

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "covariances": self.covs.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GMParams":
        extra = set(doc) - {"means", "covariances", "weights"}
        if extra:
            raise InvalidArgument(f"unknown fields {sorted(extra)} in mixture parameters")
        try:
            means = np.atleast_2d(np.asarray(doc["means"], dtype=float))
            k, n = means.shape
            # each covariance may be nested rows or one flat row-major list
            covs = np.array([np.asarray(c, dtype=float).reshape(n, n) for c in doc["covariances"]])
            return cls(means, covs, np.asarray(doc["weights"], dtype=float))
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise InvalidArgument(f"malformed mixture parameters: {exc}") from None

    def __repr__(self):
        return f"GMParams(k={self.k}, n={self.n}, weights={self.weights.tolist()})"


@dataclass(frozen=True)
class CoordinatePlane:
    """Sorted set of 0-based coordinate indices."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise InvalidArgument(f"duplicate coordinates in plane {idx}")
        if any(i < 0 for i in idx):
            raise InvalidArgument(f"negative coordinate in plane {idx}")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    @property
    def d(self) -> int:
        return len(self.indices)

    def check(self, n: int) -> None:
        if any(i >= n for i in self.indices):
            raise InvalidArgument(f"plane {self.indices} out of range for dimension {n}")

    def union(self, *extra: int) -> "CoordinatePlane":
        return CoordinatePlane(tuple(set(self.indices) | set(extra)))

    def __iter__(self):
        return iter(self.indices)

    def __len__(self):
        return len(self.indices)


def full_plane(n: int) -> CoordinatePlane:
    return CoordinatePlane(tuple(range(n)))


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


def flatten(theta: GMParams) -> np.ndarray:
    k, n = theta.k, theta.n
    return np.concatenate(
        [np.concatenate([theta.means[i], theta.covs[i].ravel(), [theta.weights[i]]]) for i in range(k)]
    )


def unflatten(vec, n: int, k: int) -> GMParams:
    vec = np.asarray(vec, dtype=float)
    block = n + n * n + 1
    if vec.shape != (k * block,):
        raise InvalidArgument(f"expected flat vector of length {k * block}, got {vec.shape}")
    parts = vec.reshape(k, block)
    covs = parts[:, n : n + n * n].reshape(k, n, n)
    return GMParams(parts[:, :n], (covs + covs.transpose(0, 2, 1)) / 2, parts[:, -1])


def template_size(d: int, k: int) -> int:
    """Number of free parameters of a k-component mixture in d dimensions."""
    return k * d + k * d * (d + 1) // 2 + (k - 1)


def to_template_vector(theta: GMParams) -> np.ndarray:
    """Free-parameter layout used by the estimators.

    Means of all components, then the upper triangle of each covariance
    (row-major), then the first ``k - 1`` weights; the last weight is implied.
    """
    iu = np.triu_indices(theta.n)
    return np.concatenate(
        [theta.means.ravel(), np.concatenate([c[iu] for c in theta.covs]), theta.weights[:-1]]
    )


def split_template(vecs: np.ndarray, d: int, k: int):
    """Batched inverse of :func:`to_template_vector` without validation.

    Returns means (..., k, d), covs (..., k, d, d) and weights (..., k).
    """
    vecs = np.asarray(vecs, dtype=float)
    lead = vecs.shape[:-1]
    t = d * (d + 1) // 2
    means = vecs[..., : k * d].reshape(*lead, k, d)
    tri = vecs[..., k * d : k * d + k * t].reshape(*lead, k, t)
    iu = np.triu_indices(d)
    covs = np.zeros((*lead, k, d, d))
    covs[..., iu[0], iu[1]] = tri
    covs[..., iu[1], iu[0]] = tri
    head = vecs[..., k * d + k * t :]
    weights = np.concatenate([head, 1.0 - head.sum(axis=-1, keepdims=True)], axis=-1)
    return means, covs, weights


def from_template_vector(vec, d: int, k: int) -> GMParams:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (template_size(d, k),):
        raise InvalidArgument(f"expected template vector of length {template_size(d, k)}, got {vec.shape}")
    means, covs, weights = split_template(vec, d, k)
    return GMParams(means, covs, weights)


# ---------------------------------------------------------------------------
# radius, projection, distances
# ---------------------------------------------------------------------------


def _pair_sq(theta: GMParams, i: int, j: int) -> float:
    dm = theta.means[i] - theta.means[j]
    dc = theta.covs[i] - theta.covs[j]
    return float(dm @ dm + np.sum(dc * dc))


def radius(theta: GMParams) -> float:
    """Radius of identifiability of a Gaussian mixture.

    R^2 = min(1/4 min_{i != j} (|mu_i - mu_j|^2 + |Sigma_i - Sigma_j|_F^2), min_i w_i^2).
    With a single component the pair term is vacuous and R = w_1 = 1.
    """
    pair = min(
        (_pair_sq(theta, i, j) for i, j in itertools.combinations(range(theta.k), 2)),
        default=math.inf,
    )
    w2 = float(np.min(theta.weights) ** 2)
    return math.sqrt(min(pair / 4.0, w2))


def project(theta: GMParams, plane: CoordinatePlane) -> GMParams:
    plane.check(theta.n)
    idx = list(plane.indices)
    return GMParams(theta.means[:, idx], theta.covs[:, idx][:, :, idx], theta.weights)


def cost_matrix(theta: GMParams, other: GMParams) -> np.ndarray:
    """C[i, j] = squared triple distance between component i of theta and j of other."""
    dm = theta.means[:, None, :] - other.means[None, :, :]
    dc = theta.covs[:, None] - other.covs[None, :]
    dw = theta.weights[:, None] - other.weights[None, :]
    return np.sum(dm * dm, axis=-1) + np.sum(dc * dc, axis=(-2, -1)) + dw * dw


_EXHAUSTIVE_MAX_K = 8


def matched_distance(theta: GMParams, other: GMParams) -> tuple[float, tuple[int, ...]]:
    """Distance up to relabelling of components.

    Returns ``(sqrt(min_sigma sum_i C[i, sigma(i)]), sigma)`` where component
    ``i`` of ``theta`` is paired with component ``sigma[i]`` of ``other``.
    Ties go to the lexicographically smallest permutation.
    """
    if theta.k != other.k or theta.n != other.n:
        raise InvalidArgument(
            f"shape mismatch: (k={theta.k}, n={theta.n}) vs (k={other.k}, n={other.n})"
        )
    C = cost_matrix(theta, other)
    k = theta.k
    if k <= _EXHAUSTIVE_MAX_K:
        perms = np.array(list(itertools.permutations(range(k))), dtype=int)
        totals = C[np.arange(k), perms].sum(axis=1)
        best = int(np.argmin(totals))
        return math.sqrt(max(float(totals[best]), 0.0)), tuple(int(p) for p in perms[best])
    from scipy.optimize import linear_sum_assignment

    rows, cols = linear_sum_assignment(C)
    perm = tuple(int(c) for c in cols[np.argsort(rows)])
    return math.sqrt(max(float(C[np.arange(k), list(perm)].sum()), 0.0)), perm


def separation(theta: GMParams) -> float:
    """Smallest flattened distance between two component triples."""
    if theta.k < 2:
        raise UndefinedForSingleton("separation needs at least two components")
    C = cost_matrix(theta, theta)
    iu = np.triu_indices(theta.k, 1)
    return math.sqrt(float(np.min(C[iu])))


# ---------------------------------------------------------------------------
# coordinate plane search
# ---------------------------------------------------------------------------


def best_plane_bruteforce(theta: GMParams, d: int, budget: int = 1_000_000):
    """Plane of ``d`` coordinates maximising the projected radius, by enumeration."""
    n = theta.n
    if not 1 <= d <= n:
        raise InvalidArgument(f"need 1 <= d <= n, got d={d}, n={n}")
    count = math.comb(n, d)
    if count > budget:
        raise BudgetExceeded(f"C({n},{d}) = {count} planes exceeds budget {budget}", count)
    best_plane, best = None, -math.inf
    for combo in itertools.combinations(range(n), d):
        plane = CoordinatePlane(combo)
        r = radius(project(theta, plane))
        if r > best:
            best_plane, best = plane, r
    return best_plane, best


def greedy_separating_plane(items, mode: str = "means", l: int | None = None) -> CoordinatePlane:
    """Coordinates preserving pairwise separation of means or covariances.

    For every unordered pair the coordinate (means) or coordinate pair
    (covariances) carrying the largest entry-wise difference is added.  Each
    pair then keeps at least 1/sqrt(l) of its mean distance, or 1/l of its
    Frobenius covariance distance, after projection.
    """
    arr = np.asarray(items, dtype=float)
    if mode == "means":
        if arr.ndim != 2:
            raise InvalidArgument("means must be a (k, l) array")
    elif mode == "covariances":
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise InvalidArgument("covariances must be a (k, l, l) array")
    else:
        raise InvalidArgument(f"mode must be 'means' or 'covariances', got {mode!r}")
    if l is not None and arr.shape[1] != l:
        raise InvalidArgument(f"items have dimension {arr.shape[1]}, expected {l}")
    chosen: set[int] = set()
    for i, j in itertools.combinations(range(arr.shape[0]), 2):
        diff = np.abs(arr[i] - arr[j])
        if not np.any(diff > 0):
            continue
        flat = int(np.argmax(diff))
        if mode == "means":
            chosen.add(flat)
        else:
            chosen.update(np.unravel_index(flat, diff.shape))
    return CoordinatePlane(tuple(int(c) for c in chosen))


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------


def random_instance(
    rng: np.random.Generator,
    n: int,
    k: int,
    mean_scale: float = 1.0,
    cov_scale: float = 0.5,
    min_eig: float = 0.25,
    min_weight: float = 0.1,
) -> GMParams:
    """Random well-conditioned mixture for tests and benchmarks."""
    means = rng.normal(scale=mean_scale, size=(k, n))
    A = rng.normal(scale=cov_scale, size=(k, n, n))
    covs = A @ A.transpose(0, 2, 1) / n + min_eig * np.eye(n)
    raw = rng.dirichlet(np.ones(k)) * (1 - k * min_weight) + min_weight
    weights = raw / raw.sum()
    weights[-1] = 1.0 - weights[:-1].sum()
    return GMParams(means, covs, weights)
