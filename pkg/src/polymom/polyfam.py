"""Raw moments of polynomial distribution families.

A model is a small immutable tree: univariate :class:`Leaf` families, a
multivariate Gaussian leaf, and the three closure operations under which
polynomial families stay polynomial (mixtures, independent products and a
linear change of parameters).  Every moment is evaluated from an exact
recurrence or closed form, never by numerical integration.

Moment functions accept numpy arrays in place of scalar parameters and then
broadcast, which is what the grid search relies on for speed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence, Union

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import DomainError, InvalidArgument, RangeError

__all__ = [
    "Family",
    "Leaf",
    "MVGaussian",
    "Mixture",
    "Product",
    "Reparam",
    "ModelSpec",
    "MomentVector",
    "enumerate_indices",
    "univariate_moment",
    "gaussian_mv_moment",
    "model_moment",
    "moment_vector",
    "model_to_dict",
    "model_from_dict",
    "model_to_json",
    "model_from_json",
]


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    GAMMA = "gamma"
    LAPLACE = "laplace"
    EXPONENTIAL = "exponential"
    CHI_SQUARE = "chi_square"
    INVERSE_GAUSSIAN = "inverse_gaussian"
    POISSON = "poisson"
    BINOMIAL = "binomial"
    GEOMETRIC = "geometric"
    NEGATIVE_BINOMIAL = "negative_binomial"


# Parameter order per family.  Gaussian is (mean, variance); Gamma is
# (scale, shape); Exponential is parameterised by its mean; Geometric uses
# p > 1 with pmf (1 - 1/p)^x / p on x = 0, 1, ...; NegativeBinomial uses
# m = p / (1 - p) so that its moments are polynomial.
PARAM_NAMES: dict[Family, tuple[str, ...]] = {
    Family.GAUSSIAN: ("mu", "var"),
    Family.UNIFORM: ("a", "b"),
    Family.GAMMA: ("beta", "m"),
    Family.LAPLACE: ("mu", "b"),
    Family.EXPONENTIAL: ("lam",),
    Family.CHI_SQUARE: ("k",),
    Family.INVERSE_GAUSSIAN: ("mu", "lam"),
    Family.POISSON: ("lam",),
    Family.BINOMIAL: ("n", "p"),
    Family.GEOMETRIC: ("p",),
    Family.NEGATIVE_BINOMIAL: ("r", "m"),
}


def _is_positive_integer(x):
    x = np.asarray(x, dtype=float)
    return (x >= 1) & (np.floor(x) == x)


_DOMAIN = {
    Family.GAUSSIAN: lambda mu, var: var > 0,
    Family.UNIFORM: lambda a, b: a < b,
    Family.GAMMA: lambda beta, m: (beta > 0) & (m > 0),
    Family.LAPLACE: lambda mu, b: b > 0,
    Family.EXPONENTIAL: lambda lam: lam > 0,
    Family.CHI_SQUARE: lambda k: k > 0,
    Family.INVERSE_GAUSSIAN: lambda mu, lam: (mu > 0) & (lam > 0),
    Family.POISSON: lambda lam: lam > 0,
    Family.BINOMIAL: lambda n, p: _is_positive_integer(n) & (p > 0) & (p < 1),
    Family.GEOMETRIC: lambda p: p > 1,
    Family.NEGATIVE_BINOMIAL: lambda r, m: (r > 0) & (m > 0),
}

# Families that come up naturally but have no polynomial moment map.
_NOT_POLYNOMIAL = {
    "weibull": "Weibull moments lambda^i Gamma(1 + i/k) are not polynomial in k",
    "cauchy": "Cauchy distribution has no moments",
}


def parse_family(kind) -> Family:
    if isinstance(kind, Family):
        return kind
    key = str(kind).lower()
    if key in _NOT_POLYNOMIAL:
        raise DomainError(f"{key} is not a polynomial family: {_NOT_POLYNOMIAL[key]}")
    try:
        return Family(key)
    except ValueError:
        raise DomainError(f"unsupported family {kind!r}") from None


def check_params(family: Family, params) -> None:
    names = PARAM_NAMES[family]
    if len(params) != len(names):
        raise InvalidArgument(
            f"{family.value} takes {len(names)} parameters {names}, got {len(params)}"
        )
    ok = np.all(_DOMAIN[family](*[np.asarray(p, dtype=float) for p in params]))
    if not ok:
        raise DomainError(f"parameters {tuple(params)} outside the domain of {family.value}")


# ---------------------------------------------------------------------------
# model tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    family: Family
    params: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "family", parse_family(self.family))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        check_params(self.family, self.params)

    @property
    def dim(self) -> int:
        return 1


@dataclass(frozen=True)
class MVGaussian:
    """Multivariate normal leaf with explicit mean vector and covariance."""

    mean: tuple[float, ...]
    cov: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        _check_cov(mean, cov)
        object.__setattr__(self, "mean", tuple(mean.tolist()))
        object.__setattr__(self, "cov", tuple(tuple(r) for r in cov.tolist()))

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class Mixture:
    weights: tuple[float, ...]
    children: tuple["ModelSpec", ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        children = tuple(self.children)
        if len(w) != len(children) or not children:
            raise InvalidArgument("mixture needs one weight per child and at least one child")
        if any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise InvalidArgument(f"mixture weights must be non-negative and sum to 1, got {w}")
        dims = {c.dim for c in children}
        if len(dims) != 1:
            raise InvalidArgument(f"mixture children have differing dimensions {sorted(dims)}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "children", children)

    @property
    def dim(self) -> int:
        return self.children[0].dim


@dataclass(frozen=True)
class Product:
    children: tuple["ModelSpec", ...]

    def __post_init__(self):
        children = tuple(self.children)
        if not children:
            raise InvalidArgument("product needs at least one child")
        object.__setattr__(self, "children", children)

    @property
    def dim(self) -> int:
        return sum(c.dim for c in self.children)


@dataclass(frozen=True)
class Reparam:
    """The family p_{A theta}: a leaf whose parameter vector is mapped through A.

    ``child`` holds theta; the distribution actually described is
    ``Leaf(child.family, A @ theta)``, which must lie in the family's domain.
    """

    matrix: tuple[tuple[float, ...], ...]
    child: Leaf

    def __post_init__(self):
        if not isinstance(self.child, Leaf):
            raise InvalidArgument("reparameterisation is defined for univariate leaves only")
        A = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        m = len(self.child.params)
        if A.shape != (m, m):
            raise InvalidArgument(f"reparam matrix must be {m}x{m}, got {A.shape}")
        object.__setattr__(self, "matrix", tuple(tuple(r) for r in A.tolist()))
        self.effective  # validates A @ theta

    @property
    def effective(self) -> Leaf:
        A = np.asarray(self.matrix)
        return Leaf(self.child.family, tuple(A @ np.asarray(self.child.params)))

    @property
    def dim(self) -> int:
        return 1


ModelSpec = Union[Leaf, MVGaussian, Mixture, Product, Reparam]


def _check_cov(mean, cov, sym_tol=1e-12, psd_tol=1e-10):
    l = mean.shape[-1]
    if cov.shape[-2:] != (l, l):
        raise InvalidArgument(f"covariance shape {cov.shape} does not match mean length {l}")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise DomainError("non-finite mean or covariance")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if np.max(np.abs(cov - np.swapaxes(cov, -1, -2))) > sym_tol * scale:
        raise DomainError("covariance is not symmetric")
    if np.min(np.linalg.eigvalsh(cov)) < -psd_tol * scale:
        raise DomainError("covariance is not positive semi-definite")


# ---------------------------------------------------------------------------
# indices and moment vectors
# ---------------------------------------------------------------------------


def _compositions(total: int, parts: int):
    """All exponent tuples of length ``parts`` summing to ``total``, lex-descending."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def enumerate_indices(l: int, N: int) -> list[tuple[int, ...]]:
    """First ``N`` multi-indices of dimension ``l`` in graded order.

    Indices are sorted by total degree, and lexicographically (largest
    leading exponent first) within a degree, so for ``l = 2`` the order is
    (1,0), (0,1), (2,0), (1,1), (0,2), ...
    """
    if l < 1 or N < 1:
        raise InvalidArgument(f"need l >= 1 and N >= 1, got l={l}, N={N}")
    out: list[tuple[int, ...]] = []
    degree = 1
    while len(out) < N:
        for idx in _compositions(degree, l):
            out.append(idx)
            if len(out) == N:
                break
        degree += 1
    return out


@dataclass(frozen=True, eq=False)
class MomentVector:
    indices: tuple[tuple[int, ...], ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape[-1] != len(self.indices):
            raise InvalidArgument("moment values and indices differ in length")
        object.__setattr__(self, "indices", tuple(tuple(i) for i in self.indices))
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.indices)

    def tolist(self) -> list[float]:
        return self.values.tolist()


# ---------------------------------------------------------------------------
# univariate moments
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _poisson_poly(i: int) -> tuple[float, ...]:
    # E X^i = lam E X^{i-1} + lam d/dlam E X^{i-1}
    c = np.array([1.0])
    for _ in range(i):
        c = P.polyadd(P.polymulx(c), P.polymulx(P.polyder(c)))
    return tuple(c)


@lru_cache(maxsize=None)
def _geometric_poly(i: int) -> tuple[float, ...]:
    # Negative binomial with r = 1 and m = p - 1, written directly in p:
    # E X^i = (p - 1) E X^{i-1} + p (p - 1) d/dp E X^{i-1}
    c = np.array([1.0])
    for _ in range(i):
        c = P.polyadd(P.polymul([-1.0, 1.0], c), P.polymul([0.0, -1.0, 1.0], P.polyder(c)))
    return tuple(c)


def _shift(c: np.ndarray, da: int, db: int) -> np.ndarray:
    out = np.zeros((c.shape[0] + da, c.shape[1] + db))
    out[da:, db:] = c
    return out


def _add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((max(a.shape[0], b.shape[0]), max(a.shape[1], b.shape[1])))
    out[: a.shape[0], : a.shape[1]] += a
    out[: b.shape[0], : b.shape[1]] += b
    return out


def _bivariate_recurrence(i: int, quadratic: bool) -> np.ndarray:
    """Coefficients c[a, b] of x^a y^b for the two-parameter derivative recurrences.

    Binomial (x=n, y=p):          E_i = x y E_{i-1} + (y - y^2) dE_{i-1}/dy
    Negative binomial (x=r, y=m): E_i = x y E_{i-1} + (y + y^2) dE_{i-1}/dy
    """
    sign = 1.0 if quadratic else -1.0
    c = np.ones((1, 1))
    for _ in range(i):
        dc = P.polyder(c, axis=1) if c.shape[1] > 1 else np.zeros((c.shape[0], 1))
        c = _add(_add(_shift(c, 1, 1), _shift(dc, 0, 1)), sign * _shift(dc, 0, 2))
    return c


@lru_cache(maxsize=None)
def _binomial_poly(i: int) -> np.ndarray:
    return _bivariate_recurrence(i, quadratic=False)


@lru_cache(maxsize=None)
def _negbin_poly(i: int) -> np.ndarray:
    return _bivariate_recurrence(i, quadratic=True)


def _raw_univariate(family: Family, params, i: int):
    if family is Family.GAUSSIAN:
        mu, var = params
        prev, cur = 1.0, mu
        for j in range(2, i + 1):
            prev, cur = cur, mu * cur + (j - 1) * var * prev
        return cur
    if family is Family.UNIFORM:
        a, b = params
        return sum(a**j * b ** (i - j) for j in range(i + 1)) / (i + 1)
    if family is Family.GAMMA:
        beta, m = params
        out = beta**i
        for j in range(i):
            out = out * (m + j)
        return out
    if family is Family.LAPLACE:
        mu, b = params
        return sum(
            math.factorial(i) / math.factorial(i - j) * b**j * mu ** (i - j)
            for j in range(0, i + 1, 2)
        )
    if family is Family.EXPONENTIAL:
        (lam,) = params
        return math.factorial(i) * lam**i
    if family is Family.CHI_SQUARE:
        (k,) = params
        out = 1.0
        for j in range(i):
            out = out * (k + 2 * j)
        return out
    if family is Family.INVERSE_GAUSSIAN:
        mu, lam = params
        prev, cur = 1.0, mu
        for j in range(2, i + 1):
            prev, cur = cur, (2 * j - 3) * lam * mu**2 * cur + mu**2 * prev
        return cur
    if family is Family.POISSON:
        return P.polyval(params[0], _poisson_poly(i))
    if family is Family.GEOMETRIC:
        return P.polyval(params[0], _geometric_poly(i))
    if family is Family.BINOMIAL:
        return P.polyval2d(params[0], params[1], _binomial_poly(i))
    if family is Family.NEGATIVE_BINOMIAL:
        return P.polyval2d(params[0], params[1], _negbin_poly(i))
    raise DomainError(f"unsupported family {family!r}")


def _finite(x, what):
    if not np.all(np.isfinite(x)):
        raise RangeError(f"{what} overflows float64")
    return x


def univariate_moment(family, params: Sequence, i: int, *, validate: bool = True):
    """Exact ``i``-th raw moment E[X^i] of a univariate polynomial family.

    ``params`` may hold numpy arrays, in which case the result broadcasts.
    """
    family = parse_family(family)
    if i < 0 or int(i) != i:
        raise InvalidArgument(f"moment order must be a non-negative integer, got {i}")
    params = tuple(params)
    if validate:
        check_params(family, params)
    if all(np.ndim(p) == 0 for p in params):
        params = tuple(float(p) for p in params)
        if i == 0:
            return 1.0
        try:
            value = _raw_univariate(family, params, int(i))
        except OverflowError:
            value = math.inf
        return float(_finite(value, f"{family.value} moment {i}"))
    params = tuple(np.asarray(p, dtype=float) for p in params)
    if i == 0:
        return np.ones(np.broadcast(*params).shape)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(_raw_univariate(family, params, int(i)), dtype=float)
    return _finite(np.broadcast_to(out, np.broadcast(*params).shape).copy(), f"{family.value} moment {i}")


# ---------------------------------------------------------------------------
# multivariate Gaussian
# ---------------------------------------------------------------------------


def _mvn_moment(mean, cov, idx: tuple[int, ...], memo: dict):
    """E[prod x_t^idx_t] for N(mean, cov); arrays may carry leading batch axes.

    Peeling one factor x_j off the monomial gives
    E[x_j x^b] = mean_j E[x^b] + sum_t cov_jt b_t E[x^(b - e_t)].
    """
    if idx in memo:
        return memo[idx]
    if not any(idx):
        out = 1.0
    else:
        j = next(t for t, a in enumerate(idx) if a)
        beta = list(idx)
        beta[j] -= 1
        beta = tuple(beta)
        out = mean[..., j] * _mvn_moment(mean, cov, beta, memo)
        for t, b in enumerate(beta):
            if b:
                lower = list(beta)
                lower[t] -= 1
                out = out + cov[..., j, t] * b * _mvn_moment(mean, cov, tuple(lower), memo)
    memo[idx] = out
    return out


def gaussian_mv_moment(mean, cov, idx: Sequence[int]) -> float:
    """Exact raw moment of a multivariate normal at multi-index ``idx``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    idx = tuple(int(a) for a in idx)
    if len(idx) != mean.shape[-1]:
        raise InvalidArgument(f"index length {len(idx)} != dimension {mean.shape[-1]}")
    if any(a < 0 for a in idx):
        raise InvalidArgument(f"negative exponent in {idx}")
    _check_cov(mean, cov)
    return float(_finite(_mvn_moment(mean, cov, idx, {}), f"gaussian moment {idx}"))


def batched_mvn_moments(mean: np.ndarray, cov: np.ndarray, indices) -> np.ndarray:
    """Moments for a batch: ``mean`` (..., l), ``cov`` (..., l, l) -> (..., N).

    No validation; callers are responsible for feeding valid covariances.
    """
    memo: dict = {}
    cols = [np.broadcast_to(_mvn_moment(mean, cov, tuple(i), memo), mean.shape[:-1]) for i in indices]
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# composite models
# ---------------------------------------------------------------------------


def _moment(model, idx: tuple[int, ...]) -> float:
    if isinstance(model, Leaf):
        return univariate_moment(model.family, model.params, idx[0], validate=False)
    if isinstance(model, Reparam):
        return _moment(model.effective, idx)
    if isinstance(model, MVGaussian):
        mean = np.asarray(model.mean)
        cov = np.asarray(model.cov)
        return float(_finite(_mvn_moment(mean, cov, idx, {}), f"gaussian moment {idx}"))
    if isinstance(model, Mixture):
        return math.fsum(w * _moment(c, idx) for w, c in zip(model.weights, model.children))
    if isinstance(model, Product):
        out, start = 1.0, 0
        for c in model.children:
            out *= _moment(c, idx[start : start + c.dim])
            start += c.dim
        return out
    raise InvalidArgument(f"not a model node: {type(model).__name__}")


def model_moment(model: ModelSpec, idx: Sequence[int]) -> float:
    idx = tuple(int(a) for a in idx)
    if len(idx) != model.dim:
        raise InvalidArgument(f"index length {len(idx)} != model dimension {model.dim}")
    if any(a < 0 for a in idx):
        raise InvalidArgument(f"negative exponent in {idx}")
    return _moment(model, idx)


def moment_vector(model: ModelSpec, N: int) -> MomentVector:
    indices = enumerate_indices(model.dim, N)
    return MomentVector(tuple(indices), np.array([_moment(model, i) for i in indices]))


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def model_to_dict(model: ModelSpec) -> dict:
    if isinstance(model, Leaf):
        return {"kind": model.family.value, "params": list(model.params)}
    if isinstance(model, MVGaussian):
        return {"kind": "mv_gaussian", "params": {"mean": list(model.mean), "cov": [list(r) for r in model.cov]}}
    if isinstance(model, Mixture):
        return {"kind": "mixture", "weights": list(model.weights), "children": [model_to_dict(c) for c in model.children]}
    if isinstance(model, Product):
        return {"kind": "product", "children": [model_to_dict(c) for c in model.children]}
    if isinstance(model, Reparam):
        return {"kind": "reparam", "matrix": [list(r) for r in model.matrix], "children": [model_to_dict(model.child)]}
    raise InvalidArgument(f"not a model node: {type(model).__name__}")


_NODE_FIELDS = {
    "mixture": {"kind", "weights", "children"},
    "product": {"kind", "children"},
    "reparam": {"kind", "matrix", "children"},
    "mv_gaussian": {"kind", "params"},
}


def model_from_dict(doc: dict) -> ModelSpec:
    if not isinstance(doc, dict) or "kind" not in doc:
        raise InvalidArgument(f"model node must be an object with a 'kind' field: {doc!r}")
    kind = str(doc["kind"]).lower()
    allowed = _NODE_FIELDS.get(kind, {"kind", "params"})
    extra = set(doc) - allowed
    if extra:
        raise InvalidArgument(f"unknown fields {sorted(extra)} in {kind} node")
    try:
        if kind == "mixture":
            return Mixture(tuple(doc["weights"]), tuple(model_from_dict(c) for c in doc["children"]))
        if kind == "product":
            return Product(tuple(model_from_dict(c) for c in doc["children"]))
        if kind == "reparam":
            (child,) = doc["children"]
            return Reparam(tuple(map(tuple, doc["matrix"])), model_from_dict(child))
        if kind == "mv_gaussian":
            return MVGaussian(tuple(doc["params"]["mean"]), tuple(map(tuple, doc["params"]["cov"])))
        return Leaf(parse_family(kind), tuple(doc["params"]))
    except (KeyError, TypeError) as exc:
        raise InvalidArgument(f"malformed {kind} node: {exc}") from None


def model_to_json(model: ModelSpec, **kw) -> str:
    return json.dumps(model_to_dict(model), **kw)


def model_from_json(text: str) -> ModelSpec:
    return model_from_dict(json.loads(text))
