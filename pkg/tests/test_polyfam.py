import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polymom.errors import DomainError, InvalidArgument, RangeError
from polymom.polyfam import (
    Family,
    Leaf,
    Mixture,
    MVGaussian,
    Product,
    Reparam,
    batched_mvn_moments,
    enumerate_indices,
    gaussian_mv_moment,
    model_from_json,
    model_moment,
    model_to_json,
    moment_vector,
    parse_family,
    univariate_moment,
)

from oracles import CLOSED_FORMS, random_params, reference_moment, shifted_wick_moment, wick_moment, random_spd


# -- enumeration -------------------------------------------------------------


def test_enumerate_univariate():
    assert enumerate_indices(1, 3) == [(1,), (2,), (3,)]


def test_enumerate_graded_examples():
    assert enumerate_indices(2, 5) == [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    assert enumerate_indices(3, 3) == [(1, 0, 0), (0, 1, 0), (0, 0, 1)]


@pytest.mark.parametrize("l,N", [(0, 3), (2, 0), (-1, 1)])
def test_enumerate_rejects_empty(l, N):
    with pytest.raises(InvalidArgument):
        enumerate_indices(l, N)


@given(st.integers(1, 4), st.integers(1, 4))
def test_enumerate_is_bijection_on_degree_ball(l, D):
    count = math.comb(l + D, D) - 1
    idx = enumerate_indices(l, count)
    assert len(set(idx)) == count
    assert {i for i in idx} == {
        t for t in np.ndindex(*([D + 1] * l)) if 1 <= sum(t) <= D
    }
    degrees = [sum(i) for i in idx]
    assert degrees == sorted(degrees)
    for a, b in zip(idx, idx[1:]):
        if sum(a) == sum(b):
            assert a > b


# -- univariate moments ------------------------------------------------------


@pytest.mark.parametrize(
    "family,params,i,expected",
    [
        ("gaussian", (1, 1), 3, 4.0),
        ("exponential", (1,), 3, 6.0),
        ("uniform", (0, 1), 2, 1 / 3),
        ("poisson", (1,), 3, 5.0),
    ],
)
def test_table_examples(family, params, i, expected):
    assert univariate_moment(family, params, i) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("family", [f.value for f in Family])
def test_zeroth_moment_is_one(family):
    p = random_params(family, np.random.default_rng(1))
    assert univariate_moment(family, p, 0) == 1.0


@pytest.mark.parametrize("family", [f.value for f in Family])
def test_closed_forms_low_orders(family):
    rng = np.random.default_rng(list(CLOSED_FORMS).index(family))
    for _ in range(25):
        p = random_params(family, rng)
        for i, want in enumerate(CLOSED_FORMS[family](*p), start=1):
            assert univariate_moment(family, p, i) == pytest.approx(want, rel=1e-10)


@pytest.mark.parametrize("family", [f.value for f in Family])
def test_higher_orders_against_scipy(family):
    rng = np.random.default_rng(7)
    for _ in range(5):
        p = random_params(family, rng)
        for i in range(4, 8):
            assert univariate_moment(family, p, i) == pytest.approx(reference_moment(family, p, i), rel=1e-6)


def test_inverse_gaussian_cumulant_forms():
    from scipy import stats

    mu, lam = 1.3, 0.7
    d = stats.invgauss(mu * lam, scale=1 / lam)
    # second and third cumulants equal these simpler expressions
    assert d.var() == pytest.approx(lam * mu**3, rel=1e-9)
    assert d.stats(moments="s") * d.var() ** 1.5 == pytest.approx(3 * lam**2 * mu**5, rel=1e-9)
    assert univariate_moment("inverse_gaussian", (mu, lam), 2) == pytest.approx(mu**2 + lam * mu**3, rel=1e-14)


@pytest.mark.parametrize(
    "family,params",
    [
        ("gaussian", (0, 0)),
        ("gaussian", (0, -1)),
        ("uniform", (1, 1)),
        ("gamma", (1, 0)),
        ("binomial", (2.5, 0.5)),
        ("binomial", (3, 1.5)),
        ("geometric", (1.0,)),
        ("geometric", (0.5,)),
        ("poisson", (-1,)),
        ("negative_binomial", (1, -0.1)),
    ],
)
def test_invalid_parameters(family, params):
    with pytest.raises(DomainError):
        univariate_moment(family, params, 2)


@pytest.mark.parametrize("name", ["weibull", "cauchy"])
def test_non_polynomial_families_rejected(name):
    with pytest.raises(DomainError, match="polynomial"):
        parse_family(name)


def test_negative_order_rejected():
    with pytest.raises(InvalidArgument):
        univariate_moment("gaussian", (0, 1), -1)


def test_overflow_signals_range_error():
    with pytest.raises(RangeError):
        univariate_moment("exponential", (1e30,), 40)


# -- multivariate gaussian -----------------------------------------------------


def test_mv_examples():
    assert gaussian_mv_moment((0, 0), np.eye(2), (1, 1)) == 0.0
    assert gaussian_mv_moment((0, 0), [[1, 0.5], [0.5, 1]], (2, 2)) == pytest.approx(1.5, rel=1e-15)
    assert gaussian_mv_moment((1, 0), np.eye(2), (2, 0)) == pytest.approx(2.0, rel=1e-15)


def test_mv_reduces_to_univariate():
    for i in range(9):
        assert gaussian_mv_moment([0.7], [[1.9]], (i,)) == pytest.approx(
            univariate_moment("gaussian", (0.7, 1.9), i), rel=1e-13
        )


def test_mv_against_wick_and_expansion():
    rng = np.random.default_rng(3)
    for _ in range(5):
        cov = random_spd(rng, 3)
        mean = rng.normal(size=3)
        for idx in enumerate_indices(3, 34):  # degree <= 4
            assert gaussian_mv_moment(np.zeros(3), cov, idx) == pytest.approx(wick_moment(cov, idx), rel=1e-12, abs=1e-12)
            assert gaussian_mv_moment(mean, cov, idx) == pytest.approx(
                shifted_wick_moment(mean, cov, idx), rel=1e-10, abs=1e-10
            )


def test_batched_matches_scalar():
    rng = np.random.default_rng(4)
    means = rng.normal(size=(6, 2))
    covs = np.stack([random_spd(rng, 2) for _ in range(6)])
    idx = enumerate_indices(2, 14)
    got = batched_mvn_moments(means, covs, idx)
    for b in range(6):
        for j, a in enumerate(idx):
            assert got[b, j] == pytest.approx(gaussian_mv_moment(means[b], covs[b], a), rel=1e-13, abs=1e-13)


@pytest.mark.parametrize(
    "cov",
    [[[1, 0.3], [0.2, 1]], [[1, 2], [2, 1]]],
)
def test_mv_rejects_bad_covariance(cov):
    with pytest.raises(DomainError):
        gaussian_mv_moment((0, 0), cov, (1, 1))


def test_mv_dimension_mismatch():
    with pytest.raises(InvalidArgument):
        gaussian_mv_moment((0, 0), np.eye(2), (1, 1, 1))


# -- composite models --------------------------------------------------------

MIX = Mixture((0.5, 0.5), (Leaf("gaussian", (0, 1)), Leaf("gaussian", (2, 1))))


def test_model_examples():
    assert model_moment(MIX, (2,)) == pytest.approx(3.0)
    assert model_moment(Product((Leaf("gaussian", (0, 1)), Leaf("gaussian", (0, 1)))), (2, 2)) == 1.0
    assert model_moment(Reparam(2 * np.eye(2), Leaf("gaussian", (1, 1))), (1,)) == 2.0


def test_moment_vector_examples():
    assert moment_vector(Leaf("gaussian", (0, 1)), 4).tolist() == [0, 1, 0, 3]
    assert moment_vector(Leaf("exponential", (2,)), 2).tolist() == [2, 8]
    assert moment_vector(MIX, 3).tolist() == pytest.approx([1, 3, 7])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.01, 1), min_size=2, max_size=4),
    st.integers(0, 2**32 - 1),
    st.integers(1, 6),
)
def test_mixture_linearity(raw_w, seed, i):
    rng = np.random.default_rng(seed)
    w = np.array(raw_w) / sum(raw_w)
    w[-1] = 1 - w[:-1].sum()
    kids = tuple(Leaf("gamma", random_params("gamma", rng)) for _ in w)
    direct = sum(wj * model_moment(c, (i,)) for wj, c in zip(w, kids))
    assert model_moment(Mixture(tuple(w), kids), (i,)) == pytest.approx(direct, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_product_factorization(a, b, c, seed):
    rng = np.random.default_rng(seed)
    left = MVGaussian(tuple(rng.normal(size=2)), tuple(map(tuple, random_spd(rng, 2))))
    right = Leaf("poisson", random_params("poisson", rng))
    want = model_moment(left, (a, b)) * model_moment(right, (c,))
    assert model_moment(Product((left, right)), (a, b, c)) == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_mixture_validation():
    with pytest.raises(InvalidArgument):
        Mixture((0.5, 0.4), (Leaf("gaussian", (0, 1)), Leaf("gaussian", (1, 1))))
    with pytest.raises(InvalidArgument):
        Mixture((0.5, 0.5), (Leaf("gaussian", (0, 1)), MVGaussian((0, 0), ((1, 0), (0, 1)))))


def test_reparam_shape_checked():
    with pytest.raises(InvalidArgument):
        Reparam(np.eye(3), Leaf("gaussian", (0, 1)))


def test_model_dimension_mismatch():
    with pytest.raises(InvalidArgument):
        model_moment(MIX, (1, 1))


def test_json_roundtrip():
    model = Product(
        (
            Mixture((0.3, 0.7), (Leaf("laplace", (0, 1)), Reparam(np.eye(2), Leaf("uniform", (0, 2))))),
            MVGaussian((0.0, 1.0), ((2.0, 0.5), (0.5, 1.0))),
        )
    )
    back = model_from_json(model_to_json(model))
    assert back == model
    for idx in enumerate_indices(3, 9):
        assert model_moment(back, idx) == model_moment(model, idx)


def test_json_rejects_unknown_fields():
    with pytest.raises(InvalidArgument):
        model_from_json('{"kind": "gaussian", "params": [0, 1], "colour": "red"}')
