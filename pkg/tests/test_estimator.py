import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polymom import gaussmix as gm
from polymom.errors import BudgetExceeded, InfeasibleBox, InvalidArgument
from polymom.estimator import (
    EstimationConfig,
    GridSearchEstimator,
    ModelSampler,
    OracleEstimator,
    ParamBox,
    ProjectedSampler,
    estimate,
    fix_parameters,
    gaussian_mixture_template,
    gm_model,
    grid_search,
    leaf_template,
    moment_distance_Q,
    write_trace_csv,
)
from polymom.polyfam import Leaf, MomentVector, moment_vector


def mv(values):
    return MomentVector(tuple((i + 1,) for i in range(len(values))), np.asarray(values, dtype=float))


# -- Q -------------------------------------------------------------------------------


def test_q_examples():
    m = mv([1.0, 2.0, 3.0])
    assert moment_distance_Q(m, m) == 0
    assert moment_distance_Q(mv([0, 1]), mv([1, 1])) == 1


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.integers(0, 2**32 - 1))
def test_q_symmetric_and_nonnegative(a, seed):
    b = np.random.default_rng(seed).normal(size=len(a))
    assert moment_distance_Q(mv(a), mv(b)) == moment_distance_Q(mv(b), mv(a)) >= 0


def test_q_length_mismatch():
    with pytest.raises(InvalidArgument):
        moment_distance_Q(mv([1]), mv([1, 2]))


# -- grid search ---------------------------------------------------------------------

UNIT_VAR = leaf_template("gaussian", {1: 1.0})


def test_on_grid_target_recovered():
    target = moment_vector(Leaf("gaussian", (0.5, 1)), 2)
    est = grid_search(target, UNIT_VAR, ParamBox((-1,), (1,)), EstimationConfig(N=2, grid_step=0.25))
    assert est.params == (0.5,)
    assert est.residual == 0.0


def test_tie_goes_to_smaller_coordinates():
    target = MomentVector(((1,),), np.array([0.125]))
    est = grid_search(target, UNIT_VAR, ParamBox((-1,), (1,)), EstimationConfig(N=1, grid_step=0.25))
    assert est.params == (0.0,)


def test_mixture_means_and_weight():
    theta = gm.GMParams([[-1.0], [1.0]], [[[1.0]], [[1.0]]], [0.5, 0.5])
    target = moment_vector(gm_model(theta), 5)
    tmpl = fix_parameters(gaussian_mixture_template(1, 2), {2: 1.0, 3: 1.0})
    box = ParamBox((-2, -2, 0.05), (2, 2, 0.95), tmpl.feasible)
    est = grid_search(target, tmpl, box, EstimationConfig(N=5, grid_step=0.125, refine_levels=3, keep_top=16))
    mu1, mu2, w = est.params
    found = gm.GMParams([[mu1], [mu2]], [[[1.0]], [[1.0]]], [w, 1 - w])
    assert gm.matched_distance(theta, found)[0] <= 0.125


@given(st.integers(-8, 8), st.integers(1, 12))
def test_zero_noise_lattice_point(mu_steps, var_steps):
    box = ParamBox((-2, 0.25), (2, 3.25))
    point = (mu_steps * 0.25, 0.25 * var_steps)
    target = moment_vector(Leaf("gaussian", point), 3)
    est = grid_search(target, leaf_template("gaussian"), box, EstimationConfig(N=3, grid_step=0.25))
    assert est.params == point
    assert est.residual <= 1e-18


def test_residual_recomputed_independently():
    target = moment_vector(Leaf("gamma", (1.3, 2.2)), 3)
    tmpl = leaf_template("gamma")
    est = grid_search(target, tmpl, ParamBox((0.5, 0.5), (3, 3)), EstimationConfig(N=3, grid_step=0.1))
    again = moment_vector(tmpl.build(np.array(est.params)), 3)
    assert est.residual == pytest.approx(moment_distance_Q(target, again), rel=1e-12, abs=1e-300)


def test_refinement_never_increases_residual():
    target = moment_vector(Leaf("laplace", (0.37, 0.81)), 4)
    tmpl = leaf_template("laplace")
    box = ParamBox((-1, 0.1), (1, 2))
    res = [grid_search(target, tmpl, box, EstimationConfig(N=4, grid_step=0.2, refine_levels=r)).residual for r in range(5)]
    assert all(b <= a for a, b in zip(res, res[1:]))
    assert res[-1] < res[0]


def test_parallel_equivalence():
    theta = gm.GMParams([[-1.0], [1.5]], [[[0.5]], [[1.2]]], [0.4, 0.6])
    target = moment_vector(gm_model(theta), 6)
    tmpl = gaussian_mixture_template(1, 2)
    box = ParamBox((-2, -2, 0.25, 0.25, 0.1), (2, 2, 2, 2, 0.9), tmpl.feasible)
    outs = [
        grid_search(target, tmpl, box, EstimationConfig(N=6, grid_step=0.5, refine_levels=2, keep_top=3, workers=w))
        for w in (1, 2, 8)
    ]
    assert outs[0].params == outs[1].params == outs[2].params
    assert outs[0].residual == outs[1].residual == outs[2].residual


def test_quadratic_upper_bound():
    """Q(a, b) <= C ||a - b||^2 with C fitted on one batch and checked on another."""
    tmpl = leaf_template("gaussian")
    rng = np.random.default_rng(0)
    lo, hi = np.array([-1.0, 0.5]), np.array([1.0, 2.0])
    idx = [(i,) for i in range(1, 5)]

    def ratios(count):
        a = rng.uniform(lo, hi, (count, 2))
        b = rng.uniform(lo, hi, (count, 2))
        q = np.sum((tmpl.moments(a, idx) - tmpl.moments(b, idx)) ** 2, axis=1)
        return q / np.sum((a - b) ** 2, axis=1)

    C = ratios(10_000).max()
    assert np.isfinite(C)
    assert np.all(ratios(10_000) <= 1.01 * C)


def test_infeasible_box():
    with pytest.raises(InfeasibleBox):
        grid_search(
            moment_vector(Leaf("gaussian", (0, 1)), 2),
            leaf_template("gaussian"),
            ParamBox((-1, -2), (1, -1)),
            EstimationConfig(N=2, grid_step=0.5),
        )


def test_grid_budget():
    with pytest.raises(BudgetExceeded):
        grid_search(
            moment_vector(Leaf("gaussian", (0, 1)), 2),
            leaf_template("gaussian"),
            ParamBox((-1, 0.1), (1, 2)),
            EstimationConfig(N=2, grid_step=0.001, max_grid_points=1000),
        )


def test_argument_checks():
    target = moment_vector(Leaf("gaussian", (0, 1)), 2)
    with pytest.raises(InvalidArgument):
        grid_search(target, leaf_template("gaussian"), ParamBox((-1,), (1,)), EstimationConfig(N=2))
    with pytest.raises(InvalidArgument):
        grid_search(target, leaf_template("gaussian"), ParamBox((-1, 0.1), (1, 2)), EstimationConfig(N=3))


def test_trace_csv(tmp_path):
    target = moment_vector(Leaf("gaussian", (0.5, 1)), 2)
    est = grid_search(target, UNIT_VAR, ParamBox((-1,), (1,)), EstimationConfig(N=2, grid_step=0.25), trace=True)
    write_trace_csv(est, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert len(rows) == 9
    assert min(float(r[1]) for r in rows) == 0.0


# -- sampling estimator -------------------------------------------------------------


def test_single_gaussian_from_samples():
    truth = np.array([0.5, 1.5])
    box = ParamBox((-2, 0.25), (2, 4))
    hits = 0
    for seed in range(20):
        cfg = EstimationConfig(eps=0.01, N=2, grid_step=0.25, refine_levels=4, keep_top=4, seed=seed, sample_cap=10**6)
        est = estimate(ModelSampler(Leaf("gaussian", tuple(truth))), leaf_template("gaussian"), box, cfg)
        assert est.samples_used == 10**6 and est.diagnostics["capped"]
        assert est.diagnostics["final_step"] == 2**-6
        hits += np.max(np.abs(np.array(est.params) - truth)) <= 0.05
    assert hits >= 18


def test_strict_cap():
    cfg = EstimationConfig(eps=0.01, N=2, grid_step=0.25, sample_cap=10, strict=True)
    with pytest.raises(BudgetExceeded):
        estimate(ModelSampler(Leaf("gaussian", (0, 1))), leaf_template("gaussian"), ParamBox((-1, 0.5), (1, 2)), cfg)


def test_oracle_exact():
    theta = gm.random_instance(np.random.default_rng(0), 4, 3)
    plane = gm.CoordinatePlane((1, 3))
    est = OracleEstimator(theta).estimate_mixture(ProjectedSampler(ModelSampler(gm_model(theta)), plane), 3, 0.1, 7)
    want = gm.to_template_vector(gm.project(theta, plane))
    assert np.array_equal(np.array(est.params), want)


def test_oracle_noise_bounded_and_seeded():
    theta = gm.random_instance(np.random.default_rng(1), 2, 2)
    sampler = ModelSampler(gm_model(theta))
    a = OracleEstimator(theta, eta=1e-3).estimate_mixture(sampler, 2, 0.1, 5)
    b = OracleEstimator(theta, eta=1e-3).estimate_mixture(sampler, 2, 0.1, 5)
    c = OracleEstimator(theta, eta=1e-3).estimate_mixture(sampler, 2, 0.1, 6)
    assert a.params == b.params != c.params
    assert np.max(np.abs(np.array(a.params) - gm.to_template_vector(theta))) <= 1e-3


def test_grid_estimator_anchor_shrinks_shared_slots():
    base = gm.GMParams([[0.3], [-0.2]], [[[1.0]], [[0.5]]], [0.4, 0.6])
    box = GridSearchEstimator().box(2, 2, anchor=(base, [0], 0.1))
    lo, hi = np.array(box.lower), np.array(box.upper)
    # mean slot of coordinate 0 in component 0, its variance, and the weight
    assert lo[0] == pytest.approx(0.2) and hi[0] == pytest.approx(0.4)
    assert lo[4] == pytest.approx(0.9) and hi[4] == pytest.approx(1.1)
    assert lo[-1] == pytest.approx(0.3) and hi[-1] == pytest.approx(0.5)
    # coordinate 1 slots untouched
    assert (lo[1], hi[1]) == (-3.0, 3.0)


# -- configs -------------------------------------------------------------------------


def test_config_roundtrip_and_unknown_fields():
    cfg = EstimationConfig(eps=0.2, N=4, grid_step=0.1, refine_levels=2)
    assert EstimationConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidArgument):
        EstimationConfig.from_dict({"eps": 0.1, "bogus": 1})


@pytest.mark.parametrize("kw", [dict(eps=0), dict(delta=1.5), dict(N=0), dict(grid_step=-1), dict(keep_top=0)])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        EstimationConfig(**kw)


def test_default_step_and_moment_count():
    cfg = EstimationConfig(eps=0.1, t=2)
    assert cfg.step == pytest.approx(0.01)
    assert cfg.moment_count(leaf_template("gaussian")) == 3


def test_box_validation_and_radius():
    with pytest.raises(InvalidArgument):
        ParamBox((0, 1), (1, 1))
    assert ParamBox((-3, 0), (1, 4)).B == pytest.approx(5.0)
