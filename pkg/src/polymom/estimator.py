"""Grid-search method-of-moments estimation.

The estimator matches a target moment vector against the moment map of a
parameterised model over a rectangular lattice, scoring each lattice point
by the squared moment distance Q.  Candidates are totally ordered by
``(Q, coordinate tuple)`` so the winner does not depend on how the lattice
is split between workers.

Two low-dimensional Gaussian-mixture estimators share one entry point,
``estimate_mixture(sampler, k, precision, seed)``, which the reducer calls
on coordinate-projected samplers:

* :class:`GridSearchEstimator` draws samples and runs :func:`estimate`;
* :class:`OracleEstimator` returns the true projected parameters plus
  bounded uniform noise, for exercising the reduction in isolation.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Protocol

import numpy as np

from . import gaussmix as gm
from .empirics import SamplePlan, draw_samples, empirical_moment_vector, required_samples
from .errors import BudgetExceeded, DomainError, InfeasibleBox, InvalidArgument, RangeError
from .polyfam import (
    _DOMAIN,
    PARAM_NAMES,
    Leaf,
    Mixture,
    MomentVector,
    MVGaussian,
    _raw_univariate,
    batched_mvn_moments,
    enumerate_indices,
    model_moment,
    parse_family,
)


def moment_distance_Q(a, b) -> float:
    """Sum of squared differences between two moment vectors."""
    va = a.values if isinstance(a, MomentVector) else np.asarray(a, dtype=float)
    vb = b.values if isinstance(b, MomentVector) else np.asarray(b, dtype=float)
    if va.shape != vb.shape:
        raise InvalidArgument(f"moment vectors differ in length: {va.shape} vs {vb.shape}")
    return math.fsum(float(x) for x in (va - vb) ** 2)


def _batch_q(target: np.ndarray, moments: np.ndarray) -> np.ndarray:
    # column-by-column accumulation keeps each row's value independent of batch size
    q = np.zeros(moments.shape[0])
    for j in range(target.shape[0]):
        diff = moments[:, j] - target[j]
        q = q + diff * diff
    return q


# ---------------------------------------------------------------------------
# parameter boxes, configs, results
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParamBox:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    feasible: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lower)
        hi = tuple(float(x) for x in self.upper)
        if len(lo) != len(hi) or not lo:
            raise InvalidArgument("box bounds must be non-empty and of equal length")
        if any(not a < b for a, b in zip(lo, hi)):
            raise InvalidArgument(f"box needs lower < upper in every coordinate, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def m(self) -> int:
        return len(self.lower)

    @property
    def B(self) -> float:
        """Radius of the origin-centred ball enclosing the box."""
        return math.sqrt(sum(max(abs(a), abs(b)) ** 2 for a, b in zip(self.lower, self.upper)))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}


@dataclass
class EstimationConfig:
    eps: float = 0.1
    delta: float = 0.1
    N: Optional[int] = None
    grid_step: Optional[float] = None
    t: float = 1.0
    refine_levels: int = 0
    keep_top: int = 16
    seed: int = 0
    sample_cap: int = 1_000_000
    strict: bool = False
    C: float = 1.0
    workers: int = 1
    max_grid_points: int = 50_000_000

    def __post_init__(self):
        if not self.eps > 0 or not 0 < self.delta < 1:
            raise InvalidArgument(f"need eps > 0 and 0 < delta < 1, got eps={self.eps}, delta={self.delta}")
        if self.N is not None and self.N < 1:
            raise InvalidArgument(f"moment count must be positive, got {self.N}")
        if self.grid_step is not None and not self.grid_step > 0:
            raise InvalidArgument(f"grid_step must be positive, got {self.grid_step}")
        if self.refine_levels < 0 or self.keep_top < 1 or self.workers < 1:
            raise InvalidArgument("refine_levels >= 0, keep_top >= 1 and workers >= 1 required")

    @property
    def step(self) -> float:
        return self.grid_step if self.grid_step is not None else self.eps**self.t

    def moment_count(self, template: "Template") -> int:
        return self.N if self.N is not None else template.m + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EstimationConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise InvalidArgument(f"unknown estimation config fields {sorted(extra)}")
        return cls(**doc)


@dataclass(eq=False)
class Estimate:
    params: tuple[float, ...]
    residual: float
    moments_used: Optional[MomentVector] = None
    samples_used: int = 0
    diagnostics: dict = field(default_factory=dict)
    trace: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "params": list(self.params),
            "residual": self.residual,
            "moments_used": None if self.moments_used is None else self.moments_used.tolist(),
            "samples_used": self.samples_used,
            "diagnostics": self.diagnostics,
        }


def write_trace_csv(estimate: Estimate, path) -> None:
    """Dump every evaluated lattice point as ``coords..., Q`` rows."""
    if estimate.trace is None:
        raise InvalidArgument("estimate carries no grid trace; run grid_search with trace=True")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in estimate.trace:
            w.writerow([repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Template:
    """A model family parameterised by a free vector of length ``m``.

    ``batch_moments(points, indices)`` maps (P, m) points to (P, N) moments;
    when absent, moments are computed one point at a time from ``build``.
    ``feasible(points)`` flags points inside the parameter domain.
    """

    name: str
    m: int
    dim: int
    build: Callable[[np.ndarray], object]
    batch_moments: Optional[Callable] = None
    feasible: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def moments(self, points: np.ndarray, indices) -> np.ndarray:
        points = np.atleast_2d(points)
        ok = np.ones(points.shape[0], dtype=bool) if self.feasible is None else np.asarray(self.feasible(points))
        out = np.full((points.shape[0], len(indices)), np.nan)
        if not ok.any():
            return out
        if self.batch_moments is not None:
            with np.errstate(all="ignore"):
                out[ok] = self.batch_moments(points[ok], indices)
            return out
        for r in np.flatnonzero(ok):
            try:
                model = self.build(points[r])
                out[r] = [model_moment(model, i) for i in indices]
            except (DomainError, InvalidArgument, RangeError):
                pass
        return out


def leaf_template(family, fixed: Optional[dict] = None) -> Template:
    """Univariate family with some parameters optionally held fixed."""
    family = parse_family(family)
    names = PARAM_NAMES[family]
    fixed = {int(k): float(v) for k, v in (fixed or {}).items()}
    free = [i for i in range(len(names)) if i not in fixed]

    def full(points):
        points = np.atleast_2d(points)
        cols, it = [], iter(range(points.shape[1]))
        for i in range(len(names)):
            cols.append(np.full(points.shape[0], fixed[i]) if i in fixed else points[:, next(it)])
        return cols

    def batch(points, indices):
        cols = full(points)
        return np.stack([_raw_univariate(family, cols, idx[0]) * np.ones(points.shape[0]) for idx in indices], axis=1)

    def feasible(points):
        return np.asarray(_DOMAIN[family](*full(points)), dtype=bool)

    def build(point):
        return Leaf(family, tuple(c[0] for c in full(np.asarray(point, dtype=float)[None, :])))

    label = family.value + ("" if not fixed else f"[fixed={fixed}]")
    return Template(label, len(free), 1, build, batch, feasible)


def gaussian_mixture_template(d: int, k: int) -> Template:
    """k-component Gaussian mixture in d dimensions over the template layout of
    :func:`gaussmix.to_template_vector`."""

    def batch(points, indices):
        means, covs, weights = gm.split_template(points, d, k)
        per = np.stack([batched_mvn_moments(means[:, c], covs[:, c], indices) for c in range(k)], axis=1)
        out = weights[:, 0, None] * per[:, 0]
        for c in range(1, k):
            out = out + weights[:, c, None] * per[:, c]
        return out

    def feasible(points):
        _, covs, weights = gm.split_template(points, d, k)
        ok = np.all(weights >= 0, axis=-1)
        if d == 1:
            ok &= np.all(covs[..., 0, 0] > 0, axis=-1)
        else:
            ok &= np.all(np.linalg.eigvalsh(covs)[..., 0] > 0, axis=-1)
        return ok

    def build(point):
        theta = gm.from_template_vector(point, d, k)
        return gm_model(theta)

    return Template(f"gaussian_mixture(d={d},k={k})", gm.template_size(d, k), d, build, batch, feasible)


def gm_model(theta: gm.GMParams):
    """ModelSpec tree for a Gaussian mixture."""
    children = []
    for mean, cov, _ in theta.components:
        if theta.n == 1:
            children.append(Leaf("gaussian", (mean[0], cov[0, 0])))
        else:
            children.append(MVGaussian(tuple(mean), tuple(map(tuple, cov))))
    w = theta.weights.tolist()
    w[-1] = 1.0 - math.fsum(w[:-1])
    return Mixture(tuple(w), tuple(children))


def fix_parameters(template: Template, fixed: dict) -> Template:
    """Hold some template coordinates at constant values."""
    fixed = {int(k): float(v) for k, v in fixed.items()}
    free = [i for i in range(template.m) if i not in fixed]

    def expand(points):
        points = np.atleast_2d(points)
        out = np.empty((points.shape[0], template.m))
        for i, v in fixed.items():
            out[:, i] = v
        out[:, free] = points
        return out

    batch = None
    if template.batch_moments is not None:
        batch = lambda pts, idx: template.batch_moments(expand(pts), idx)  # noqa: E731
    feasible = None
    if template.feasible is not None:
        feasible = lambda pts: template.feasible(expand(pts))  # noqa: E731
    return Template(
        f"{template.name}[fixed={fixed}]",
        len(free),
        template.dim,
        lambda p: template.build(expand(p)[0]),
        batch,
        feasible,
    )


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

_CHUNK_POINTS = 1 << 15


def _axes(lower, upper, step):
    axes = []
    for lo, hi in zip(lower, upper):
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        axes.append(lo + step * np.arange(count))
    return axes


def _ranked(q: np.ndarray, pts: np.ndarray, keep: int):
    """Indices of the ``keep`` best finite rows under (Q, coordinates)."""
    good = np.flatnonzero(np.isfinite(q))
    if good.size == 0:
        return good
    keys = [pts[good, c] for c in range(pts.shape[1] - 1, -1, -1)] + [q[good]]
    order = np.lexsort(keys)
    return good[order[:keep]]


def _scan(target, indices, template, box, lower, upper, step, keep, workers, max_points, record):
    """Evaluate one lattice; return its best candidates and bookkeeping."""
    axes = _axes(lower, upper, step)
    shape = tuple(len(a) for a in axes)
    total = math.prod(shape)
    if total > max_points:
        raise BudgetExceeded(f"lattice has {total} points, budget {max_points}", total)
    starts = list(range(0, total, _CHUNK_POINTS))

    def chunk(start):
        flat = np.arange(start, min(start + _CHUNK_POINTS, total))
        sub = np.unravel_index(flat, shape)
        pts = np.stack([axes[c][sub[c]] for c in range(len(axes))], axis=1)
        q = np.full(pts.shape[0], np.inf)
        ok = np.ones(pts.shape[0], dtype=bool) if box.feasible is None else np.asarray(box.feasible(pts), dtype=bool)
        if ok.any():
            mom = template.moments(pts[ok], indices)
            with np.errstate(all="ignore"):
                q[ok] = _batch_q(target, mom)
        q[~np.isfinite(q)] = np.inf
        best = _ranked(np.where(np.isinf(q), np.nan, q), pts, keep)
        kept = (pts[best], q[best], int(np.isfinite(q).sum()))
        if record:
            kept = kept + (np.column_stack([pts, q]),)
        return kept

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    pts = np.vstack([p[0] for p in parts])
    q = np.concatenate([p[1] for p in parts])
    feasible = sum(p[2] for p in parts)
    trace = np.vstack([p[3] for p in parts]) if record else None
    return pts, q, total, feasible, trace


def _merge(pts, q, keep):
    """Best ``keep`` distinct points under (Q, coordinates)."""
    if pts.shape[0] == 0:
        return pts, q
    pts, first = np.unique(pts, axis=0, return_index=True)
    q = q[first]
    best = _ranked(q, pts, keep)
    return pts[best], q[best]


def grid_search(
    target: MomentVector,
    template: Template,
    box: ParamBox,
    cfg: EstimationConfig,
    trace: bool = False,
) -> Estimate:
    """Minimise Q(target, moments(theta)) over an axis-aligned lattice.

    The lattice is anchored at ``box.lower`` with spacing ``cfg.step``.  Each
    refinement level re-grids ``[c - h, c + h]`` (clipped to the box) around
    the ``cfg.keep_top`` best points seen so far with half the previous step
    ``h``, and the best point over all levels is returned.
    """
    if box.m != template.m:
        raise InvalidArgument(f"box has {box.m} coordinates, template {template.name} needs {template.m}")
    if len(target) != cfg.moment_count(template):
        raise InvalidArgument(f"target has {len(target)} moments, config asks for {cfg.moment_count(template)}")
    if len(target.indices[0]) != template.dim:
        raise InvalidArgument(f"target moments are {len(target.indices[0])}-dimensional, template is {template.dim}")
    tvals = target.values
    keep = cfg.keep_top if cfg.refine_levels > 0 else 1
    step = cfg.step
    pts, q, total, feasible, tr = _scan(
        tvals, target.indices, template, box, box.lower, box.upper, step, keep, cfg.workers, cfg.max_grid_points, trace
    )
    best_pts, best_q = _merge(pts, q, keep)
    if best_pts.shape[0] == 0:
        raise InfeasibleBox(f"no feasible lattice point in box {box.to_dict()} at step {step}")
    traces = [tr] if trace else []
    log = [{"level": 0, "step": step, "points": total, "feasible": feasible, "best_q": float(best_q[0])}]
    evaluated, feasible_total = total, feasible
    lo_box, hi_box = np.asarray(box.lower), np.asarray(box.upper)
    for level in range(1, cfg.refine_levels + 1):
        half = step
        step = step / 2
        found_pts, found_q = [best_pts], [best_q]
        points_here = feasible_here = 0
        for centre in best_pts:
            lo = np.maximum(centre - half, lo_box)
            hi = np.minimum(centre + half, hi_box)
            # a coordinate pinned to a box face still needs lower < upper for the lattice
            hi = np.where(hi > lo, hi, lo + step / 2)
            p, qq, t, f, tr = _scan(tvals, target.indices, template, box, lo, hi, step, keep, cfg.workers, cfg.max_grid_points, trace)
            found_pts.append(p)
            found_q.append(qq)
            points_here += t
            feasible_here += f
            if trace:
                traces.append(tr)
        best_pts, best_q = _merge(np.vstack(found_pts), np.concatenate(found_q), keep)
        evaluated += points_here
        feasible_total += feasible_here
        log.append({"level": level, "step": step, "points": points_here, "feasible": feasible_here, "best_q": float(best_q[0])})
    winner = best_pts[0]
    return Estimate(
        params=tuple(float(x) for x in winner),
        residual=float(best_q[0]),
        moments_used=target,
        diagnostics={
            "template": template.name,
            "points_evaluated": evaluated,
            "points_feasible": feasible_total,
            "final_step": step,
            "refinement": log,
        },
        trace=np.vstack(traces) if trace else None,
    )


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


class Sampler(Protocol):
    dim: int

    def sample(self, M: int, seed: int) -> np.ndarray: ...


class ModelSampler:
    """Fresh i.i.d. draws from a model tree."""

    def __init__(self, model, workers: int = 1):
        self.model = model
        self.dim = model.dim
        self.workers = workers

    def sample(self, M, seed):
        return draw_samples(self.model, M, seed, workers=self.workers).rows


class DataSampler:
    """Serves rows of a fixed dataset; asking for more rows than exist returns all of them."""

    def __init__(self, rows):
        rows = np.asarray(getattr(rows, "rows", rows), dtype=float)
        self.rows = rows if rows.ndim == 2 else rows[:, None]
        self.dim = self.rows.shape[1]

    def sample(self, M, seed):
        return self.rows[: min(M, self.rows.shape[0])]


class ProjectedSampler:
    """Coordinate restriction of another sampler's rows."""

    def __init__(self, base, plane: gm.CoordinatePlane):
        plane.check(base.dim)
        self.base = base
        self.plane = plane
        self.dim = plane.d

    def sample(self, M, seed):
        return self.base.sample(M, seed)[:, list(self.plane.indices)]


def estimate(sampler, template: Template, box: ParamBox, cfg: EstimationConfig) -> Estimate:
    """Sample, take empirical moments, grid-search.

    The sample size is the moment-concentration bound for the config,
    capped at ``cfg.sample_cap`` unless ``cfg.strict`` forbids capping.
    """
    N = cfg.moment_count(template)
    plan = SamplePlan(N=N, l=sampler.dim, B=box.B, eps=cfg.eps, delta=cfg.delta, C=cfg.C)
    try:
        needed = required_samples(plan)
    except BudgetExceeded as exc:
        if cfg.strict:
            raise
        needed = exc.value
    if needed > cfg.sample_cap:
        if cfg.strict:
            raise BudgetExceeded(f"need {needed} samples, cap is {cfg.sample_cap}", needed)
        M = cfg.sample_cap
    else:
        M = needed
    rows = sampler.sample(M, cfg.seed)
    target = empirical_moment_vector(rows, N)
    est = grid_search(target, template, box, cfg)
    est.samples_used = int(rows.shape[0])
    est.diagnostics["required_samples"] = int(needed)
    est.diagnostics["capped"] = bool(needed > M)
    return est


# ---------------------------------------------------------------------------
# low-dimensional mixture estimators
# ---------------------------------------------------------------------------


def _task_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(x) for x in key]))


class LowDimEstimator(Protocol):
    def estimate_mixture(self, sampler, k: int, precision: float, seed: int, anchor=None) -> Estimate: ...


@dataclass
class OracleEstimator:
    """Test double: true projected parameters plus bounded per-slot noise.

    Every free template slot (mean entries, upper-triangular covariance
    entries, the first k-1 weights) is perturbed by an independent
    Uniform(-eta, eta) draw keyed on (seed, task seed), so results are
    reproducible and independent of scheduling.
    """

    theta: gm.GMParams
    eta: float = 0.0
    seed: int = 0

    def estimate_mixture(self, sampler, k, precision, seed, anchor=None):
        plane = getattr(sampler, "plane", gm.full_plane(self.theta.n))
        truth = gm.project(self.theta, plane)
        if truth.k != k:
            raise InvalidArgument(f"oracle holds {truth.k} components, asked for {k}")
        vec = gm.to_template_vector(truth)
        if self.eta > 0:
            vec = vec + _task_rng(self.seed, seed).uniform(-self.eta, self.eta, vec.shape)
        return Estimate(
            params=tuple(float(x) for x in vec),
            residual=0.0,
            diagnostics={"estimator": "oracle", "eta": self.eta, "plane": list(plane.indices)},
        )


@dataclass
class GridSearchEstimator:
    """Sample-based grid search over Gaussian-mixture parameters of the sampler's dimension.

    ``grid_step`` overrides the precision-derived step ``precision**t``;
    for small problems a coarse step plus refinement levels is the
    practical setting.  With ``anchor`` (base estimate, positions, half-width) the box
    on slots shared with the base estimate shrinks to a neighbourhood of
    the base values.
    """

    mean_bounds: tuple[float, float] = (-3.0, 3.0)
    var_bounds: tuple[float, float] = (0.05, 4.0)
    cov_bounds: tuple[float, float] = (-2.0, 2.0)
    weight_bounds: tuple[float, float] = (0.05, 0.95)
    grid_step: Optional[float] = None
    t: float = 1.0
    N: Optional[int] = None
    refine_levels: int = 0
    keep_top: int = 16
    sample_cap: int = 1_000_000
    C: float = 1.0
    delta: float = 0.1
    workers: int = 1

    def box(self, d: int, k: int, anchor=None) -> ParamBox:
        lo, hi = [], []
        for _ in range(k * d):
            lo.append(self.mean_bounds[0])
            hi.append(self.mean_bounds[1])
        for _ in range(k):
            for r, c in zip(*np.triu_indices(d)):
                b = self.var_bounds if r == c else self.cov_bounds
                lo.append(b[0])
                hi.append(b[1])
        for _ in range(k - 1):
            lo.append(self.weight_bounds[0])
            hi.append(self.weight_bounds[1])
        if anchor is not None:
            base, positions, width = anchor
            for slot, value in _shared_slots(base, positions, d, k):
                lo[slot] = max(lo[slot], value - width)
                hi[slot] = min(hi[slot], value + width)
                if not lo[slot] < hi[slot]:
                    lo[slot], hi[slot] = value - width, value + width
        return ParamBox(tuple(lo), tuple(hi))

    def estimate_mixture(self, sampler, k, precision, seed, anchor=None):
        d = sampler.dim
        template = gaussian_mixture_template(d, k)
        cfg = EstimationConfig(
            eps=precision,
            delta=self.delta,
            N=self.N,
            grid_step=self.grid_step,
            t=self.t,
            refine_levels=self.refine_levels,
            keep_top=self.keep_top,
            seed=seed,
            sample_cap=self.sample_cap,
            C=self.C,
            workers=self.workers,
        )
        est = estimate(sampler, template, self.box(d, k, anchor), cfg)
        est.diagnostics["estimator"] = "grid"
        return est


def _shared_slots(base: gm.GMParams, positions, d: int, k: int):
    """(template slot, base value) for every slot of a d-dim template that the
    base estimate already determines; ``positions`` locates base coordinates in
    the larger plane."""
    t = d * (d + 1) // 2
    iu = list(zip(*np.triu_indices(d)))
    slot_of = {rc: i for i, rc in enumerate(iu)}
    pos = list(positions)
    for c in range(k):
        for a, p in enumerate(pos):
            yield c * d + p, float(base.means[c, a])
        for a, p in enumerate(pos):
            for b, q in enumerate(pos):
                if p <= q:
                    yield k * d + c * t + slot_of[(p, q)], float(base.covs[c, a, b])
    for c in range(k - 1):
        yield k * d + k * t + c, float(base.weights[c])
