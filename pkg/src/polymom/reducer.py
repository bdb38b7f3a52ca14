"""Learning high-dimensional Gaussian mixtures from low-dimensional projections.

The pipeline:

1. estimate every ``d_S``-coordinate projection at precision gamma/3 and keep
   the plane ``S`` whose estimate has the largest radius of identifiability;
2. estimate the mixture on ``S`` at precision gamma/9 (the *base*);
   a. for each coordinate i outside S, estimate on S + {i} and read off the
      i-th mean entry, Sigma_ii and Sigma_is for s in S;
   b. for each pair i < j outside S, estimate on S + {i, j} and read off Sigma_ij;
3. align every extension with the base through its restriction to S, then
   write all entries into full n-dimensional components.

Every low-dimensional call goes through a ``LowDimEstimator`` so the
stitching can be exercised with an oracle.  Tasks derive their seeds from
``(cfg.seed, stage, coordinates)``; combined with ordered reduction this
makes the output independent of ``cfg.workers``.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import gaussmix as gm
from .errors import (
    AssemblyIncomplete,
    BudgetExceeded,
    EstimationFailed,
    InvalidArgument,
    MatchingAmbiguous,
    PolymomError,
)
from .estimator import ProjectedSampler

STAGE_PILOT, STAGE_SELECT, STAGE_BASE, STAGE_SINGLE, STAGE_PAIR, STAGE_DETECT = range(6)


@dataclass
class ReductionConfig:
    d_S: Optional[int] = None
    eps: float = 0.5
    delta: float = 0.1
    gamma: Optional[float] = None
    match_margin: Optional[float] = None
    plane_budget: int = 100_000
    seed: int = 0
    workers: int = 1
    anchored: bool = False
    anchor_width: float = 0.25
    estimator: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.eps > 0 or not 0 < self.delta < 1:
            raise InvalidArgument(f"need eps > 0 and 0 < delta < 1, got eps={self.eps}, delta={self.delta}")
        if self.gamma is not None and not self.gamma > 0:
            raise InvalidArgument(f"gamma must be positive, got {self.gamma}")
        if self.match_margin is not None and not self.match_margin > 0:
            raise InvalidArgument(f"match_margin must be positive, got {self.match_margin}")
        if self.workers < 1:
            raise InvalidArgument("workers must be >= 1")

    def subspace_dim(self, n: int, k: int) -> int:
        d = self.d_S if self.d_S is not None else min(2 * k * k, n)
        if not 1 <= d <= n:
            raise InvalidArgument(f"need 1 <= d_S <= n, got d_S={d}, n={n}")
        return d

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "estimator"}

    @classmethod
    def from_dict(cls, doc: dict, estimator=None) -> "ReductionConfig":
        known = {f.name for f in fields(cls)} - {"estimator"}
        extra = set(doc) - known
        if extra:
            raise InvalidArgument(f"unknown reduction config fields {sorted(extra)}")
        return cls(**doc, estimator=estimator)


@dataclass(eq=False)
class SubspaceEstimate:
    plane: gm.CoordinatePlane
    base: gm.GMParams
    est_radius: float
    diagnostics: dict = field(default_factory=dict)


@dataclass(eq=False)
class ExtensionRecord:
    """New entries learned from one extended plane.

    ``entries`` maps a slot, ``("mean", i)`` or ``("cov", a, b)`` with a <= b in
    ambient coordinates, to one value per component in base order.
    """

    kind: str
    coords: tuple[int, ...]
    entries: dict
    permutation: tuple[int, ...]


@dataclass
class Detection:
    verdict: bool
    r_star: float
    cutoff: float
    plane: Optional[tuple[int, ...]] = None
    planes_evaluated: int = 0

    def __bool__(self):
        return self.verdict


def task_seed(seed: int, stage: int, *coords: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(stage), *map(int, coords)]).generate_state(1, np.uint64)[0])


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _estimator(cfg):
    if cfg.estimator is None:
        raise InvalidArgument("reduction config has no low-dimensional estimator")
    return cfg.estimator


def _estimate_on(sampler, plane, k, precision, cfg, stage, anchor=None):
    est = _estimator(cfg).estimate_mixture(
        ProjectedSampler(sampler, plane), k, precision, task_seed(cfg.seed, stage, *plane.indices), anchor=anchor
    )
    try:
        theta = gm.from_template_vector(np.asarray(est.params), plane.d, k)
    except PolymomError as exc:
        raise EstimationFailed(f"estimate on plane {plane.indices} is not a valid mixture: {exc}") from exc
    return theta, est


def _planes(n, d, budget):
    count = math.comb(n, d)
    if count > budget:
        raise BudgetExceeded(f"C({n},{d}) = {count} planes exceeds plane budget {budget}", count)
    return [gm.CoordinatePlane(c) for c in itertools.combinations(range(n), d)]


def _scan_planes(sampler, k, d, precision, cfg, stage):
    """Estimate every d-plane; return per-plane (plane, theta or None, radius or None)."""

    def one(plane):
        try:
            theta, _ = _estimate_on(sampler, plane, k, precision, cfg, stage)
        except EstimationFailed as exc:
            return plane, None, None, str(exc)
        return plane, theta, gm.radius(theta), None

    return _map(one, _planes(sampler.dim, d, cfg.plane_budget), cfg.workers)


def _best(results):
    best = None
    for plane, theta, r, _ in results:
        if theta is not None and (best is None or r > best[2]):
            best = (plane, theta, r)
    if best is None:
        raise EstimationFailed("estimation failed on every plane")
    return best


def resolve_gamma(sampler, k: int, cfg: ReductionConfig) -> tuple[float, dict]:
    """Precision seed gamma = min(R_hat / n, eps / n).

    When ``cfg.gamma`` is unset, R_hat is the largest estimated projected
    radius from a pilot scan at precision eps / (3 n).
    """
    n = sampler.dim
    if cfg.gamma is not None:
        return cfg.gamma, {"gamma_source": "config"}
    d = cfg.subspace_dim(n, k)
    _, _, r_hat = _best(_scan_planes(sampler, k, d, cfg.eps / (3 * n), cfg, STAGE_PILOT))
    if not r_hat > 0:
        raise EstimationFailed("pilot radius of identifiability is zero; gamma cannot be set")
    return min(r_hat / n, cfg.eps / n), {"gamma_source": "pilot", "pilot_radius": r_hat}


def select_subspace(sampler, k: int, cfg: ReductionConfig, gamma: Optional[float] = None) -> SubspaceEstimate:
    """Step 1: the d_S-plane whose estimate has the largest radius."""
    n = sampler.dim
    d = cfg.subspace_dim(n, k)
    if gamma is None:
        gamma, _ = resolve_gamma(sampler, k, cfg)
    results = _scan_planes(sampler, k, d, gamma / 3, cfg, STAGE_SELECT)
    plane, theta, r = _best(results)
    return SubspaceEstimate(
        plane=plane,
        base=theta,
        est_radius=r,
        diagnostics={
            "precision": gamma / 3,
            "planes_evaluated": len(results),
            "planes_failed": sum(1 for x in results if x[1] is None),
        },
    )


def estimate_base(sampler, plane: gm.CoordinatePlane, k: int, cfg: ReductionConfig, gamma: float) -> gm.GMParams:
    """Step 2: mixture on the selected plane at precision gamma/9."""
    theta, _ = _estimate_on(sampler, plane, k, gamma / 9, cfg, STAGE_BASE)
    return theta


def restrict(theta: gm.GMParams, positions) -> gm.GMParams:
    """Components of ``theta`` restricted to the given local coordinate positions."""
    pos = list(positions)
    return gm.GMParams(theta.means[:, pos], theta.covs[:, pos][:, :, pos], theta.weights)


def match_components(candidate: gm.GMParams, base: gm.GMParams, positions, margin: float) -> tuple[int, ...]:
    """Align a candidate on T with the base on S, where S sits at ``positions`` in T.

    Returns ``perm`` with candidate component ``perm[b]`` matching base
    component ``b``.  Each candidate's nearest base component must be closer
    than ``margin`` and its runner-up farther, and the pairing must be a
    bijection; otherwise :class:`MatchingAmbiguous` is raised.
    """
    if candidate.k != base.k:
        raise InvalidArgument(f"component counts differ: {candidate.k} vs {base.k}")
    D = np.sqrt(gm.cost_matrix(restrict(candidate, positions), base))
    k = base.k
    perm = [-1] * k
    for c in range(k):
        order = np.argsort(D[c], kind="stable")
        nearest = int(order[0])
        if not D[c, nearest] < margin:
            raise MatchingAmbiguous(
                f"candidate component {c} is {D[c, nearest]:.3g} from its nearest base component, margin {margin:.3g}"
            )
        if k > 1 and not D[c, order[1]] > margin:
            raise MatchingAmbiguous(f"candidate component {c} is within margin {margin:.3g} of two base components")
        if perm[nearest] != -1:
            raise MatchingAmbiguous(f"base component {nearest} claimed by two candidate components")
        perm[nearest] = c
    return tuple(perm)


def extend(sampler, plane: gm.CoordinatePlane, base: gm.GMParams, target: tuple, k: int, cfg: ReductionConfig, gamma: float, margin: Optional[float] = None) -> ExtensionRecord:
    """Step 2a (``target = ("single", i)``) or 2b (``("pair", i, j)``)."""
    kind, *coords = target
    if kind not in ("single", "pair") or len(coords) != (1 if kind == "single" else 2):
        raise InvalidArgument(f"bad extension target {target!r}")
    if any(c in plane.indices for c in coords):
        raise InvalidArgument(f"extension coordinates {coords} overlap the base plane {plane.indices}")
    T = plane.union(*coords)
    positions = [T.indices.index(s) for s in plane.indices]
    anchor = (base, positions, cfg.anchor_width) if cfg.anchored else None
    stage = STAGE_SINGLE if kind == "single" else STAGE_PAIR
    cand, est = _estimate_on(sampler, T, k, gamma / 9, cfg, stage, anchor=anchor)
    perm = match_components(cand, base, positions, margin if margin is not None else gamma / 3)
    aligned = cand.permuted(perm)
    loc = {g: T.indices.index(g) for g in T.indices}
    entries = {}
    if kind == "single":
        (i,) = coords
        entries[("mean", i)] = tuple(aligned.means[:, loc[i]].tolist())
        entries[("cov", i, i)] = tuple(aligned.covs[:, loc[i], loc[i]].tolist())
        for s in plane.indices:
            a, b = min(i, s), max(i, s)
            entries[("cov", a, b)] = tuple(aligned.covs[:, loc[a], loc[b]].tolist())
    else:
        i, j = sorted(coords)
        entries[("cov", i, j)] = tuple(aligned.covs[:, loc[i], loc[j]].tolist())
    return ExtensionRecord(kind, tuple(coords), entries, perm)


def assemble(base: gm.GMParams, plane: gm.CoordinatePlane, records, n: int) -> tuple[gm.GMParams, dict]:
    """Write base and extension entries into full n-dimensional components.

    Covariances are symmetrised and negative eigenvalues clipped to zero.
    """
    k = base.k
    means = np.full((k, n), np.nan)
    covs = np.full((k, n, n), np.nan)
    written: set = set()

    def put(slot, values):
        if slot in written:
            raise AssemblyIncomplete(f"slot {slot} written twice")
        written.add(slot)
        values = np.asarray(values, dtype=float)
        if slot[0] == "mean":
            means[:, slot[1]] = values
        else:
            _, a, b = slot
            covs[:, a, b] = values
            covs[:, b, a] = values

    S = plane.indices
    for a, s in enumerate(S):
        put(("mean", s), base.means[:, a])
        for b in range(a, len(S)):
            put(("cov", s, S[b]), base.covs[:, a, b])
    for rec in records:
        for slot, values in rec.entries.items():
            put(slot, values)
    expected = {("mean", i) for i in range(n)} | {("cov", a, b) for a in range(n) for b in range(a, n)}
    missing = expected - written
    if missing:
        raise AssemblyIncomplete(f"{len(missing)} slots never estimated, e.g. {sorted(missing)[:3]}")
    covs = (covs + covs.transpose(0, 2, 1)) / 2
    vals, vecs = np.linalg.eigh(covs)
    clip = float(max(0.0, -vals.min()))
    if clip > 0:
        covs = vecs @ (np.clip(vals, 0, None)[..., None] * vecs.transpose(0, 2, 1))
        covs = (covs + covs.transpose(0, 2, 1)) / 2
    theta = gm.GMParams(means, covs, base.weights)
    return theta, {"slots_written": k * len(written) + k, "psd_clip": clip}


def _tagged(stage, fn, *args):
    try:
        return fn(*args)
    except PolymomError as exc:
        exc.stage = stage
        raise


def learn(sampler, n: int, k: int, cfg: ReductionConfig) -> tuple[gm.GMParams, dict]:
    """Full reduction; returns the estimate and a JSON-ready report."""
    if sampler.dim != n:
        raise InvalidArgument(f"sampler dimension {sampler.dim} != n = {n}")
    d = cfg.subspace_dim(n, k)
    timings = {}
    t0 = time.perf_counter()
    gamma, gamma_info = _tagged("gamma", resolve_gamma, sampler, k, cfg)
    margin = cfg.match_margin if cfg.match_margin is not None else gamma / 3
    timings["gamma"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sub = _tagged("select_subspace", select_subspace, sampler, k, cfg, gamma)
    timings["select_subspace"] = time.perf_counter() - t0
    S = sub.plane

    t0 = time.perf_counter()
    base = _tagged("estimate_base", estimate_base, sampler, S, k, cfg, gamma)
    timings["estimate_base"] = time.perf_counter() - t0

    outside = [i for i in range(n) if i not in S.indices]
    targets = [("single", i) for i in outside] + [("pair", i, j) for i, j in itertools.combinations(outside, 2)]

    def run(target):
        return extend(sampler, S, base, target, k, cfg, gamma, margin)

    t0 = time.perf_counter()
    records = _tagged("extend", _map, run, targets, cfg.workers)
    timings["extend"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    theta, info = _tagged("assemble", assemble, base, S, records, n)
    timings["assemble"] = time.perf_counter() - t0

    warnings = []
    if info["psd_clip"] > cfg.eps / 10:
        warnings.append(f"PSD clip {info['psd_clip']:.3g} exceeds eps/10; estimation error is over budget")
    report = {
        "n": n,
        "k": k,
        "d_S": d,
        "gamma": gamma,
        **gamma_info,
        "match_margin": margin,
        "precisions": {"select_subspace": gamma / 3, "estimate_base": gamma / 9, "extend": gamma / 9},
        "plane": list(S.indices),
        "plane_radius_estimate": sub.est_radius,
        "subspace_planes": sub.diagnostics["planes_evaluated"],
        "subspace_planes_failed": sub.diagnostics["planes_failed"],
        "estimation_count": 1 + len(targets),
        "single_extensions": len(outside),
        "pair_extensions": len(targets) - len(outside),
        "permutations": {
            ",".join(map(str, r.coords)): list(r.permutation) for r in records
        },
        "slots_written": info["slots_written"],
        "psd_clip": info["psd_clip"],
        "warnings": warnings,
        "timings": timings,
    }
    return theta, report


def detect_identifiability(sampler, n: int, k: int, eps: float, cfg: ReductionConfig) -> Detection:
    """Whether the radius of identifiability is below ``eps``.

    Every d_S-plane is estimated at precision eps/(3n); the verdict is true
    (R < eps) iff the largest estimated projected radius is below 2 eps/(3n).
    """
    if not eps > 0:
        raise InvalidArgument(f"eps must be positive, got {eps}")
    if sampler.dim != n:
        raise InvalidArgument(f"sampler dimension {sampler.dim} != n = {n}")
    d = cfg.subspace_dim(n, k)
    results = _scan_planes(sampler, k, d, eps / (3 * n), cfg, STAGE_DETECT)
    plane, _, r_star = _best(results)
    cutoff = 2 * eps / (3 * n)
    return Detection(r_star < cutoff, r_star, cutoff, plane.indices, len(results))
