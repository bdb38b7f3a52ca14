"""Matched distance of the reduction pipeline versus oracle noise level.

    python3 scripts/reduction_noise_sweep.py --n 10 --k 2 --etas 1e-4 1e-3 1e-2
"""

import argparse
import json

import numpy as np

from polymom import gaussmix as gm
from polymom.estimator import ModelSampler, OracleEstimator, gm_model
from polymom.reducer import ReductionConfig, learn


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--d-S", type=int, default=2)
    ap.add_argument("--etas", type=float, nargs="+", default=[1e-4, 3e-4, 1e-3, 3e-3, 1e-2])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--instance-seed", type=int, default=70)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    theta = gm.random_instance(np.random.default_rng(args.instance_seed), args.n, args.k)
    sampler = ModelSampler(gm_model(theta))
    rows = []
    for eta in args.etas:
        dists, failures = [], 0
        for seed in range(args.seeds):
            cfg = ReductionConfig(d_S=args.d_S, seed=seed, estimator=OracleEstimator(theta, eta=eta, seed=seed))
            try:
                found, _ = learn(sampler, args.n, args.k, cfg)
            except Exception as exc:  # record and keep sweeping
                failures += 1
                print(f"eta={eta:g} seed={seed}: {type(exc).__name__}: {exc}")
                continue
            dists.append(gm.matched_distance(theta, found)[0])
        row = {
            "eta": eta,
            "median": float(np.median(dists)) if dists else None,
            "max": float(np.max(dists)) if dists else None,
            "failures": failures,
        }
        rows.append(row)
        print(f"eta={eta:<8g} median={row['median']} max={row['max']} failures={failures}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"n": args.n, "k": args.k, "d_S": args.d_S, "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
