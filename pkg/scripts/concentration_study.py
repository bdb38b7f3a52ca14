"""Frequency of the all-moments-within-eps event at the calibrated sample size.

    python3 scripts/concentration_study.py --eps 0.2 0.1 --trials 200
"""

import argparse
import json

from scipy import stats

from polymom.empirics import SamplePlan, calibrate_constant, concentration_frequency
from polymom.polyfam import Leaf


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=4)
    ap.add_argument("--B", type=float, default=2.0)
    ap.add_argument("--delta", type=float, default=0.1)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.2, 0.1])
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    model = Leaf("gaussian", (0.0, 1.0))
    C = calibrate_constant(args.N, 1, args.B, model=model).C
    rows = []
    for eps in args.eps:
        plan = SamplePlan(N=args.N, l=1, B=args.B, eps=eps, delta=args.delta, C=C)
        hits, M = concentration_frequency(model, plan, args.trials, args.seed)
        p = stats.binomtest(hits, args.trials, 1 - args.delta, alternative="less").pvalue
        rows.append({"eps": eps, "C": C, "M": M, "hits": hits, "trials": args.trials, "p_value": p})
        print(f"eps={eps:<6g} M={M:<9d} {hits}/{args.trials} within eps  p={p:.3g}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
