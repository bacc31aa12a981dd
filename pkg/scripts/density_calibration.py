"""Size and power of the density manipulation test.

Size: uniform samples on (0, 3) have no discontinuity at the cutoff.
Power: a step from density 0.5 to 1.5 at the cutoff with exponential tails.

    python scripts/density_calibration.py --reps 500 --bootstrap 500
"""

from __future__ import annotations

import argparse

import numpy as np

from metareg.density import manipulation_test
from metareg.simulate import make_rng


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--n-null", type=int, default=1000)
    ap.add_argument("--n-alt", type=int, default=2000)
    ap.add_argument("--cutoff", type=float, default=1.645)
    ap.add_argument("--bootstrap", type=int, default=500)
    ap.add_argument("--seed", type=int, default=808)
    args = ap.parse_args()

    c = args.cutoff
    null, alt = np.random.SeedSequence(args.seed).spawn(2)
    p_null = np.array([manipulation_test(make_rng(s).uniform(0, 3, args.n_null), c, n_bootstrap=args.bootstrap,
                                         seed=i).p_value for i, s in enumerate(null.spawn(args.reps))])
    stats_alt = []
    for i, s in enumerate(alt.spawn(args.reps)):
        g = make_rng(s)
        n = args.n_alt
        x = np.where(g.random(n) < 0.5, c - g.exponential(1.0, n), c + g.exponential(1 / 3, n))
        stats_alt.append(manipulation_test(x, c, n_bootstrap=args.bootstrap, seed=i).statistic)
    stats_alt = np.array(stats_alt)
    print(f"{args.reps} replications, B = {args.bootstrap}")
    for level in (0.10, 0.05, 0.01):
        print(f"alpha={level:.2f}  size={np.mean(p_null < level):.3f}")
    print(f"power (statistic > 1.96): {np.mean(stats_alt > 1.96):.3f}")

if __name__ == "__main__":
    main()
