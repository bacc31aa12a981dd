"""Monte Carlo parameter recovery for the independent and SAR models.

    python scripts/recovery.py --reps 200 --model independent
    python scripts/recovery.py --reps 100 --model sar --rho 0.5 --jobs 4
"""

from __future__ import annotations

import argparse
import time

from metareg.simulate import CovariateSpec, FitOptions, NetworkConfig, SimConfig, monte_carlo_recovery


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", choices=["independent", "sar"], default="independent")
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--studies", type=int, default=50)
    ap.add_argument("--per-study", type=int, default=20)
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--rho", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=404)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    sar = args.model == "sar"
    cfg = SimConfig(n_studies=args.studies, estimates_per_study=args.per_study, beta_true=(-0.5, 1.0, -1.0),
                    covariates=(CovariateSpec("x1"), CovariateSpec("x2")), sigma_u_true=args.sigma,
                    rho_true=args.rho if sar else 0.0, network=NetworkConfig() if sar else None, seed=args.seed)
    start = time.perf_counter()
    rep = monte_carlo_recovery(cfg, args.reps, FitOptions(random=args.model), n_jobs=args.jobs)
    print(f"{args.model} model, {args.reps} replications, {rep.n_failed} failed, "
          f"{time.perf_counter() - start:.0f} s")
    print(f"{'parameter':<12}{'truth':>8}{'mean':>9}{'bias':>9}{'rmse':>9}{'coverage':>10}")
    for row in rep.table():
        print(f"{row['parameter']:<12}{row['truth']:>8.3f}{row['mean']:>9.3f}{row['bias']:>9.3f}"
              f"{row['rmse']:>9.3f}{row['coverage']:>10.3f}")


if __name__ == "__main__":
    main()
