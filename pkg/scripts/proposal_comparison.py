"""How the refresh probability interacts with the proposal.

Runs PMCMC over a grid of omega values with both the random walk and the
independence proposal on the same clustered dataset and prints the
inefficiency factor relative to omega = 1.  Shorter chains than the full
replication, so expect some Monte Carlo noise in the ratios.

    python scripts/proposal_comparison.py --iters 20000
"""

import argparse

import numpy as np

from diffpmcmc.clustering import cluster_by_class, merge_models, standardize
from diffpmcmc.data import select_rows, synth_logistic
from diffpmcmc.diagnostics import efficiency_report
from diffpmcmc.estimator import DifferenceEstimator
from diffpmcmc.model import LogisticModel
from diffpmcmc.sampler import GaussianPrior, ProposalSpec, SamplerConfig, posterior_mode, run_pmcmc, tune_subsample_size


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=50_000)
    ap.add_argument("--iters", type=int, default=20_000)
    ap.add_argument("--burnin", type=int, default=2_000)
    ap.add_argument("--omegas", default="1,0.5,0.2,0.05,0.01")
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    data = synth_logistic(args.n, 5, [3.0, 0.5, -0.5, 0.5, -0.5], seed=2024)
    exact = select_rows(data, "y==1")
    rows = np.setdiff1d(np.arange(data.n), exact)
    zs, rec = standardize(data.Z, exempt=data.exempt_columns)
    clusters = merge_models(cluster_by_class(zs, data.y, 0.7, z=data.Z, rows=rows, standardization=rec).values())
    model, prior = LogisticModel(), GaussianPrior(10.0)
    mode, hinv = posterior_mode(data, model, prior)
    est = DifferenceEstimator(data, clusters, model, exact)
    m0 = tune_subsample_size(est, mode, 1.0, seed=args.seed)
    print(f"N_C={clusters.n_clusters}  m0={m0}")

    omegas = [float(w) for w in args.omegas.split(",")]
    for kind in ("rwm", "imh"):
        prop = ProposalSpec(kind, mode, hinv)
        base = None
        print(f"\n{kind}: omega  accept  mean IF  IF / IF(omega=1)")
        for w in omegas:
            cfg = SamplerConfig(n_iter=args.iters, burn_in=args.burnin, omega=w, m0=m0,
                                adaptive=True, seed=args.seed)
            out = run_pmcmc(data, clusters, model, prior, prop, cfg, estimator=est)
            ifs = efficiency_report(out.kept, out.de_mean).if_per_param
            base = ifs if base is None else base
            print(f"{w:>11g}  {out.acceptance_rate:6.3f}  {ifs.mean():7.2f}  {np.mean(ifs / base):6.3f}")


if __name__ == "__main__":
    main()
