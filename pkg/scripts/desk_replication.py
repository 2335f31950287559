"""Desk-scale replication of the omega sweep.

Synthesizes a sparse-class logistic dataset, clusters it, runs exact MCMC
and PMCMC for several omega values through the CLI pipeline, then writes a
summary table and marginal density overlays.

    python scripts/desk_replication.py --outdir artifacts/replication
"""

import argparse
import json
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from diffpmcmc.cli import main as cli_main
from diffpmcmc.cli import read_chain

CONFIG = """[run]
data = {outdir}/synth.csv
synth_n = {n}
synth_beta = 3.0,0.5,-0.5,0.5,-0.5
synth_seed = 2024
epsilon = 0.7
by_class = true
exact_stratum = y==1
proposal = {proposal}
omegas = {omegas}
vmax = 1
m0 = auto
adaptive = true
iters = {iters}
burnin = {burnin}
seed = {seed}
outdir = {outdir}
"""


def summarize(outdir: Path) -> str:
    rep = json.loads((outdir / "report.json").read_text())
    cols = rep["columns"]
    lines = [f"n={rep['n']}  N_C={rep['n_clusters']}  seed={rep['seed']}", ""]
    lines.append(f"{'chain':<12}{'accept':>8}{'sigma_z':>9}{'DE frac':>9}  RIF / RED per parameter")
    for name, c in rep["chains"].items():
        eff = c["efficiency"]
        row = f"{name:<12}{c['acceptance']:>8.3f}{c.get('sigma_z_mean', float('nan')):>9.3f}{c['fraction_evaluated']:>9.3f}"
        if eff.get("rif"):
            row += "  " + " ".join(f"{a:.2f}/{b:.1f}" for a, b in zip(eff["rif"], eff["red"]))
        lines.append(row)
        if "vs_exact" in c:
            z = [t["difference"] / t["se"] for t in c["vs_exact"]]
            lines.append(f"{'':<12}mean test vs exact: z = {np.round(z, 2).tolist()}, "
                         f"rejections {sum(t['reject'] for t in c['vs_exact'])}/{len(cols)}")
    return "\n".join(lines)


def plot(outdir: Path, omegas):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    exact, cols, _ = read_chain(outdir / "chain_exact.csv")
    fig, axes = plt.subplots(1, len(cols), figsize=(4 * len(cols), 3))
    for j, col in enumerate(cols):
        grid = np.linspace(exact[:, j].min(), exact[:, j].max(), 200)
        axes[j].plot(grid, gaussian_kde(exact[:, j])(grid), "k-", lw=2, label="exact")
        for w in omegas:
            tag = f"{w:g}".replace(".", "p")
            draws = read_chain(outdir / f"chain_omega_{tag}.csv")[0]
            axes[j].plot(grid, gaussian_kde(draws[:, j])(grid), lw=1, label=f"omega={w:g}")
        axes[j].set_title(col)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(outdir / "kde_overlay.png", dpi=90)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--outdir", default="artifacts/replication")
    ap.add_argument("--n", type=int, default=50_000)
    ap.add_argument("--iters", type=int, default=55_000)
    ap.add_argument("--burnin", type=int, default=5_000)
    ap.add_argument("--omegas", default="1,0.2,0.01")
    ap.add_argument("--proposal", default="imh", choices=["imh", "rwm"])
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    outdir = Path(args.outdir).resolve()
    outdir.mkdir(parents=True, exist_ok=True)
    ini = outdir / "run.ini"
    ini.write_text(CONFIG.format(outdir=outdir, n=args.n, proposal=args.proposal, omegas=args.omegas,
                                 iters=args.iters, burnin=args.burnin, seed=args.seed))
    rc = cli_main(["pipeline", "--config", str(ini)])
    if rc:
        raise SystemExit(rc)
    text = summarize(outdir)
    (outdir / "summary.txt").write_text(text + "\n")
    print(text)
    try:
        plot(outdir, [float(w) for w in args.omegas.split(",")])
    except ImportError:
        print("matplotlib not installed; skipping plot")


if __name__ == "__main__":
    main()
