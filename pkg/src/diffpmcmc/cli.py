"""Command-line entry point.

Subcommands: ``synth``, ``cluster``, ``mode``, ``sample``, ``diagnose``,
``pipeline``.  Every subcommand also reads an INI file via ``--config``
(section ``[run]``, keys named like the long flags with dashes replaced
by underscores); flags given on the command line win.

Exit status: 0 on success, 1 on invalid input, 2 on numerical failure.
The environment variable ``DIFFPMCMC_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import os

if "DIFFPMCMC_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["DIFFPMCMC_THREADS"])

import argparse
import configparser
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from diffpmcmc import __version__
from diffpmcmc.clustering import (
    cluster,
    cluster_by_class,
    load_cluster_model,
    merge_models,
    monitor_fraction,
    save_cluster_model,
    standardize,
)
from diffpmcmc.data import Dataset, ingest_csv, select_rows, synth_logistic, write_csv
from diffpmcmc.diagnostics import efficiency_report, mean_equality_test, relative_report
from diffpmcmc.errors import NumericalError, ValidationError
from diffpmcmc.estimator import DifferenceEstimator
from diffpmcmc.model import get_model
from diffpmcmc.sampler import (
    ChainOutput,
    GaussianPrior,
    ProposalSpec,
    SamplerConfig,
    posterior_mode,
    run_mcmc_exact,
    run_pmcmc,
    tune_subsample_size,
)

# (name, type, default, help); bools are flags
OPTIONS = {
    "data": (str, None, "input CSV"),
    "response": (str, "y", "response column name"),
    "no_intercept": (bool, False, "do not add an intercept column"),
    "model": (str, "logistic", "logistic | gaussian | poisson"),
    "epsilon": (float, None, "ball radius in standardized units"),
    "by_class": (bool, False, "cluster each response class separately"),
    "exact_stratum": (str, "", "rows always evaluated exactly, e.g. 'y==1'"),
    "max_fraction": (float, None, "abort clustering when N_C/n exceeds this"),
    "clusters": (str, None, "cluster artifact"),
    "mode_file": (str, None, "JSON from the mode subcommand"),
    "prior_tau": (float, 10.0, "prior variance"),
    "proposal": (str, "rwm", "rwm | imh"),
    "scale": (float, None, "random-walk scale (default 2.38^2/p)"),
    "dof": (int, 10, "Student-t degrees of freedom for imh"),
    "omega": (float, 1.0, "subsample refresh probability"),
    "omegas": (str, "1", "comma-separated omega values (pipeline)"),
    "vmax": (float, 1.0, "maximum estimated variance"),
    "m0": (str, "auto", "initial subsample size or 'auto'"),
    "target_sigma2": (float, None, "variance targeted by --m0 auto (default: vmax)"),
    "iters": (int, 10_000, "total iterations"),
    "burnin": (int, 0, "burn-in iterations"),
    "seed": (int, 0, "random seed"),
    "adaptive": (bool, False, "grow the subsample when variance exceeds vmax"),
    "exact": (bool, False, "run exact full-data MCMC instead"),
    "run_exact": (bool, True, "pipeline: also run exact MCMC"),
    "telemetry": (str, None, "per-iteration log path"),
    "burnin_out": (str, None, "write burn-in draws here"),
    "chain": (str, None, "chain CSV"),
    "baseline": (str, None, "baseline chain CSV"),
    "level": (float, 0.05, "test level"),
    "outdir": (str, "run", "pipeline output directory"),
    "synth_n": (int, None, "pipeline: synthesize this many rows if data is missing"),
    "synth_beta": (str, None, "pipeline: comma-separated true coefficients"),
    "synth_seed": (int, 0, "pipeline: synthetic data seed"),
    "n": (int, None, "rows"),
    "p": (int, None, "coefficients including intercept"),
    "beta": (str, None, "comma-separated coefficients"),
    "out": (str, None, "output path"),
    "output": (str, None, "output path"),
    "input": (str, None, "input path"),
}

SUBCOMMANDS = {
    "synth": ["n", "p", "beta", "seed", "out"],
    "cluster": ["input", "data", "response", "no_intercept", "epsilon", "by_class",
                "exact_stratum", "max_fraction", "output", "out"],
    "mode": ["data", "response", "no_intercept", "model", "prior_tau", "out"],
    "sample": ["data", "response", "no_intercept", "model", "clusters", "mode_file", "prior_tau",
               "proposal", "scale", "dof", "omega", "vmax", "m0", "target_sigma2", "iters",
               "burnin", "seed", "adaptive", "exact", "exact_stratum", "telemetry",
               "burnin_out", "out"],
    "diagnose": ["chain", "baseline", "burnin", "level", "out"],
    "pipeline": ["data", "response", "no_intercept", "model", "epsilon", "by_class",
                 "exact_stratum", "clusters", "prior_tau", "proposal", "scale", "dof",
                 "omegas", "vmax", "m0", "target_sigma2", "iters", "burnin", "seed",
                 "adaptive", "run_exact", "outdir", "synth_n", "synth_beta", "synth_seed"],
}


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.exc = exc


def build_id() -> str:
    """Content hash of the package sources."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


# where results go does not change what they are
_OUTPUT_KEYS = {"out", "output", "outdir", "telemetry", "burnin_out"}


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: cfg[k] for k in sorted(cfg) if k not in _OUTPUT_KEYS},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _parse_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise ValidationError(f"not a boolean: {v!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffpmcmc", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in SUBCOMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file with a [run] section")
        for key in keys:
            typ, _, help_ = OPTIONS[key]
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=help_)
            else:
                sp.add_argument(flag, dest=key, type=typ, default=None, help=help_)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, INI file and flags (in increasing priority)."""
    keys = SUBCOMMANDS[args.command]
    cfg = {k: OPTIONS[k][1] for k in keys}
    if args.config:
        ini = configparser.ConfigParser()
        if not ini.read(args.config):
            raise ValidationError(f"cannot read config file {args.config}")
        section = ini["run"] if "run" in ini else {}
        for k, v in section.items():
            k = k.replace("-", "_")
            if k not in cfg:
                raise ValidationError(f"unknown config key {k!r} for {args.command}")
            typ = OPTIONS[k][0]
            cfg[k] = _parse_bool(v) if typ is bool else typ(v)
    for k in keys:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    return cfg


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ValidationError(f"--{k.replace('_', '-')} is required")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


def _load_data(cfg) -> Dataset:
    path = cfg.get("data") or cfg.get("input")
    if not path:
        raise ValidationError("--data is required")
    if not Path(path).exists():
        raise ValidationError(f"data file {path} does not exist")
    return ingest_csv(path, response=cfg["response"], intercept=not cfg["no_intercept"])


def _fmt(v: float) -> str:
    return repr(float(v))


def write_chain(path, chain: ChainOutput, columns, header: dict, rows=None) -> None:
    """Chain CSV: one comment line with run metadata, a header, one row per draw."""
    draws = chain.kept if rows is None else rows
    meta = " ".join(f"{k}={v}" for k, v in header.items())
    with Path(path).open("w") as fh:
        fh.write(f"# diffpmcmc {meta}\n")
        fh.write(",".join(columns) + "\n")
        for row in draws:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_chain(path):
    """Return ``(draws, columns, metadata)`` from a chain CSV."""
    meta = {}
    lines = Path(path).read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        elif line.strip():
            body.append(line)
    if not body:
        raise ValidationError(f"{path}: empty chain file")
    columns = body[0].split(",")
    try:
        draws = np.array([[float(c) for c in line.split(",")] for line in body[1:]], dtype=float)
    except ValueError:
        raise ValidationError(f"{path}: non-numeric chain entry") from None
    return draws.reshape(-1, len(columns)), columns, meta


class TelemetryWriter:
    """Streams ``iter,accepted,m,sigma2,de,u_refreshed`` lines while sampling."""

    def __init__(self, path, header: dict):
        self.fh = Path(path).open("w")
        meta = " ".join(f"{k}={v}" for k, v in header.items())
        self.fh.write(f"# diffpmcmc telemetry {meta}\n")
        self.fh.write("iter,accepted,m,sigma2,de,u_refreshed\n")

    def __call__(self, i, out: ChainOutput):
        s = out.sigma_z[i]
        sigma2 = "nan" if np.isnan(s) else _fmt(s * s)
        self.fh.write(f"{i},{int(out.accepted[i])},{out.m[i]},{sigma2},{out.de[i]},{int(out.u_refreshed[i])}\n")

    def close(self):
        self.fh.close()


def cmd_synth(cfg):
    _require(cfg, "n", "p", "beta", "out")
    data = synth_logistic(cfg["n"], cfg["p"], _floats(cfg["beta"]), cfg["seed"])
    write_csv(data, cfg["out"])
    print(f"wrote {data.n} rows to {cfg['out']} (fraction y=1: {data.y.mean():.4f})")


def build_clusters(data: Dataset, cfg, log=print):
    _require(cfg, "epsilon")
    exact = select_rows(data, cfg.get("exact_stratum"))
    est_rows = np.setdiff1d(np.arange(data.n), exact)
    zs, rec = standardize(data.Z, exempt=data.exempt_columns, names=[data.response, *data.columns])
    max_frac = cfg.get("max_fraction")
    last = [0.0]

    def progress(n_clusters, assigned):
        now = time.monotonic()
        if now - last[0] > 2.0:
            last[0] = now
            log(f"  clusters={n_clusters} assigned={assigned} N_C/n={n_clusters / max(assigned, 1):.4f}")
        if max_frac is not None and assigned >= 1000 and n_clusters / assigned > max_frac:
            raise ValidationError(
                f"N_C/n = {n_clusters / assigned:.3f} exceeds {max_frac}; restart with a larger epsilon"
            )

    if cfg.get("by_class"):
        per_class = cluster_by_class(zs, data.y, cfg["epsilon"], z=data.Z, rows=est_rows,
                                     standardization=rec, progress=progress)
        model = merge_models(per_class.values()) if per_class else cluster(
            zs, cfg["epsilon"], z=data.Z, rows=est_rows, standardization=rec)
    else:
        dims = [j for j in range(data.Z.shape[1]) if j not in data.exempt_columns]
        model = cluster(zs, cfg["epsilon"], z=data.Z, rows=est_rows, dims=dims,
                        standardization=rec, progress=progress)
    log(f"clusters: N_C={model.n_clusters} n={model.n} N_C/n={monitor_fraction(model):.4f} "
        f"exact stratum={exact.size}")
    return model, exact


def cmd_cluster(cfg):
    out = cfg.get("output") or cfg.get("out")
    if not out:
        raise ValidationError("--output is required")
    data = _load_data(cfg)
    model, _ = build_clusters(data, cfg, log=lambda s: print(s, file=sys.stderr))
    save_cluster_model(model, out)
    print(f"wrote {out}")


def _mode(data, model, prior):
    try:
        return posterior_mode(data, model, prior)
    except NumericalError:
        raise
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"mode search failed: {exc}") from None


def cmd_mode(cfg):
    _require(cfg, "out")
    data = _load_data(cfg)
    theta, hinv = _mode(data, get_model(cfg["model"]), GaussianPrior(cfg["prior_tau"]))
    Path(cfg["out"]).write_text(json.dumps(
        {"columns": data.columns, "theta_star": theta.tolist(), "hess_inv": hinv.tolist()}, indent=2))
    print(f"mode written to {cfg['out']}")


def _load_mode(cfg, data, model, prior):
    if cfg.get("mode_file"):
        blob = json.loads(Path(cfg["mode_file"]).read_text())
        return np.array(blob["theta_star"]), np.array(blob["hess_inv"])
    return _mode(data, model, prior)


def sample_chain(data, cfg, *, clusters=None, exact_rows=None, theta_star=None, hess_inv=None,
                 exact=False, omega=None, seed=None, telemetry=None, header=None):
    model = get_model(cfg["model"])
    prior = GaussianPrior(cfg["prior_tau"])
    if theta_star is None:
        theta_star, hess_inv = _load_mode(cfg, data, model, prior)
    proposal = ProposalSpec(cfg["proposal"], theta_star, hess_inv, scale=cfg["scale"], dof=cfg["dof"])
    omega = cfg.get("omega", 1.0) if omega is None else omega
    seed = cfg["seed"] if seed is None else seed
    estimator = None
    m0 = 2
    if not exact:
        if clusters is None:
            raise ValidationError("--clusters is required unless --exact is given")
        if exact_rows is None:
            exact_rows = np.flatnonzero(clusters.assignment < 0)
        estimator = DifferenceEstimator(data, clusters, model, exact_rows)
        if str(cfg["m0"]).lower() == "auto":
            target = cfg["target_sigma2"] or cfg["vmax"]
            m0 = tune_subsample_size(estimator, theta_star, target, seed=seed)
        else:
            m0 = int(cfg["m0"])
    config = SamplerConfig(
        n_iter=cfg["iters"], burn_in=cfg["burnin"], omega=omega, v_max=cfg["vmax"],
        m0=max(m0, 2), adaptive=cfg["adaptive"], seed=seed, prior_tau=cfg["prior_tau"],
    )
    writer = TelemetryWriter(telemetry, header or {}) if telemetry else None
    try:
        if exact:
            chain = run_mcmc_exact(data, model, prior, proposal, config, callback=writer)
        else:
            chain = run_pmcmc(data, clusters, model, prior, proposal, config,
                              estimator=estimator, callback=writer)
    finally:
        if writer:
            writer.close()
    chain.meta.update(m0=config.m0, omega=omega, seed=seed, exact=exact)
    return chain


def _chain_header(cfg, chain: ChainOutput, kind: str, **extra) -> dict:
    h = {
        "kind": kind,
        "seed": chain.meta.get("seed"),
        "config": config_hash(cfg),
        "build": build_id(),
        "omega": chain.meta.get("omega"),
        "m0": chain.meta.get("m0"),
        "de_mean": _fmt(chain.de_mean),
        "accept": _fmt(chain.acceptance_rate),
    }
    if not chain.meta.get("exact"):
        h["sigma_z_mean"] = _fmt(chain.sigma_z_mean)
    h.update(extra)
    return h


def cmd_sample(cfg):
    _require(cfg, "out")
    data = _load_data(cfg)
    clusters = None
    exact_rows = None
    if not cfg["exact"]:
        _require(cfg, "clusters")
        clusters = load_cluster_model(cfg["clusters"])
        exact_rows = select_rows(data, cfg["exact_stratum"]) if cfg["exact_stratum"] else None
    kind = "exact" if cfg["exact"] else "pmcmc"
    header = {"kind": kind, "seed": cfg["seed"], "config": config_hash(cfg), "build": build_id()}
    chain = sample_chain(data, cfg, clusters=clusters, exact_rows=exact_rows, exact=cfg["exact"],
                         telemetry=cfg.get("telemetry"), header=header)
    write_chain(cfg["out"], chain, data.columns, _chain_header(cfg, chain, kind, n=data.n))
    if cfg.get("burnin_out"):
        write_chain(cfg["burnin_out"], chain, data.columns, _chain_header(cfg, chain, kind, n=data.n),
                    rows=chain.draws[: chain.burn_in])
    print(f"{kind}: acceptance={chain.acceptance_rate:.3f} DE/iter={chain.de_mean:.1f} -> {cfg['out']}")


def diagnose(draws, de_mean, baseline=None, baseline_de=None, level=0.05, columns=None) -> dict:
    rep = efficiency_report(draws, de_mean)
    out = {"columns": columns, "chain": rep.to_dict()}
    if baseline is not None:
        base = efficiency_report(baseline, baseline_de)
        relative_report(rep, base)
        out["chain"] = rep.to_dict()
        out["baseline"] = base.to_dict()
        out["mean_equality"] = [t.__dict__ for t in mean_equality_test(draws, baseline, level)]
    return out


def cmd_diagnose(cfg):
    _require(cfg, "chain", "out")
    draws, columns, meta = read_chain(cfg["chain"])
    draws = draws[cfg["burnin"]:]
    de = float(meta.get("de_mean", "nan"))
    base = base_de = None
    if cfg.get("baseline"):
        base, _, bmeta = read_chain(cfg["baseline"])
        base = base[cfg["burnin"]:]
        base_de = float(bmeta.get("de_mean", "nan"))
    report = diagnose(draws, de, base, base_de, cfg["level"], columns)
    Path(cfg["out"]).write_text(json.dumps(report, indent=2))
    _print_report(report)


def _print_report(report):
    cols = report["columns"]
    ch = report["chain"]
    print("parameter        IF        ED" + ("       RIF       RED" if ch.get("rif") else ""))
    for j, c in enumerate(cols):
        line = f"{c:<12}{ch['if_per_param'][j]:>8.3f}{ch['ed'][j]:>10.3g}"
        if ch.get("rif"):
            line += f"{ch['rif'][j]:>10.3f}{ch['red'][j]:>10.3f}"
        print(line)


def _omega_tag(w: float) -> str:
    return f"{w:g}".replace(".", "p")


def cmd_pipeline(cfg, log=print):
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    stage = "data"
    try:
        if cfg.get("data") and not Path(cfg["data"]).exists() and cfg.get("synth_n"):
            _require(cfg, "synth_beta")
            beta = _floats(cfg["synth_beta"])
            write_csv(synth_logistic(cfg["synth_n"], len(beta), beta, cfg["synth_seed"]), cfg["data"])
        data = _load_data(cfg)

        stage = "cluster"
        clu_path = Path(cfg["clusters"]) if cfg.get("clusters") else outdir / "model.clu"
        exact_rows = select_rows(data, cfg["exact_stratum"])
        if clu_path.exists():
            clusters = load_cluster_model(clu_path)
        else:
            clusters, exact_rows = build_clusters(data, cfg, log=log)
            save_cluster_model(clusters, clu_path)

        stage = "mode"
        model = get_model(cfg["model"])
        prior = GaussianPrior(cfg["prior_tau"])
        theta_star, hess_inv = _mode(data, model, prior)
        (outdir / "mode.json").write_text(json.dumps(
            {"columns": data.columns, "theta_star": theta_star.tolist(), "hess_inv": hess_inv.tolist()},
            indent=2))

        chains = {}
        omegas = _floats(cfg["omegas"])
        jobs = ([("exact", None)] if cfg["run_exact"] else []) + [(f"omega_{_omega_tag(w)}", w) for w in omegas]
        for k, (name, w) in enumerate(jobs):
            stage = f"sample:{name}"
            seed = cfg["seed"] + k
            header = {"kind": name, "seed": seed, "config": config_hash(cfg), "build": build_id()}
            chain = sample_chain(data, cfg, clusters=clusters, exact_rows=exact_rows,
                                 theta_star=theta_star, hess_inv=hess_inv, exact=w is None,
                                 omega=w, seed=seed, telemetry=outdir / f"telemetry_{name}.log",
                                 header=header)
            write_chain(outdir / f"chain_{name}.csv", chain, data.columns,
                        _chain_header(cfg, chain, name, n=data.n))
            chains[name] = chain
            log(f"{name}: acceptance={chain.acceptance_rate:.3f} DE/iter={chain.de_mean:.1f}")

        stage = "diagnose"
        report = {"columns": data.columns, "n": data.n, "n_clusters": clusters.n_clusters,
                  "seed": cfg["seed"], "config": config_hash(cfg), "build": build_id(), "chains": {}}
        base = chains.get("exact")
        ref_name = f"omega_{_omega_tag(1.0)}"
        for name, chain in chains.items():
            entry = {"acceptance": chain.acceptance_rate, "de_mean": chain.de_mean,
                     "fraction_evaluated": chain.de_mean / data.n}
            if not chain.meta.get("exact"):
                entry["sigma_z_mean"] = chain.sigma_z_mean
                entry["sigma2_max_accepted"] = float(np.max(
                    (chain.sigma_z**2)[chain.accepted], initial=0.0))
            rep = efficiency_report(chain.kept, chain.de_mean)
            if base is not None and name != "exact":
                relative_report(rep, efficiency_report(base.kept, base.de_mean))
                entry["vs_exact"] = [t.__dict__ for t in mean_equality_test(chain.kept, base.kept)]
            if ref_name in chains and name not in ("exact", ref_name):
                entry["vs_omega_1"] = [t.__dict__ for t in mean_equality_test(chains[ref_name].kept, chain.kept)]
            entry["efficiency"] = rep.to_dict()
            report["chains"][name] = entry
        (outdir / "report.json").write_text(json.dumps(report, indent=2))
        log(f"report written to {outdir / 'report.json'}")
        return report
    except (ValidationError, NumericalError) as exc:
        raise StageError(stage, exc) from exc


COMMANDS = {
    "synth": cmd_synth,
    "cluster": cmd_cluster,
    "mode": cmd_mode,
    "sample": cmd_sample,
    "diagnose": cmd_diagnose,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2 if isinstance(exc.exc, NumericalError) else 1
    except ValidationError as exc:
        print(f"error [{args.command}] {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"error [{args.command}] {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
