"""Chain efficiency: inefficiency factors, effective draws, two-chain mean test."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from diffpmcmc.errors import NumericalError, ValidationError

MIN_DRAWS = 1000


def _autocov(x: np.ndarray, lag: int) -> float:
    n = x.shape[0]
    return float(np.dot(x[: n - lag], x[lag:]) / n)


def inefficiency_factor(draws) -> float:
    """Integrated autocorrelation time ``1 + 2 * sum_l rho_l``.

    The lag sum is truncated with Geyer's initial positive sequence:
    adjacent-lag pairs ``gamma(2k) + gamma(2k+1)`` are accumulated until the
    first pair that is not positive.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim != 1:
        raise ValidationError("inefficiency_factor expects a 1-D chain")
    n = x.shape[0]
    if n < MIN_DRAWS:
        raise ValidationError(f"need at least {MIN_DRAWS} draws, got {n}")
    x = x - x.mean()
    g0 = _autocov(x, 0)
    if not g0 > 0:
        raise NumericalError("chain is constant; inefficiency factor undefined")
    total = 0.0
    k = 0
    while 2 * k + 1 < n:
        pair = (g0 if k == 0 else _autocov(x, 2 * k)) + _autocov(x, 2 * k + 1)
        if pair <= 0:
            break
        total += pair
        k += 1
    return -1.0 + 2.0 * total / g0


def effective_draws(n_iters, if_value, de_mean):
    """``N / (IF * DE)``; works elementwise on arrays of IF values."""
    return n_iters / (np.asarray(if_value, dtype=float) * de_mean)


@dataclass
class EfficiencyReport:
    if_per_param: np.ndarray
    ed: np.ndarray
    de_mean: float
    n_draws: int
    rif: np.ndarray | None = None
    red: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def efficiency_report(draws, de_mean: float) -> EfficiencyReport:
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    ifs = np.array([inefficiency_factor(draws[:, j]) for j in range(draws.shape[1])])
    n = draws.shape[0]
    return EfficiencyReport(ifs, effective_draws(n, ifs, de_mean), float(de_mean), n)


def relative_report(pmcmc: EfficiencyReport, mcmc: EfficiencyReport):
    """``(RIF, RED)`` per parameter; also stored on ``pmcmc``."""
    if pmcmc.if_per_param.shape != mcmc.if_per_param.shape:
        raise ValidationError("reports have different parameter dimensions")
    if np.any(mcmc.if_per_param == 0) or np.any(mcmc.ed == 0):
        raise ValidationError("zero denominator in relative report")
    rif = pmcmc.if_per_param / mcmc.if_per_param
    red = pmcmc.ed / mcmc.ed
    pmcmc.rif, pmcmc.red = rif, red
    return rif, red


@dataclass
class MeanTest:
    difference: float
    se: float
    ci_low: float
    ci_high: float
    reject: bool


def mean_equality_test(chain_a, chain_b, level: float = 0.05) -> list[MeanTest]:
    """Per-coordinate test that two chains share the same mean.

    The standard error treats both chains as weakly stationary and
    independent: ``sqrt(var_a * IF_a / N_a + var_b * IF_b / N_b)``.  The
    two-sided interval has coverage ``1 - level``; ``reject`` is set when it
    excludes zero.
    """
    a = np.asarray(chain_a, dtype=float)
    b = np.asarray(chain_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValidationError("chains have different parameter dimensions")
    if min(a.shape[0], b.shape[0]) < MIN_DRAWS:
        raise ValidationError(f"chains must have at least {MIN_DRAWS} draws")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    zcrit = norm.ppf(1 - level / 2)
    out = []
    for j in range(a.shape[1]):
        xa, xb = a[:, j], b[:, j]
        var_a = xa.var(ddof=1) * inefficiency_factor(xa) / xa.shape[0]
        var_b = xb.var(ddof=1) * inefficiency_factor(xb) / xb.shape[0]
        diff = float(xa.mean() - xb.mean())
        se = float(np.sqrt(var_a + var_b))
        lo, hi = diff - zcrit * se, diff + zcrit * se
        out.append(MeanTest(diff, se, lo, hi, bool(lo > 0 or hi < 0)))
    return out
