"""Metropolis-Hastings on the exact and on the estimated likelihood.

Random streams
--------------
Each chain owns four independent counter-based generators spawned from
one seed: proposal noise, subsample draws, acceptance uniforms and the
subsample-refresh coin.  The exact sampler consumes only the first and
third, in the same order as PMCMC, so a perfect proxy (every cluster a
singleton) reproduces the exact chain draw for draw.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import optimize

from diffpmcmc.clustering import ClusterModel
from diffpmcmc.data import Dataset
from diffpmcmc.errors import NumericalError, ValidationError
from diffpmcmc.estimator import DifferenceEstimator, draw_subsample
from diffpmcmc.model import SingleIndexModel


class Streams(NamedTuple):
    proposal: np.random.Generator
    subsample: np.random.Generator
    accept: np.random.Generator
    refresh: np.random.Generator


def make_streams(seed: int) -> Streams:
    children = np.random.SeedSequence(seed).spawn(4)
    return Streams(*(np.random.Generator(np.random.Philox(c)) for c in children))


@dataclass(frozen=True)
class GaussianPrior:
    """Spherical ``N(0, tau * I)``."""

    tau: float = 10.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"prior variance must be positive, got {self.tau}")

    def logpdf(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        k = theta.shape[0]
        return float(-0.5 * theta @ theta / self.tau - 0.5 * k * math.log(2 * math.pi * self.tau))

    def grad(self, theta):
        return -np.asarray(theta, dtype=float) / self.tau

    def hess(self, theta):
        return -np.eye(np.asarray(theta).shape[0]) / self.tau


@dataclass
class ProposalSpec:
    """Random-walk (``rwm``) or independence Student-t (``imh``) proposal.

    ``scale`` defaults to ``2.38**2 / p`` for the random walk.
    """

    kind: str
    mode: np.ndarray
    hess_inv: np.ndarray
    scale: float | None = None
    dof: int = 10

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("rwm", "imh"):
            raise ValidationError(f"proposal kind must be 'rwm' or 'imh', got {self.kind!r}")
        self.mode = np.asarray(self.mode, dtype=float)
        self.hess_inv = np.asarray(self.hess_inv, dtype=float)
        p = self.mode.shape[0]
        if self.hess_inv.shape != (p, p) or not np.allclose(self.hess_inv, self.hess_inv.T):
            raise ValidationError("proposal covariance must be a symmetric p x p matrix")
        try:
            self.chol = np.linalg.cholesky(self.hess_inv)
        except np.linalg.LinAlgError:
            raise ValidationError("proposal covariance is not positive definite") from None
        if self.scale is None:
            self.scale = 2.38**2 / p
        if not self.scale > 0:
            raise ValidationError("proposal scale must be positive")
        if self.kind == "imh" and not self.dof > 2:
            raise ValidationError("Student-t proposal needs more than 2 degrees of freedom")
        self._log_det = 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def dim(self) -> int:
        return int(self.mode.shape[0])

    def t_logpdf(self, theta) -> float:
        """Log-density of the multivariate ``t_dof(mode, hess_inv)``."""
        p, nu = self.dim, self.dof
        r = np.linalg.solve(self.chol, np.asarray(theta, dtype=float) - self.mode)
        maha = float(r @ r)
        return (
            math.lgamma((nu + p) / 2) - math.lgamma(nu / 2)
            - 0.5 * p * math.log(nu * math.pi) - 0.5 * self._log_det
            - 0.5 * (nu + p) * math.log1p(maha / nu)
        )


def propose(proposal: ProposalSpec, theta_c, rng: np.random.Generator):
    """Draw ``theta_p`` and return it with ``log q(theta_c|theta_p) - log q(theta_p|theta_c)``."""
    z = rng.standard_normal(proposal.dim)
    if proposal.kind == "rwm":
        theta_p = theta_c + math.sqrt(proposal.scale) * (proposal.chol @ z)
        return theta_p, 0.0
    chi2 = rng.chisquare(proposal.dof)
    theta_p = proposal.mode + (proposal.chol @ z) / math.sqrt(chi2 / proposal.dof)
    return theta_p, proposal.t_logpdf(theta_c) - proposal.t_logpdf(theta_p)


def log_acceptance(logl_p, logl_c, log_prior_p, log_prior_c, log_q_ratio) -> float:
    """Log of the Metropolis-Hastings ratio before truncation at 1."""
    vals = (logl_p, logl_c, log_prior_p, log_prior_c, log_q_ratio)
    if any(math.isnan(v) for v in vals):
        raise NumericalError("NaN in the acceptance ratio")
    if logl_c == -math.inf or log_prior_c == -math.inf:
        raise NumericalError("current state has zero density")
    return (logl_p + log_prior_p) - (logl_c + log_prior_c) + log_q_ratio


def accept_step(logl_p, logl_c, log_prior_p, log_prior_c, log_q_ratio, rng) -> bool:
    """Accept with probability ``min(1, exp(delta))``; always consumes one uniform."""
    delta = log_acceptance(logl_p, logl_c, log_prior_p, log_prior_c, log_q_ratio)
    v = rng.random()
    if delta >= 0:
        return True
    return v < math.exp(delta)


@dataclass
class SamplerConfig:
    n_iter: int
    burn_in: int = 0
    omega: float = 1.0
    v_max: float = 1.0
    m0: int = 100
    adaptive: bool = False
    seed: int = 0
    prior_tau: float = 10.0
    max_augment_rounds: int = 20

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValidationError("n_iter must be positive")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValidationError("burn_in must lie in [0, n_iter)")
        if not 0 < self.omega <= 1:
            raise ValidationError(f"omega must lie in (0, 1], got {self.omega}")
        if not self.v_max > 0:
            raise ValidationError("v_max must be positive")
        if self.m0 < 2:
            raise ValidationError("m0 must be at least 2")


@dataclass
class ChainOutput:
    """Per-iteration record of a chain; ``draws[burn_in:]`` are the kept draws."""

    draws: np.ndarray
    accepted: np.ndarray
    sigma_z: np.ndarray
    de: np.ndarray
    m: np.ndarray
    u_refreshed: np.ndarray
    burn_in: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def kept(self) -> np.ndarray:
        return self.draws[self.burn_in:]

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted[self.burn_in:].mean())

    @property
    def de_mean(self) -> float:
        return float(self.de[self.burn_in:].mean())

    @property
    def sigma_z_mean(self) -> float:
        return float(np.nanmean(self.sigma_z[self.burn_in:]))


def fraction_evaluated(chain: ChainOutput, n: int) -> float:
    """Average density evaluations per iteration as a fraction of ``n``."""
    return float(np.mean(chain.de)) / n


def _empty_chain(n_iter, p, burn_in):
    return ChainOutput(
        draws=np.empty((n_iter, p)),
        accepted=np.zeros(n_iter, dtype=bool),
        sigma_z=np.full(n_iter, np.nan),
        de=np.zeros(n_iter, dtype=np.int64),
        m=np.zeros(n_iter, dtype=np.int64),
        u_refreshed=np.zeros(n_iter, dtype=bool),
        burn_in=burn_in,
    )


def run_mcmc_exact(
    data: Dataset,
    model: SingleIndexModel,
    prior,
    proposal: ProposalSpec,
    config: SamplerConfig,
    theta0=None,
    callback: Callable | None = None,
) -> ChainOutput:
    """Metropolis-Hastings with the full-data log-likelihood."""
    rng = make_streams(config.seed)
    theta_c = np.array(proposal.mode if theta0 is None else theta0, dtype=float)
    logl_c = model.loglik(data.y, data.X, theta_c)
    lp_c = prior.logpdf(theta_c)
    out = _empty_chain(config.n_iter, theta_c.shape[0], config.burn_in)
    for i in range(config.n_iter):
        theta_p, lqr = propose(proposal, theta_c, rng.proposal)
        logl_p = model.loglik(data.y, data.X, theta_p)
        lp_p = prior.logpdf(theta_p)
        if accept_step(logl_p, logl_c, lp_p, lp_c, lqr, rng.accept):
            theta_c, logl_c, lp_c = theta_p, logl_p, lp_p
            out.accepted[i] = True
        out.draws[i] = theta_c
        out.de[i] = data.n
        if callback is not None:
            callback(i, out)
    return out


def run_pmcmc(
    data: Dataset,
    cluster_model: ClusterModel,
    model: SingleIndexModel,
    prior,
    proposal: ProposalSpec,
    config: SamplerConfig,
    exact_rows=None,
    theta0=None,
    estimator: DifferenceEstimator | None = None,
    callback: Callable | None = None,
) -> ChainOutput:
    """Pseudo-marginal MH with the difference estimator.

    Each iteration refreshes the subsample with probability ``omega``
    (forced to 1 during burn-in), proposes ``theta``, estimates the
    log-likelihood and, when ``adaptive``, grows the subsample until the
    estimated variance is at most ``v_max``.  A fresh subsample always has
    ``m0`` rows; a grown subsample lives on only in ``u_c`` until the next
    refresh.  Acceptance uses the
    bias-corrected estimate at both the proposed and the current state;
    the current value is carried from its own acceptance and never
    recomputed.
    """
    if estimator is None:
        estimator = DifferenceEstimator(data, cluster_model, model, exact_rows)
    rng = make_streams(config.seed)
    est_rows = estimator.est_rows
    n_est = estimator.n_est
    if n_est < 1:
        raise ValidationError("the estimated stratum is empty")

    theta_c = np.array(proposal.mode if theta0 is None else theta0, dtype=float)
    m = config.m0
    u_c = est_rows[draw_subsample(rng.subsample, n_est, m).u]
    logl_c = estimator.estimate(theta_c, u_c).corrected
    lp_c = prior.logpdf(theta_c)
    out = _empty_chain(config.n_iter, theta_c.shape[0], config.burn_in)
    n_warned = 0

    for i in range(config.n_iter):
        omega = 1.0 if i < config.burn_in else config.omega
        refresh = rng.refresh.random() < omega
        if refresh:
            u_p = est_rows[draw_subsample(rng.subsample, n_est, m).u]
        else:
            u_p = u_c
        theta_p, lqr = propose(proposal, theta_c, rng.proposal)
        est = estimator.estimate(theta_p, u_p)

        rounds = 0
        while config.adaptive and est.sigma2_hat > config.v_max:
            if est.m >= n_est:
                n_warned += 1
                break
            rounds += 1
            if rounds > config.max_augment_rounds:
                raise NumericalError(
                    f"subsample augmentation did not reach v_max={config.v_max} "
                    f"after {config.max_augment_rounds} rounds at iteration {i}"
                )
            m_star = math.ceil(n_est * n_est * est.s2 / config.v_max)
            if m_star > n_est:
                n_warned += 1
                m_star = n_est
            m_star = max(m_star, est.m + 1)
            extra = est_rows[rng.subsample.integers(0, n_est, size=m_star - est.m, dtype=np.int64)]
            est = estimator.augment(est, extra)

        lp_p = prior.logpdf(theta_p)
        if accept_step(est.corrected, logl_c, lp_p, lp_c, lqr, rng.accept):
            theta_c, u_c, logl_c, lp_c = theta_p, est.u, est.corrected, lp_p
            out.accepted[i] = True
        out.draws[i] = theta_c
        out.sigma_z[i] = math.sqrt(est.sigma2_hat)
        out.de[i] = est.de_count
        out.m[i] = est.m
        out.u_refreshed[i] = refresh
        if callback is not None:
            callback(i, out)

    if n_warned:
        warnings.warn(
            f"required subsample size exceeded the stratum size ({n_est}) in "
            f"{n_warned} augmentation steps; capped",
            RuntimeWarning,
        )
    out.meta.update(n_clusters=cluster_model.n_clusters if cluster_model is not None else None)
    return out


def find_mode(log_post, theta0, grad=None, hess=None, tol=1e-6, max_iter=200):
    """Maximize ``log_post`` and return ``(theta_star, inverse negative Hessian)``.

    With ``grad`` and ``hess`` supplied, runs damped Newton iterations until
    the gradient norm drops below ``tol``.  Otherwise falls back on BFGS and
    a central-difference Hessian.
    """
    theta = np.array(theta0, dtype=float)
    if grad is None or hess is None:
        res = optimize.minimize(lambda t: -log_post(t), theta, method="BFGS",
                                options={"gtol": tol * 1e-2, "maxiter": 10_000})
        theta = res.x
        g = _fd_grad(log_post, theta)
        # finite-difference noise grows with |log_post|, so the test is relative
        if np.linalg.norm(g) >= tol * max(1.0, abs(log_post(theta))):
            raise NumericalError(
                f"mode search did not converge (|grad| = {np.linalg.norm(g):.2e}); try rescaling covariates"
            )
        H = _fd_hess(log_post, theta)
        return theta, np.linalg.inv(-H)

    f = log_post(theta)
    for _ in range(max_iter):
        g = grad(theta)
        if np.linalg.norm(g) < tol:
            break
        H = hess(theta)
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = g
        t = 1.0
        while True:
            cand = theta + t * step
            f_new = log_post(cand)
            if f_new >= f - 1e-12 * abs(f) or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, f_new
    else:
        raise NumericalError(
            f"mode search hit {max_iter} iterations (|grad| = {np.linalg.norm(grad(theta)):.2e}); "
            "try rescaling covariates"
        )
    H = hess(theta)
    Hn = -0.5 * (H + H.T)
    return theta, np.linalg.inv(Hn)


def _fd_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _fd_hess(f, x, h=1e-4):
    k = x.size
    H = np.empty((k, k))
    for i in range(k):
        e = np.zeros_like(x)
        e[i] = h
        H[i] = (_fd_grad(f, x + e) - _fd_grad(f, x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def posterior_mode(data: Dataset, model: SingleIndexModel, prior, theta0=None):
    """Posterior mode and inverse negative Hessian for a single-index model."""

    def log_post(t):
        return model.loglik(data.y, data.X, t) + prior.logpdf(t)

    def grad(t):
        return model.theta_derivatives(data.y, data.X, t)[1] + prior.grad(t)

    def hess(t):
        return model.theta_derivatives(data.y, data.X, t)[2] + prior.hess(t)

    theta0 = np.zeros(data.p) if theta0 is None else theta0
    return find_mode(log_post, theta0, grad, hess)


def tune_subsample_size(estimator: DifferenceEstimator, theta, target_sigma2: float,
                        seed: int = 0, pilot: int = 1000) -> int:
    """Subsample size giving an estimated variance near ``target_sigma2`` at ``theta``."""
    rng = np.random.default_rng(seed)
    pilot = min(max(pilot, 2), max(estimator.n_est, 2))
    rows = estimator.est_rows[draw_subsample(rng, estimator.n_est, pilot).u]
    est = estimator.estimate(theta, rows)
    n = estimator.n_est
    return int(min(max(math.ceil(n * n * est.s2 / target_sigma2), 2), n))
