"""Difference estimator of the log-likelihood.

The log-likelihood over the estimated stratum ``F`` (``n`` rows) is split as
``l = w + d`` where ``w = sum_k w_k`` is the total of the second-order
Taylor proxies around the cluster centroids and ``d = sum_k (l_k - w_k)``.
``w`` is computed exactly from the cluster moments in ``O(N_C)``; ``d`` is
estimated from a simple random sample with replacement ``u`` of size ``m``:

    d_hat   = (n / m) * sum_i d_{u_i}
    l_hat   = w + d_hat + (exact-stratum total)
    sigma2  = n**2 / m * s2,    s2 = sum_S (d_k - mean_S)**2 / (m - 1)

and the value entering the acceptance ratio is ``l_hat - sigma2 / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffpmcmc.clustering import ClusterModel
from diffpmcmc.data import Dataset
from diffpmcmc.errors import NumericalError, ValidationError
from diffpmcmc.model import SingleIndexModel


@dataclass
class Subsample:
    """Positions drawn with replacement; see :func:`draw_subsample`."""

    u: np.ndarray

    @property
    def m(self) -> int:
        return int(self.u.shape[0])


def draw_subsample(rng: np.random.Generator, n: int, m: int) -> Subsample:
    """``m`` iid uniform draws on ``0..n-1``."""
    if m < 2:
        raise ValidationError(f"subsample size must be at least 2, got {m}")
    if n < 1:
        raise ValidationError(f"population size must be positive, got {n}")
    return Subsample(rng.integers(0, n, size=m, dtype=np.int64))


@dataclass
class ProxyTerms:
    """Centroid log-densities, gradients and Hessians at one parameter value."""

    theta: np.ndarray
    l: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    w: float


@dataclass
class LogLikEstimate:
    l_hat: float
    sigma2_hat: float
    corrected: float
    de_count: int
    d_values: np.ndarray
    u: np.ndarray  # dataset rows, in draw order
    w: float
    d_hat: float
    exact_total: float
    d_mean: float
    d_m2: float
    proxy: ProxyTerms = field(repr=False)

    @property
    def m(self) -> int:
        return int(self.u.shape[0])

    @property
    def s2(self) -> float:
        return self.d_m2 / (self.m - 1)


class DifferenceEstimator:
    """Bind a dataset, its clustering and a model for repeated estimation.

    Parameters
    ----------
    data : Dataset
    clusters : ClusterModel
        Built on the estimated stratum only.
    model : SingleIndexModel
    exact_rows : int array, optional
        Rows always summed exactly.  Together with the clustered rows they
        must partition the dataset.
    freeze_hessian_at : array, optional
        Use centroid Hessians evaluated once at this parameter value
        instead of at every ``theta``.
    """

    def __init__(
        self,
        data: Dataset,
        clusters: ClusterModel,
        model: SingleIndexModel,
        exact_rows=None,
        freeze_hessian_at=None,
    ):
        if clusters.n_total != data.n:
            raise ValidationError(
                f"cluster model covers {clusters.n_total} rows but dataset has {data.n}"
            )
        if clusters.dim != data.p + 1:
            raise ValidationError("cluster model dimension does not match the dataset")
        self.data = data
        self.clusters = clusters
        self.model = model
        self.est_rows = clusters.rows
        exact = np.empty(0, np.int64) if exact_rows is None else np.asarray(exact_rows, np.int64)
        self.exact_rows = np.sort(exact)
        if np.any(clusters.assignment[self.exact_rows] >= 0):
            raise ValidationError("exact-stratum rows must not be clustered")
        if self.est_rows.size + self.exact_rows.size != data.n or np.unique(self.exact_rows).size != self.exact_rows.size:
            raise ValidationError("clustered rows and exact stratum must partition the dataset")
        self.n_est = int(self.est_rows.size)
        self._Z = data.Z
        self._yc = np.ascontiguousarray(clusters.centroids[:, 0])
        self._Xc = np.ascontiguousarray(clusters.centroids[:, 1:])
        self._counts = clusters.counts.astype(float)
        self._exact_y = data.y[self.exact_rows]
        self._exact_X = data.X[self.exact_rows]
        self._frozen = None
        if freeze_hessian_at is not None:
            _, _, hess = self._centroid_derivs(np.asarray(freeze_hessian_at, float))
            self._frozen = (hess, 0.5 * float(np.einsum("kij,kij->", hess, clusters.second_moments)))

    def _centroid_derivs(self, theta):
        try:
            return self.model.grad_hess_z(self._yc, self._Xc, theta)
        except NumericalError as exc:
            raise NumericalError(f"centroid evaluation failed: {exc}".replace("row", "centroid")) from None

    def proxy(self, theta) -> ProxyTerms:
        """Proxy total ``w`` from the centroid Taylor expansions."""
        theta = np.asarray(theta, dtype=float)
        l, grad, hess = self._centroid_derivs(theta)
        cm = self.clusters
        w = np.sum(self._counts * l)
        w += np.sum(grad * cm.first_moments)
        if self._frozen is None:
            w += 0.5 * np.sum(hess * cm.second_moments)
        else:
            hess = self._frozen[0]
            w += self._frozen[1]
        return ProxyTerms(theta=theta, l=l, grad=grad, hess=hess, w=float(w))

    def evaluate_w(self, theta):
        """``(w, density_evaluations)``."""
        return self.proxy(theta).w, self.clusters.n_clusters

    def proxy_rows(self, proxy: ProxyTerms, rows) -> np.ndarray:
        """Per-row proxies ``w_k`` for dataset ``rows``."""
        j = self.clusters.assignment[rows]
        b = self._Z[rows] - self.clusters.centroids[j]
        lin = np.einsum("ki,ki->k", proxy.grad[j], b)
        quad = np.einsum("ki,kij,kj->k", b, proxy.hess[j], b)
        return proxy.l[j] + lin + 0.5 * quad

    def differences(self, proxy: ProxyTerms, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        lk = self.model.log_density(self.data.y[rows], self.data.X[rows], proxy.theta)
        return lk - self.proxy_rows(proxy, rows)

    def exact_total(self, theta) -> float:
        if self.exact_rows.size == 0:
            return 0.0
        return float(np.sum(self.model.log_density(self._exact_y, self._exact_X, theta)))

    def _check_rows(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self.data.n):
            raise ValidationError("subsample index out of range")
        if np.any(self.clusters.assignment[rows] < 0):
            raise ValidationError("subsample index lies in the exact stratum")
        return rows

    def estimate(self, theta, rows, proxy: ProxyTerms | None = None) -> LogLikEstimate:
        """Estimate at ``theta`` from the subsample of dataset ``rows``."""
        rows = self._check_rows(rows)
        m = rows.shape[0]
        if m < 2:
            raise ValidationError(f"subsample size must be at least 2, got {m}")
        if proxy is None:
            proxy = self.proxy(theta)
        d = self.differences(proxy, rows)
        ds = d[np.argsort(rows, kind="stable")]
        mean = np.sum(ds) / m
        m2 = float(np.sum((ds - mean) ** 2))
        return self._assemble(proxy, rows, d, float(mean), m2, self.exact_total(proxy.theta))

    def _assemble(self, proxy, rows, d, mean, m2, exact) -> LogLikEstimate:
        m = rows.shape[0]
        n = self.n_est
        d_hat = n * mean
        l_hat = proxy.w + d_hat + exact
        sigma2 = n * n / m * (m2 / (m - 1))
        if not (np.isfinite(l_hat) and np.isfinite(sigma2)):
            raise NumericalError("non-finite log-likelihood estimate")
        return LogLikEstimate(
            l_hat=float(l_hat),
            sigma2_hat=float(sigma2),
            corrected=float(l_hat - sigma2 / 2),
            de_count=self.clusters.n_clusters + m + int(self.exact_rows.size),
            d_values=d,
            u=rows,
            w=proxy.w,
            d_hat=float(d_hat),
            exact_total=exact,
            d_mean=mean,
            d_m2=m2,
            proxy=proxy,
        )

    def augment(self, est: LogLikEstimate, extra_rows) -> LogLikEstimate:
        """Add rows to the subsample of ``est`` with a pairwise mean/variance merge."""
        extra = self._check_rows(extra_rows)
        if extra.size == 0:
            return est
        d_new = self.differences(est.proxy, extra)
        ma, mb = est.m, extra.size
        mean_b = float(np.sum(d_new[np.argsort(extra, kind="stable")]) / mb)
        m2_b = float(np.sum((d_new - mean_b) ** 2))
        tot = ma + mb
        delta = mean_b - est.d_mean
        mean = est.d_mean + delta * mb / tot
        m2 = est.d_m2 + m2_b + delta * delta * ma * mb / tot
        return self._assemble(
            est.proxy,
            np.concatenate([est.u, extra]),
            np.concatenate([est.d_values, d_new]),
            mean,
            m2,
            est.exact_total,
        )

    def full_loglik(self, theta) -> float:
        """Exact log-likelihood over all rows (for checks and baselines)."""
        return self.model.loglik(self.data.y, self.data.X, theta)


def evaluate_w(cluster_model: ClusterModel, model: SingleIndexModel, theta):
    """Proxy total ``w`` and the number of density evaluations ``N_C``."""
    yc = cluster_model.centroids[:, 0]
    Xc = cluster_model.centroids[:, 1:]
    l, grad, hess = model.grad_hess_z(yc, Xc, theta)
    w = (
        np.sum(cluster_model.counts * l)
        + np.sum(grad * cluster_model.first_moments)
        + 0.5 * np.sum(hess * cluster_model.second_moments)
    )
    return float(w), cluster_model.n_clusters


def estimate(cluster_model, dataset, model, theta, rows, exact_stratum=None) -> LogLikEstimate:
    """One-shot estimate; see :meth:`DifferenceEstimator.estimate`."""
    return DifferenceEstimator(dataset, cluster_model, model, exact_stratum).estimate(theta, rows)

