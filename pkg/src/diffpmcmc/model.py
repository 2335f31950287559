"""Per-observation log-densities and their derivatives in data space.

Every model here is a *single-index* model: the log-density of an
observation ``z = (y, x)`` depends on ``x`` only through the linear
predictor ``a = x @ beta``.  A model therefore only has to supply the
scalar function ``l(y, a)`` and its partial derivatives; the data-space
gradient and Hessian, and the parameter-space gradient and Hessian used
for mode finding, are assembled from those by the chain rule:

    dl/dy       = l_y
    dl/dx       = l_a * beta
    d2l/dy2     = l_yy
    d2l/dy dx   = l_ya * beta
    d2l/dx dx'  = l_aa * beta beta'

Logistic sign convention
------------------------
:class:`LogisticModel` uses ``P(y = 1 | x) = 1 / (1 + exp(x @ beta))``,
which is the *negation* of the usual convention.  A coefficient that
increases the usual log-odds of ``y = 1`` carries the opposite sign here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, gammaln, digamma, polygamma

from diffpmcmc.errors import NumericalError, ValidationError

Array = np.ndarray


def _check_finite(values: Array, what: str) -> None:
    ok = np.isfinite(values)
    if not np.all(ok):
        bad = np.argwhere(~ok)[0]
        row = int(bad[0]) if bad.size else 0
        raise NumericalError(f"non-finite {what} at row {row}")


def _linear_predictor(X: Array, beta: Array) -> Array:
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if X.ndim != 2 or beta.ndim != 1 or X.shape[1] != beta.shape[0]:
        raise ValidationError(
            f"covariate dimension {X.shape[-1] if X.ndim else 0} does not match "
            f"parameter dimension {beta.shape[0] if beta.ndim else 0}"
        )
    return X @ beta


class SingleIndexModel:
    """Base class: subclasses implement :meth:`terms`."""

    name = "single-index"

    def terms(self, y: Array, a: Array, order: int = 2):
        """Return ``l`` and its partials in ``(y, a)``.

        ``order=0`` returns ``(l,)``; ``order=1`` returns ``(l, l_y, l_a)``;
        ``order=2`` returns ``(l, l_y, l_a, l_yy, l_ya, l_aa)``.
        """
        raise NotImplementedError

    def log_density(self, y: Array, X: Array, beta: Array) -> Array:
        """Vector of per-row log-densities ``l(z_k; beta)``."""
        a = _linear_predictor(X, beta)
        (l,) = self.terms(np.asarray(y, dtype=float), a, order=0)
        _check_finite(l, "log-density")
        return l

    def loglik(self, y: Array, X: Array, beta: Array) -> float:
        return float(np.sum(self.log_density(y, X, beta)))

    def grad_hess_z(self, y: Array, X: Array, beta: Array):
        """Log-density, data-space gradient and Hessian for each row.

        Returns arrays of shape ``(n,)``, ``(n, p+1)`` and ``(n, p+1, p+1)``.
        Coordinate 0 is the response, coordinates ``1..p`` the covariates.
        """
        beta = np.asarray(beta, dtype=float)
        a = _linear_predictor(X, beta)
        l, l_y, l_a, l_yy, l_ya, l_aa = self.terms(np.asarray(y, dtype=float), a, order=2)
        n, p = a.shape[0], beta.shape[0]
        grad = np.empty((n, p + 1))
        grad[:, 0] = l_y
        grad[:, 1:] = l_a[:, None] * beta
        hess = np.empty((n, p + 1, p + 1))
        hess[:, 0, 0] = l_yy
        cross = l_ya[:, None] * beta
        hess[:, 0, 1:] = cross
        hess[:, 1:, 0] = cross
        hess[:, 1:, 1:] = l_aa[:, None, None] * np.outer(beta, beta)
        _check_finite(l, "log-density")
        _check_finite(grad, "data-space gradient")
        _check_finite(hess, "data-space Hessian")
        return l, grad, hess

    def theta_derivatives(self, y: Array, X: Array, beta: Array):
        """Summed log-likelihood with its gradient and Hessian in ``beta``."""
        X = np.asarray(X, dtype=float)
        a = _linear_predictor(X, beta)
        l, _, l_a, _, _, l_aa = self.terms(np.asarray(y, dtype=float), a, order=2)
        _check_finite(l, "log-density")
        grad = X.T @ l_a
        hess = (X * l_aa[:, None]).T @ X
        return float(np.sum(l)), grad, hess


class LogisticModel(SingleIndexModel):
    """Bernoulli response with ``P(y=1|x) = 1/(1 + exp(x @ beta))``.

    Treating ``y`` as continuous, ``l(y, a) = -y*a - log(1 + exp(-a))``,
    which reduces to the two Bernoulli branches at ``y = 0`` and ``y = 1``.
    """

    name = "logistic"

    def terms(self, y, a, order=2):
        l = -y * a - np.logaddexp(0.0, -a)
        if order == 0:
            return (l,)
        s_neg = expit(-a)
        l_y = -a
        l_a = s_neg - y
        if order == 1:
            return l, l_y, l_a
        l_yy = np.zeros_like(a)
        l_ya = -np.ones_like(a)
        l_aa = -expit(a) * s_neg
        return l, l_y, l_a, l_yy, l_ya, l_aa


@dataclass(frozen=True)
class GlmSpec:
    """Exponential-family GLM ``p(y|x) = h(y) g(t) exp(b(t) T(y))``.

    ``t = kinv(x @ beta)`` is the mean.  Each scalar function comes with its
    first and second derivatives; all callables must accept numpy arrays.
    """

    name: str
    h: Callable
    dh: Callable
    d2h: Callable
    g: Callable
    dg: Callable
    d2g: Callable
    b: Callable
    db: Callable
    d2b: Callable
    T: Callable
    dT: Callable
    d2T: Callable
    kinv: Callable
    dkinv: Callable
    d2kinv: Callable

    def validate(self, y_probe, t_probe, a_probe, step=1e-5, rtol=1e-5) -> None:
        """Check every derivative pair against central finite differences.

        Raises :class:`ValidationError` naming the first pair that disagrees.
        """
        pairs = [
            ("h", self.h, self.dh, self.d2h, y_probe),
            ("g", self.g, self.dg, self.d2g, t_probe),
            ("b", self.b, self.db, self.d2b, t_probe),
            ("T", self.T, self.dT, self.d2T, y_probe),
            ("kinv", self.kinv, self.dkinv, self.d2kinv, a_probe),
        ]
        for label, f, df, d2f, probe in pairs:
            x = np.asarray(probe, dtype=float)
            for name, fun, deriv in ((label, f, df), (label + "'", df, d2f)):
                fd = (fun(x + step) - fun(x - step)) / (2 * step)
                an = deriv(x)
                scale = np.maximum(np.abs(fd), 1.0)
                err = np.max(np.abs(an - fd) / scale)
                if not err < rtol:
                    raise ValidationError(
                        f"{self.name}: derivative of {name} disagrees with finite "
                        f"differences (relative error {err:.2e})"
                    )


def _nonzero(values, fname):
    if np.any(values == 0):
        raise NumericalError(f"division by zero: {fname} vanishes at the probe point")
    return values


def glm_terms(spec: GlmSpec, y, a, order=2):
    """Partials of ``l(y, a)`` for a :class:`GlmSpec`.

    The second derivatives are the exact chain-rule expressions:

        l_yy = h''/h - (h'/h)**2 + b T''
        l_ya = b' kinv' T'
        l_aa = (g''/g - (g'/g)**2) kinv'**2 + (g'/g) kinv'' + b'' T kinv'**2 + b' T kinv''
    """
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    t = spec.kinv(a)
    hv = _nonzero(spec.h(y), "h(y)")
    gv = _nonzero(spec.g(t), "g(theta)")
    bv, Tv = spec.b(t), spec.T(y)
    l = np.log(hv) + np.log(gv) + bv * Tv
    if order == 0:
        return (l,)
    k1 = spec.dkinv(a)
    h1, g1, b1, T1 = spec.dh(y) / hv, spec.dg(t) / gv, spec.db(t), spec.dT(y)
    l_y = h1 + bv * T1
    l_a = (g1 + b1 * Tv) * k1
    if order == 1:
        return l, l_y, l_a
    k2 = spec.d2kinv(a)
    h2, g2 = spec.d2h(y) / hv, spec.d2g(t) / gv
    l_yy = h2 - h1**2 + bv * spec.d2T(y)
    l_ya = b1 * k1 * T1
    l_aa = (g2 - g1**2) * k1**2 + g1 * k2 + spec.d2b(t) * Tv * k1**2 + b1 * Tv * k2
    return l, l_y, l_a, l_yy, l_ya, l_aa


class GlmModel(SingleIndexModel):
    """Generic single-index model driven by a :class:`GlmSpec`."""

    def __init__(self, spec: GlmSpec):
        self.spec = spec
        self.name = spec.name

    def terms(self, y, a, order=2):
        return glm_terms(self.spec, y, a, order)


def glm_grad_hess(spec: GlmSpec, y: float, x, beta):
    """Data-space gradient and Hessian of one observation under ``spec``."""
    _, grad, hess = GlmModel(spec).grad_hess_z(
        np.atleast_1d(np.asarray(y, dtype=float)), np.atleast_2d(x), beta
    )
    return grad[0], hess[0]


def _one(v):
    return np.ones_like(np.asarray(v, dtype=float))


def _zero(v):
    return np.zeros_like(np.asarray(v, dtype=float))


def _ident(v):
    return np.asarray(v, dtype=float)


def gaussian_spec(sigma: float = 1.0) -> GlmSpec:
    """Normal response with known ``sigma`` and identity link."""
    s2 = sigma * sigma
    c = 1.0 / np.sqrt(2 * np.pi * s2)

    def h(y):
        return c * np.exp(-0.5 * y**2 / s2)

    def g(t):
        return np.exp(-0.5 * t**2 / s2)

    return GlmSpec(
        name=f"gaussian(sigma={sigma:g})",
        h=h,
        dh=lambda y: -y / s2 * h(y),
        d2h=lambda y: (y**2 / s2**2 - 1.0 / s2) * h(y),
        g=g,
        dg=lambda t: -t / s2 * g(t),
        d2g=lambda t: (t**2 / s2**2 - 1.0 / s2) * g(t),
        b=lambda t: _ident(t) / s2,
        db=lambda t: _one(t) / s2,
        d2b=_zero,
        T=_ident,
        dT=_one,
        d2T=_zero,
        kinv=_ident,
        dkinv=_one,
        d2kinv=_zero,
    )


def poisson_log_spec() -> GlmSpec:
    """Poisson response with log link; ``y`` is differentiated as continuous."""

    def h(y):
        return np.exp(-gammaln(y + 1.0))

    def dh(y):
        return -digamma(y + 1.0) * h(y)

    def d2h(y):
        return (digamma(y + 1.0) ** 2 - polygamma(1, y + 1.0)) * h(y)

    return GlmSpec(
        name="poisson(log)",
        h=h,
        dh=dh,
        d2h=d2h,
        g=lambda t: np.exp(-t),
        dg=lambda t: -np.exp(-t),
        d2g=lambda t: np.exp(-t),
        b=np.log,
        db=lambda t: 1.0 / t,
        d2b=lambda t: -1.0 / t**2,
        T=_ident,
        dT=_one,
        d2T=_zero,
        kinv=np.exp,
        dkinv=np.exp,
        d2kinv=np.exp,
    )


def bernoulli_spec() -> GlmSpec:
    """Bernoulli response under the same sign convention as :class:`LogisticModel`."""
    return GlmSpec(
        name="bernoulli",
        h=_one,
        dh=_zero,
        d2h=_zero,
        g=lambda t: 1.0 - t,
        dg=lambda t: -_one(t),
        d2g=_zero,
        b=lambda t: np.log(t / (1.0 - t)),
        db=lambda t: 1.0 / (t * (1.0 - t)),
        d2b=lambda t: (2 * t - 1.0) / (t * (1.0 - t)) ** 2,
        T=_ident,
        dT=_one,
        d2T=_zero,
        kinv=lambda a: expit(-a),
        dkinv=lambda a: -expit(a) * expit(-a),
        d2kinv=lambda a: expit(a) * expit(-a) * (expit(a) - expit(-a)),
    )


class GaussianLinearModel(GlmModel):
    """Linear regression with known noise scale (conjugate test target)."""

    def __init__(self, sigma: float = 1.0):
        super().__init__(gaussian_spec(sigma))
        self.sigma = sigma
        self.name = "gaussian"

    def terms(self, y, a, order=2):
        s2 = self.sigma**2
        r = y - a
        l = -0.5 * r**2 / s2 - 0.5 * np.log(2 * np.pi * s2)
        if order == 0:
            return (l,)
        l_y, l_a = -r / s2, r / s2
        if order == 1:
            return l, l_y, l_a
        full = np.full_like(a, 1.0 / s2)
        return l, l_y, l_a, -full, full, -full


MODELS = {
    "logistic": LogisticModel,
    "gaussian": GaussianLinearModel,
    "poisson": lambda: GlmModel(poisson_log_spec()),
}


def get_model(name: str) -> SingleIndexModel:
    try:
        return MODELS[name]()
    except KeyError:
        raise ValidationError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


def log_density(model: SingleIndexModel, y: float, x, beta) -> float:
    """Log-density of a single observation."""
    return float(model.log_density(np.atleast_1d(float(y)), np.atleast_2d(x), beta)[0])


def grad_hess_z(model: SingleIndexModel, y: float, x, beta):
    """Data-space gradient ``(p+1,)`` and Hessian ``(p+1, p+1)`` of one observation."""
    _, grad, hess = model.grad_hess_z(np.atleast_1d(float(y)), np.atleast_2d(x), beta)
    return grad[0], hess[0]
