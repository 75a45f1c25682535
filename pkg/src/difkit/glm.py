"""Binary logistic regression via iteratively reweighted least squares.

Provides the single-level engine used by the traditional DIF test and by
the model-comparison report: IRLS with step-halving, observed-information
covariance via a rank-revealing decomposition, Wald and likelihood-ratio
tests, and AIC/BIC accessors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import stats

from .errors import (
    DegenerateTestError,
    PreconditionError,
    SingularDesignError,
)

INTERCEPT = "intercept"
TRAIT = "trait"
GROUP = "group"
TRAIT_X_GROUP = "trait:group"

_KNOWN_TERMS = (INTERCEPT, TRAIT, GROUP, TRAIT_X_GROUP)

# IRLS controls (mainstream GLM defaults).
DEVIANCE_RTOL = 1e-8
MAX_ITERATIONS = 50
PROB_CLAMP = 1e-10
SEPARATION_BOUND = 15.0
PIVOT_RTOL = 1e-10


@dataclass(frozen=True)
class DesignSpec:
    """Ordered fixed-effect terms; the intercept is always present.

    Terms are drawn from ``intercept``, ``trait``, ``group``,
    ``trait:group``, plus names of custom covariate columns supplied at
    fit time.
    """

    terms: tuple = (INTERCEPT, TRAIT, GROUP, TRAIT_X_GROUP)

    def __post_init__(self):
        terms = tuple(self.terms)
        object.__setattr__(self, "terms", terms)
        if INTERCEPT not in terms:
            raise PreconditionError("design must include the intercept term")
        if len(set(terms)) != len(terms):
            raise PreconditionError(f"design terms must be unique: {terms}")


def build_design_matrix(ds, design: DesignSpec, extra=None):
    """Materialize the design matrix for a dataset.

    ``extra`` maps custom term names to per-record columns (used for
    cross-level interaction terms).
    """
    extra = extra or {}
    n = ds.n
    cols = []
    for term in design.terms:
        if term == INTERCEPT:
            cols.append(np.ones(n))
        elif term == TRAIT:
            cols.append(ds.trait.astype(float))
        elif term == GROUP:
            cols.append(ds.group.astype(float))
        elif term == TRAIT_X_GROUP:
            cols.append(ds.trait.astype(float) * ds.group)
        elif term in extra:
            col = np.asarray(extra[term], dtype=float)
            if col.shape != (n,):
                raise PreconditionError(
                    f"custom column {term!r} must have one value per record"
                )
            cols.append(col)
        else:
            raise PreconditionError(f"unknown design term {term!r}")
    return np.column_stack(cols)


@dataclass(frozen=True)
class FittedGlm:
    """Maximum-likelihood logistic fit with observed-information covariance."""

    coefficients: np.ndarray
    std_errors: np.ndarray
    covariance: np.ndarray
    log_likelihood: float
    n: int
    k_params: int
    converged: bool
    iterations: int
    term_names: tuple
    warnings: tuple = field(default=())

    @property
    def aic(self) -> float:
        return -2.0 * self.log_likelihood + 2.0 * self.k_params

    @property
    def bic(self) -> float:
        return -2.0 * self.log_likelihood + self.k_params * np.log(self.n)

    @property
    def deviance(self) -> float:
        return -2.0 * self.log_likelihood

    def coefficient(self, term: str) -> float:
        return float(self.coefficients[self.term_names.index(term)])

    def std_error(self, term: str) -> float:
        return float(self.std_errors[self.term_names.index(term)])


def bernoulli_loglik(X, y, beta):
    """Log-likelihood of a logistic model at ``beta`` (no clamping)."""
    eta = X @ beta
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def bernoulli_score(X, y, beta):
    """Analytic gradient of :func:`bernoulli_loglik` with respect to beta."""
    eta = X @ beta
    pi = _sigmoid(eta)
    return X.T @ (y - pi)


def _sigmoid(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _pivoted_qr_rank(M):
    _, R, _ = scipy.linalg.qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return 0, R
    return int((diag > PIVOT_RTOL * diag[0]).sum()), R


def _weighted_information_inverse(X, w):
    """Invert X' diag(w) X through a rank-revealing pivoted QR."""
    A = X * np.sqrt(w)[:, None]
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0 or (diag <= PIVOT_RTOL * diag[0]).any():
        raise SingularDesignError(
            "weighted design is rank deficient at the optimum"
        )
    Rinv = scipy.linalg.solve_triangular(R, np.eye(R.shape[0]))
    cov_piv = Rinv @ Rinv.T
    inv_piv = np.empty_like(piv)
    inv_piv[piv] = np.arange(len(piv))
    return cov_piv[np.ix_(inv_piv, inv_piv)]


def fit_logistic_arrays(X, y, term_names=None) -> FittedGlm:
    """IRLS fit on explicit arrays; see :func:`fit_logistic` for the contract."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if term_names is None:
        term_names = tuple(f"x{j}" for j in range(p))
    if n <= p:
        raise PreconditionError(f"need n > k_params, got n={n}, k={p}")
    rank, _ = _pivoted_qr_rank(X)
    if rank < p:
        raise SingularDesignError(
            f"design matrix has rank {rank} < {p} columns"
        )

    beta = np.zeros(p)
    deviance = -2.0 * bernoulli_loglik(X, y, beta)
    converged = False
    warnings = []
    iteration = 0

    for iteration in range(1, MAX_ITERATIONS + 1):
        eta = X @ beta
        pi = np.clip(_sigmoid(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
        w = pi * (1.0 - pi)
        z = eta + (y - pi) / w
        wa = X * w[:, None]
        try:
            step_target = scipy.linalg.solve(
                X.T @ wa, wa.T @ z, assume_a="pos"
            )
        except scipy.linalg.LinAlgError as exc:
            raise SingularDesignError(
                f"weighted normal equations singular at iteration {iteration}"
            ) from exc

        # Step-halving keeps the deviance non-increasing.
        delta = step_target - beta
        new_dev = deviance
        for _ in range(32):
            candidate = beta + delta
            new_dev = -2.0 * bernoulli_loglik(X, y, candidate)
            if new_dev <= deviance + 1e-12:
                break
            delta *= 0.5
        beta = beta + delta

        if np.abs(beta).max() > SEPARATION_BOUND:
            warnings.append(
                "possible complete separation: coefficient magnitude "
                f"exceeds {SEPARATION_BOUND} on the logit scale"
            )
            deviance = new_dev
            break

        if abs(new_dev - deviance) / (abs(new_dev) + 0.1) < DEVIANCE_RTOL:
            deviance = new_dev
            converged = True
            break
        deviance = new_dev

    eta = X @ beta
    pi = np.clip(_sigmoid(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    covariance = _weighted_information_inverse(X, pi * (1.0 - pi))
    std_errors = np.sqrt(np.diag(covariance))

    return FittedGlm(
        coefficients=beta,
        std_errors=std_errors,
        covariance=covariance,
        log_likelihood=bernoulli_loglik(X, y, beta),
        n=n,
        k_params=p,
        converged=converged,
        iterations=iteration,
        term_names=tuple(term_names),
        warnings=tuple(warnings),
    )


def fit_logistic(ds, design: DesignSpec | None = None, extra=None) -> FittedGlm:
    """Fit a binary logistic regression on a dataset.

    The coefficients maximize the Bernoulli log-likelihood; the covariance
    is the inverse observed information at the optimum. ``converged`` is
    true iff the relative deviance change fell below tolerance within the
    iteration cap; a suspected complete separation attaches a warning and
    leaves ``converged`` false.
    """
    design = design or DesignSpec()
    X = build_design_matrix(ds, design, extra=extra)
    return fit_logistic_arrays(X, ds.response.astype(float), design.terms)


@dataclass(frozen=True)
class WaldResult:
    z: float
    p: float


def wald_test(fit: FittedGlm, index) -> WaldResult:
    """Two-sided Wald z test for one coefficient against zero."""
    if not fit.converged:
        raise PreconditionError("Wald test requires a converged fit")
    if isinstance(index, str):
        index = fit.term_names.index(index)
    if not 0 <= index < len(fit.coefficients):
        raise PreconditionError(f"coefficient index {index} out of range")
    se = float(fit.std_errors[index])
    if se == 0.0:
        raise DegenerateTestError(f"standard error of coefficient {index} is zero")
    z = float(fit.coefficients[index]) / se
    return WaldResult(z=z, p=float(2.0 * stats.norm.sf(abs(z))))


@dataclass(frozen=True)
class LrResult:
    chi2: float
    df: int
    p: float


def lr_test(full: FittedGlm, reduced: FittedGlm) -> LrResult:
    """Likelihood-ratio test of nested logistic fits on the same data."""
    if not set(reduced.term_names) <= set(full.term_names):
        raise PreconditionError(
            "reduced design terms must be a subset of the full design terms"
        )
    if full.n != reduced.n:
        raise PreconditionError("fits must come from the same dataset")
    chi2 = 2.0 * (full.log_likelihood - reduced.log_likelihood)
    if chi2 < -1e-8 * (abs(full.log_likelihood) + 1.0):
        raise PreconditionError(
            "reduced model has higher likelihood than the full model; "
            "the fits are inconsistent"
        )
    chi2 = max(chi2, 0.0)
    df = full.k_params - reduced.k_params
    p = float(stats.chi2.sf(chi2, df)) if df > 0 else 1.0
    return LrResult(chi2=float(chi2), df=df, p=p)
