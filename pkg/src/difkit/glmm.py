"""Random-intercept (and optional random-slope) logistic regression.

The marginal likelihood integrates the cluster random effects out of a
Bernoulli-logit model. Evaluation is by the Laplace approximation or by
adaptive Gauss-Hermite quadrature centered at the per-cluster conditional
modes; fitting is quasi-Newton over the fixed effects and log variance
components, with the conditional modes found by damped Newton inner loops.

For a cluster with linear predictor eta = X beta + u and random intercept
u ~ N(0, tau2), the Laplace approximation of the log marginal contribution
is

    g(u_hat) - u_hat^2 / (2 tau2) - log(1 + tau2 * W) / 2,

with g the Bernoulli log-likelihood, u_hat its penalized mode, and
W = sum(pi (1 - pi)) at the mode. The gradient implemented here is exact,
including the dependence of u_hat and W on the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .errors import EvaluationError, PreconditionError
from .glm import (
    GROUP,
    INTERCEPT,
    TRAIT,
    DesignSpec,
    _pivoted_qr_rank,
    _sigmoid,
    build_design_matrix,
    fit_logistic_arrays,
)

RANDOM_INTERCEPT = "intercept"
RANDOM_TRAIT = "trait"
RANDOM_GROUP = "group"

# Residual variance implied by the logit link (pi^2 / 3).
LOGIT_RESIDUAL_VARIANCE = math.pi ** 2 / 3.0

BOUNDARY_TAU2 = 1e-8
INNER_TOL = 1e-11
INNER_MAX_ITER = 200
LOG_VARIANCE_BOUNDS = (-30.0, 10.0)
RESTART_TAU2 = (0.1, 0.5, 1.0)


@dataclass(frozen=True)
class GlmmDesign:
    """Fixed-effect terms plus the random-effect structure.

    The random intercept is always present. Level-2 covariates are given
    as per-cluster values and enter the combined design as fixed
    cross-level interaction columns (covariate x group).
    """

    fixed_terms: tuple = (INTERCEPT, TRAIT, GROUP)
    random_terms: tuple = (RANDOM_INTERCEPT,)
    level2_covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "fixed_terms", tuple(self.fixed_terms))
        object.__setattr__(self, "random_terms", tuple(self.random_terms))
        if RANDOM_INTERCEPT not in self.random_terms:
            raise PreconditionError("the random intercept is required")
        for term in self.random_terms:
            if term not in (RANDOM_INTERCEPT, RANDOM_TRAIT, RANDOM_GROUP):
                raise PreconditionError(f"unknown random term {term!r}")

    @property
    def effective_fixed_terms(self) -> tuple:
        cross = tuple(f"{name}:group" for name in self.level2_covariates)
        return self.fixed_terms + cross

    def fixed_design_spec(self) -> DesignSpec:
        return DesignSpec(self.effective_fixed_terms)


@dataclass(frozen=True)
class FittedGlmm:
    """Approximate-ML mixed logistic fit."""

    fixed_effects: np.ndarray
    std_errors: np.ndarray
    covariance: np.ndarray
    tau2: float
    random_variances: dict
    log_likelihood: float
    n: int
    k_params: int
    n_clusters: int
    conditional_modes: np.ndarray
    method: str
    converged: bool
    boundary: bool
    iterations: int
    term_names: tuple
    random_names: tuple
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
        return float(self.fixed_effects[self.term_names.index(term)])

    def std_error(self, term: str) -> float:
        return float(self.std_errors[self.term_names.index(term)])


def parse_method(method: str) -> tuple[str, int]:
    """Parse ``laplace`` or ``agq:<nodes>`` into (kind, nodes)."""
    if method == "laplace":
        return "laplace", 1
    if method.startswith("agq:"):
        try:
            nodes = int(method.split(":", 1)[1])
        except ValueError:
            raise PreconditionError(f"bad quadrature spec {method!r}") from None
        if nodes < 1:
            raise PreconditionError("quadrature node count must be >= 1")
        return "agq", nodes
    raise PreconditionError(
        f"unknown method {method!r}; expected 'laplace' or 'agq:<n>'"
    )


class _Problem:
    """Design matrices and cluster bookkeeping for one fit."""

    def __init__(self, ds, design: GlmmDesign):
        if not ds.has_clusters:
            raise PreconditionError("mixed model requires cluster labels")
        if ds.cluster_count < 2:
            raise PreconditionError(
                f"mixed model requires at least 2 clusters, got {ds.cluster_count}"
            )
        extra = {
            f"{name}:group": np.asarray(values, dtype=float)[ds.cluster_index]
            * ds.group
            for name, values in design.level2_covariates.items()
        }
        for name, values in design.level2_covariates.items():
            if len(values) != ds.cluster_count:
                raise PreconditionError(
                    f"level-2 covariate {name!r} needs one value per cluster"
                )
        self.X = build_design_matrix(ds, design.fixed_design_spec(), extra=extra)
        rank, _ = _pivoted_qr_rank(self.X)
        if rank < self.X.shape[1]:
            raise PreconditionError("fixed-effect design is rank deficient")
        self.y = ds.response.astype(float)
        self.cl = ds.cluster_index
        self.n_clusters = ds.cluster_count
        self.n, self.p = self.X.shape
        zcols = []
        for term in design.random_terms:
            if term == RANDOM_INTERCEPT:
                zcols.append(np.ones(self.n))
            elif term == RANDOM_TRAIT:
                zcols.append(ds.trait.astype(float))
            elif term == RANDOM_GROUP:
                zcols.append(ds.group.astype(float))
        self.Z = np.column_stack(zcols)
        self.q = self.Z.shape[1]
        self.term_names = design.effective_fixed_terms
        self.random_names = design.random_terms
        if self.q > 1:
            order = np.argsort(self.cl, kind="stable")
            bounds = np.searchsorted(self.cl[order], np.arange(self.n_clusters + 1))
            self.cluster_rows = [
                order[bounds[c]:bounds[c + 1]] for c in range(self.n_clusters)
            ]

    def bincount(self, weights):
        return np.bincount(self.cl, weights=weights, minlength=self.n_clusters)


def _cluster_loglik(problem, eta):
    per_record = problem.y * eta - np.logaddexp(0.0, eta)
    return problem.bincount(per_record)


def _inner_modes_intercept(problem, eta0, tau2, u0=None):
    """Damped Newton for the penalized modes, vectorized over clusters."""
    C = problem.n_clusters
    u = np.zeros(C) if u0 is None else u0.copy()
    pen = _cluster_loglik(problem, eta0 + u[problem.cl]) - u ** 2 / (2.0 * tau2)
    for _ in range(INNER_MAX_ITER):
        eta = eta0 + u[problem.cl]
        pi = _sigmoid(eta)
        grad = problem.bincount(problem.y - pi) - u / tau2
        if np.abs(grad).max() < INNER_TOL:
            W = problem.bincount(pi * (1.0 - pi))
            return u, W
        H = problem.bincount(pi * (1.0 - pi)) + 1.0 / tau2
        step = grad / H
        for _ in range(40):
            u_new = u + step
            pen_new = (
                _cluster_loglik(problem, eta0 + u_new[problem.cl])
                - u_new ** 2 / (2.0 * tau2)
            )
            worse = pen_new < pen - 1e-13
            if not worse.any():
                break
            step[worse] *= 0.5
        u, pen = u_new, pen_new
    eta = eta0 + u[problem.cl]
    pi = _sigmoid(eta)
    grad = problem.bincount(problem.y - pi) - u / tau2
    if np.abs(grad).max() < 1e-6:
        return u, problem.bincount(pi * (1.0 - pi))
    worst = int(np.abs(grad).argmax())
    raise EvaluationError(
        f"conditional-mode Newton did not converge for cluster {worst}",
        cluster=worst,
    )


def _inner_modes_general(problem, eta0, variances):
    """Per-cluster damped Newton for q-dimensional random effects."""
    C, q = problem.n_clusters, problem.q
    Dinv = 1.0 / variances
    U = np.zeros((C, q))
    logdets = np.zeros(C)
    for c in range(C):
        rows = problem.cluster_rows[c]
        Zc = problem.Z[rows]
        yc = problem.y[rows]
        ec = eta0[rows]
        u = np.zeros(q)

        def pen(u_vec):
            eta = ec + Zc @ u_vec
            return float(
                yc @ eta - np.logaddexp(0.0, eta).sum()
                - 0.5 * (u_vec ** 2 * Dinv).sum()
            )

        f = pen(u)
        for _ in range(INNER_MAX_ITER):
            eta = ec + Zc @ u
            pi = _sigmoid(eta)
            grad = Zc.T @ (yc - pi) - u * Dinv
            if np.abs(grad).max() < INNER_TOL:
                break
            w = pi * (1.0 - pi)
            H = Zc.T @ (Zc * w[:, None]) + np.diag(Dinv)
            step = np.linalg.solve(H, grad)
            for _ in range(40):
                f_new = pen(u + step)
                if f_new >= f - 1e-13:
                    break
                step *= 0.5
            u = u + step
            f = f_new
        else:
            raise EvaluationError(
                f"conditional-mode Newton did not converge for cluster {c}",
                cluster=c,
            )
        eta = ec + Zc @ u
        pi = _sigmoid(eta)
        w = pi * (1.0 - pi)
        ZWZ = Zc.T @ (Zc * w[:, None])
        M = np.eye(q) + ZWZ * variances[None, :]
        sign, logdet = np.linalg.slogdet(M)
        if sign <= 0:
            raise EvaluationError(
                f"Laplace curvature not positive definite in cluster {c}",
                cluster=c,
            )
        U[c] = u
        logdets[c] = logdet
    return U, logdets


def _laplace_parts_intercept(problem, beta, tau2, u0=None):
    eta0 = problem.X @ beta
    u, W = _inner_modes_intercept(problem, eta0, tau2, u0=u0)
    g = _cluster_loglik(problem, eta0 + u[problem.cl])
    ll = float(
        g.sum() - (u ** 2).sum() / (2.0 * tau2)
        - 0.5 * np.log1p(tau2 * W).sum()
    )
    return ll, u, W, eta0


def _laplace_loglik_general(problem, beta, variances):
    eta0 = problem.X @ beta
    U, logdets = _inner_modes_general(problem, eta0, variances)
    eta = eta0 + np.einsum("ij,ij->i", problem.Z, U[problem.cl])
    g = problem.y @ eta - np.logaddexp(0.0, eta).sum()
    penalty = 0.5 * (U ** 2 / variances[None, :]).sum()
    return float(g - penalty - 0.5 * logdets.sum()), U


def _laplace_loglik_and_gradient(problem, beta, log_tau2):
    """Objective and exact gradient for the random-intercept Laplace fit."""
    tau2 = math.exp(log_tau2)
    ll, u, W, eta0 = _laplace_parts_intercept(problem, beta, tau2)
    eta = eta0 + u[problem.cl]
    pi = _sigmoid(eta)
    w = pi * (1.0 - pi)
    t = w * (1.0 - 2.0 * pi)
    T_u = problem.bincount(t)
    H = W + 1.0 / tau2
    denom = 1.0 + tau2 * W

    resid = problem.y - pi
    grad_beta = np.empty(problem.p)
    for j in range(problem.p):
        xj = problem.X[:, j]
        S_j = problem.bincount(w * xj)
        T_j = problem.bincount(t * xj)
        correction = tau2 * (T_j - S_j * T_u / H) / denom
        grad_beta[j] = xj @ resid - 0.5 * correction.sum()

    grad_lambda = float(
        ((u ** 2) / (2.0 * tau2)
         - 0.5 * tau2 * W / denom
         - 0.5 * tau2 * T_u * u / denom ** 2).sum()
    )
    return ll, np.append(grad_beta, grad_lambda), u


def _agq_loglik_intercept(problem, beta, tau2, nodes):
    """Adaptive Gauss-Hermite marginal log-likelihood (random intercept)."""
    eta0 = problem.X @ beta
    u, W = _inner_modes_intercept(problem, eta0, tau2)
    sigma = 1.0 / np.sqrt(W + 1.0 / tau2)
    x, wq = np.polynomial.hermite.hermgauss(nodes)
    log_wq = np.log(wq)
    C = problem.n_clusters
    h = np.empty((nodes, C))
    for k in range(nodes):
        uk = u + math.sqrt(2.0) * sigma * x[k]
        g = _cluster_loglik(problem, eta0 + uk[problem.cl])
        h[k] = (
            g - uk ** 2 / (2.0 * tau2)
            - 0.5 * math.log(2.0 * math.pi * tau2)
        )
    stacked = h + (log_wq + x ** 2)[:, None]
    peak = stacked.max(axis=0)
    ll_c = (
        np.log(np.exp(stacked - peak[None, :]).sum(axis=0)) + peak
        + 0.5 * math.log(2.0) + np.log(sigma)
    )
    return float(ll_c.sum()), u


def marginal_loglik(beta, variances, ds, design: GlmmDesign, method="laplace"):
    """Evaluate the approximate marginal log-likelihood at given parameters.

    ``variances`` is a scalar tau2 for a random-intercept design or a
    sequence with one variance per random term. A zero intercept variance
    degenerates to the fixed-effects Bernoulli log-likelihood.
    """
    problem = _Problem(ds, design)
    beta = np.asarray(beta, dtype=float)
    variances = np.atleast_1d(np.asarray(variances, dtype=float))
    if len(variances) != problem.q:
        raise PreconditionError(
            f"expected {problem.q} variance component(s), got {len(variances)}"
        )
    if (variances < 0).any() or not np.isfinite(variances).all():
        raise PreconditionError("variance components must be finite and >= 0")
    if not np.isfinite(beta).all():
        raise PreconditionError("fixed effects must be finite")

    if float(variances.max()) == 0.0:
        eta = problem.X @ beta
        return float(problem.y @ eta - np.logaddexp(0.0, eta).sum())
    if problem.q > 1 and (variances == 0.0).any():
        raise PreconditionError(
            "zero variance components are only supported for the "
            "random-intercept-only model"
        )

    kind, nodes = parse_method(method)
    if problem.q == 1:
        tau2 = float(variances[0])
        if kind == "laplace":
            ll, _, _, _ = _laplace_parts_intercept(problem, beta, tau2)
            return ll
        ll, _ = _agq_loglik_intercept(problem, beta, tau2, nodes)
        return ll
    if kind != "laplace":
        raise PreconditionError(
            "quadrature beyond Laplace is only available for the "
            "random-intercept model"
        )
    ll, _ = _laplace_loglik_general(problem, beta, variances)
    return ll


def fit_glmm(ds, design: GlmmDesign | None = None, method="laplace") -> FittedGlmm:
    """Fit the mixed logistic model by maximizing the approximate marginal
    likelihood.

    Restarts the quasi-Newton outer loop from intercept variances 0.1, 0.5,
    and 1.0 (fixed effects initialized from the single-level fit) and keeps
    the best objective. A fit with intercept variance below ``BOUNDARY_TAU2``
    is flagged ``boundary`` and still returned.
    """
    design = design or GlmmDesign()
    kind, nodes = parse_method(method)
    problem = _Problem(ds, design)
    if problem.q > 1 and kind != "laplace":
        raise PreconditionError(
            "random slopes are fitted under Laplace only"
        )

    glm_fit = fit_logistic_arrays(problem.X, problem.y, problem.term_names)
    beta0 = glm_fit.coefficients
    q, p = problem.q, problem.p

    def objective(theta):
        beta = theta[:p]
        variances = np.exp(theta[p:])
        if q == 1:
            if kind == "laplace":
                ll, grad, _ = _laplace_loglik_and_gradient(
                    problem, beta, theta[p]
                )
                return -ll, -grad
            ll, _ = _agq_loglik_intercept(problem, beta, float(variances[0]), nodes)
            return -ll
        ll, _ = _laplace_loglik_general(problem, beta, variances)
        return -ll

    use_jac = q == 1 and kind == "laplace"
    bounds = [(None, None)] * p + [LOG_VARIANCE_BOUNDS] * q

    best = None
    for tau2_start in RESTART_TAU2:
        theta0 = np.append(beta0, np.full(q, math.log(tau2_start)))
        res = scipy.optimize.minimize(
            objective,
            theta0,
            jac=True if use_jac else None,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": 500, "ftol": 1e-12, "gtol": 1e-7},
        )
        if best is None or res.fun < best.fun:
            best = res

    theta_hat = best.x
    beta_hat = theta_hat[:p]
    variances = np.exp(theta_hat[p:])
    tau2_hat = float(variances[0])
    boundary = tau2_hat < BOUNDARY_TAU2
    warnings = []
    converged = bool(best.success)
    if not converged:
        warnings.append(f"outer optimizer: {best.message}")

    if q == 1:
        if kind == "laplace":
            ll, _, _, _ = _laplace_parts_intercept(problem, beta_hat, tau2_hat)
        else:
            ll, _ = _agq_loglik_intercept(problem, beta_hat, tau2_hat, nodes)
        eta0 = problem.X @ beta_hat
        u, _ = _inner_modes_intercept(problem, eta0, tau2_hat)
        modes = u[:, None]
    else:
        ll, modes = _laplace_loglik_general(problem, beta_hat, variances)

    covariance, cov_warn = _fixed_effect_covariance(
        problem, theta_hat, kind, nodes, use_jac
    )
    if cov_warn:
        warnings.append(cov_warn)
    std_errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None))

    return FittedGlmm(
        fixed_effects=beta_hat,
        std_errors=std_errors,
        covariance=covariance,
        tau2=tau2_hat,
        random_variances={
            name: float(v) for name, v in zip(problem.random_names, variances)
        },
        log_likelihood=float(ll),
        n=problem.n,
        k_params=p + q,
        n_clusters=problem.n_clusters,
        conditional_modes=modes,
        method=method if kind == "laplace" else f"agq:{nodes}",
        converged=converged,
        boundary=boundary,
        iterations=int(best.nit),
        term_names=problem.term_names,
        random_names=problem.random_names,
        warnings=tuple(warnings),
    )


def _fixed_effect_covariance(problem, theta_hat, kind, nodes, use_jac):
    """Observed information of the marginal likelihood over the fixed
    effects, variance components held at their estimates."""
    p = problem.p
    beta_hat = theta_hat[:p].copy()
    steps = 1e-5 * np.maximum(1.0, np.abs(beta_hat))

    if use_jac:
        def grad_beta(beta):
            _, grad, _ = _laplace_loglik_and_gradient(problem, beta, theta_hat[p])
            return grad[:p]

        H = np.empty((p, p))
        for j in range(p):
            e = np.zeros(p)
            e[j] = steps[j]
            H[:, j] = (grad_beta(beta_hat + e) - grad_beta(beta_hat - e)) / (
                2.0 * steps[j]
            )
    else:
        variances = np.exp(theta_hat[p:])

        def ll_at(beta):
            if problem.q == 1:
                if kind == "laplace":
                    ll, _, _, _ = _laplace_parts_intercept(
                        problem, beta, float(variances[0])
                    )
                    return ll
                ll, _ = _agq_loglik_intercept(
                    problem, beta, float(variances[0]), nodes
                )
                return ll
            ll, _ = _laplace_loglik_general(problem, beta, variances)
            return ll

        H = np.empty((p, p))
        for i in range(p):
            for j in range(i, p):
                ei = np.zeros(p)
                ej = np.zeros(p)
                ei[i] = steps[i]
                ej[j] = steps[j]
                val = (
                    ll_at(beta_hat + ei + ej)
                    - ll_at(beta_hat + ei - ej)
                    - ll_at(beta_hat - ei + ej)
                    + ll_at(beta_hat - ei - ej)
                ) / (4.0 * steps[i] * steps[j])
                H[i, j] = H[j, i] = val

    info = -0.5 * (H + H.T)
    try:
        covariance = np.linalg.inv(info)
        if (np.diag(covariance) <= 0).any():
            raise np.linalg.LinAlgError
        return covariance, None
    except np.linalg.LinAlgError:
        return (
            np.full((p, p), np.nan),
            "observed information not positive definite; standard errors "
            "are unavailable",
        )


def adjusted_icc(fit: FittedGlmm) -> float:
    """Share of logit-scale variance between clusters:
    tau2 / (tau2 + pi^2 / 3)."""
    return fit.tau2 / (fit.tau2 + LOGIT_RESIDUAL_VARIANCE)


def r2_latent(fit: FittedGlmm, ds, extra=None) -> tuple[float, float]:
    """Marginal and conditional R^2 on the logit latent scale.

    Marginal: variance of the fixed-effect linear predictor over the total
    latent variance (fixed + random + residual). Conditional adds the
    random-effect variance to the numerator. For random-slope fits the
    random contribution averages the per-record variance of Z u.
    """
    X = build_design_matrix(ds, DesignSpec(fit.term_names), extra=extra)
    sigma_f2 = float(np.var(X @ fit.fixed_effects))

    zcols = {
        RANDOM_INTERCEPT: np.ones(ds.n),
        RANDOM_TRAIT: ds.trait.astype(float),
        RANDOM_GROUP: ds.group.astype(float),
    }
    sigma_r2 = sum(
        fit.random_variances[name] * float(np.mean(zcols[name] ** 2))
        for name in fit.random_names
    )
    total = sigma_f2 + sigma_r2 + LOGIT_RESIDUAL_VARIANCE
    marginal = sigma_f2 / total
    conditional = (sigma_f2 + sigma_r2) / total
    return marginal, conditional


def r2_single_level(fit, ds, extra=None) -> float:
    """Latent-scale R^2 for a single-level logistic fit (no random part)."""
    X = build_design_matrix(ds, DesignSpec(fit.term_names), extra=extra)
    sigma_f2 = float(np.var(X @ fit.coefficients))
    return sigma_f2 / (sigma_f2 + LOGIT_RESIDUAL_VARIANCE)
