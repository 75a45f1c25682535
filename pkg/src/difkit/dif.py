"""The four DIF procedures, each returning a uniform decision record.

Methods: stratified Mantel-Haenszel on trait-score tables, traditional
(single-level) logistic regression with uniform/non-uniform decision
logic, multilevel logistic regression with a cluster random intercept,
and the between-group Wald comparison of linked 1PL item difficulties.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import PreconditionError, UntestableError
from .glm import (
    GROUP,
    INTERCEPT,
    TRAIT,
    TRAIT_X_GROUP,
    DesignSpec,
    fit_logistic,
    lr_test,
    wald_test,
)
from .glmm import GlmmDesign, fit_glmm
from .irt import ItemResponseMatrix, fit_1pl, link_calibrations

NO_DIF = "no_dif"
UNIFORM_DIF = "uniform_dif"
NONUNIFORM_DIF = "nonuniform_dif"
DIF = "dif"

DEFAULT_ALPHA = 0.05
DELTA_SCALE = -2.35
MAX_DISTINCT_TRAIT_LEVELS = 30
DECILE_BINS = 10


@dataclass(frozen=True)
class StratumTable:
    """2x2 counts for one matching-score level.

    ``a``/``b`` are reference-group yes/no counts, ``c``/``d`` the focal
    group's, following the usual stratified-table layout.
    """

    k: str
    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise PreconditionError("stratum counts must be non-negative")

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


@dataclass(frozen=True)
class MhResult:
    """Mantel-Haenszel statistic, common odds ratio, and ETS flag."""

    chi2: float
    p: float
    alpha_hat: float
    delta_hat: float
    ets_class: str
    strata_used: int
    strata_skipped: int
    se_log_alpha: float


@dataclass(frozen=True)
class DifDecision:
    """Uniform record of one DIF analysis."""

    method: str
    statistic: float
    df: int
    p: float
    effect: float | None
    verdict: str
    alpha: float
    details: dict = field(default_factory=dict)


def _require_two_groups(ds):
    n0, n1 = ds.group_counts()
    if n0 == 0 or n1 == 0:
        raise PreconditionError(
            "DIF analysis needs records in both the reference and focal group"
        )


def stratify(ds, max_levels=MAX_DISTINCT_TRAIT_LEVELS) -> list[StratumTable]:
    """Cross-tabulate response by group at each matching-score level.

    Distinct observed trait values define the strata when there are at
    most ``max_levels`` of them; otherwise records are binned into
    deciles of the trait distribution.
    """
    _require_two_groups(ds)
    traits = ds.trait
    levels = np.unique(traits)
    if len(levels) <= max_levels:
        assignments = np.searchsorted(levels, traits)
        labels = [_format_level(v) for v in levels]
    else:
        edges = np.quantile(traits, np.linspace(0.0, 1.0, DECILE_BINS + 1))
        edges = np.unique(edges)
        assignments = np.clip(
            np.searchsorted(edges, traits, side="right") - 1,
            0, len(edges) - 2,
        )
        labels = [
            f"[{_format_level(edges[i])}, {_format_level(edges[i + 1])}]"
            for i in range(len(edges) - 1)
        ]
    tables = []
    for idx, label in enumerate(labels):
        mask = assignments == idx
        g = ds.group[mask]
        r = ds.response[mask]
        tables.append(StratumTable(
            k=label,
            a=int(((g == 0) & (r == 1)).sum()),
            b=int(((g == 0) & (r == 0)).sum()),
            c=int(((g == 1) & (r == 1)).sum()),
            d=int(((g == 1) & (r == 0)).sum()),
        ))
    return tables


def _format_level(v: float) -> str:
    return f"{v:g}"


def mh_test(tables, alpha=DEFAULT_ALPHA) -> MhResult:
    """Continuity-corrected Mantel-Haenszel test over score strata.

    Strata with fewer than 2 records or zero hypergeometric variance are
    skipped and counted. The effect size is delta = -2.35 ln(alpha_hat)
    with the ETS A/B/C flag; "significantly above 1" for the C rule uses
    the one-sided z test on |delta| with its large-sample variance.
    """
    sum_a = sum_e = sum_v = 0.0
    sum_r = sum_s = 0.0  # Mantel-Haenszel odds-ratio components
    components = []      # (P_k, Q_k, R_k, S_k) per usable stratum
    used = skipped = 0
    for t in tables:
        n = t.n
        m1 = t.a + t.b  # reference margin
        m2 = t.c + t.d
        n1 = t.a + t.c  # yes margin
        n0 = t.b + t.d
        if n < 2 or m1 * m2 * n1 * n0 == 0:
            skipped += 1
            continue
        used += 1
        sum_a += t.a
        sum_e += m1 * n1 / n
        sum_v += m1 * m2 * n1 * n0 / (n * n * (n - 1.0))
        r_k = t.a * t.d / n
        s_k = t.b * t.c / n
        sum_r += r_k
        sum_s += s_k
        components.append(((t.a + t.d) / n, (t.b + t.c) / n, r_k, s_k))
    if used == 0 or sum_v == 0.0:
        raise UntestableError("every stratum is degenerate; MH is undefined")

    chi2 = (abs(sum_a - sum_e) - 0.5) ** 2 / sum_v
    p = float(stats.chi2.sf(chi2, 1))

    if sum_r > 0.0 and sum_s > 0.0:
        alpha_hat = sum_r / sum_s
        log_alpha = np.log(alpha_hat)
        # Robins-Breslow-Greenland variance of ln(alpha_hat).
        var_log = (
            sum(pk * rk for pk, _, rk, _ in components) / (2.0 * sum_r ** 2)
            + sum(pk * sk + qk * rk for pk, qk, rk, sk in components)
            / (2.0 * sum_r * sum_s)
            + sum(qk * sk for _, qk, _, sk in components) / (2.0 * sum_s ** 2)
        )
        se_log = float(np.sqrt(var_log))
    else:
        alpha_hat = np.inf if sum_s == 0.0 else 0.0
        log_alpha = np.inf if sum_s == 0.0 else -np.inf
        se_log = float("nan")
    delta_hat = DELTA_SCALE * log_alpha

    ets = _ets_class(chi2, p, delta_hat, se_log, alpha)
    return MhResult(
        chi2=float(chi2), p=p, alpha_hat=float(alpha_hat),
        delta_hat=float(delta_hat), ets_class=ets,
        strata_used=used, strata_skipped=skipped, se_log_alpha=se_log,
    )


def _ets_class(chi2, p, delta_hat, se_log, alpha) -> str:
    abs_delta = abs(delta_hat)
    if abs_delta < 1.0 or p >= alpha:
        return "A"
    se_delta = abs(DELTA_SCALE) * se_log
    if np.isfinite(abs_delta):
        above_one = (
            np.isfinite(se_delta)
            and se_delta > 0.0
            and (abs_delta - 1.0) / se_delta > stats.norm.ppf(1.0 - alpha)
        )
    else:
        above_one = True
    if abs_delta >= 1.5 and above_one:
        return "C"
    return "B"


def mh_dif(ds, alpha=DEFAULT_ALPHA) -> DifDecision:
    """Run the full MH procedure on a dataset and wrap it as a decision."""
    result = mh_test(stratify(ds), alpha=alpha)
    return DifDecision(
        method="mh",
        statistic=result.chi2,
        df=1,
        p=result.p,
        effect=result.delta_hat,
        verdict=DIF if result.p < alpha else NO_DIF,
        alpha=alpha,
        details={
            "alpha_hat": result.alpha_hat,
            "delta_hat": result.delta_hat,
            "ets_class": result.ets_class,
            "strata_used": result.strata_used,
            "strata_skipped": result.strata_skipped,
            "se_log_alpha": result.se_log_alpha,
        },
    )


def _glm_summary(fit) -> dict:
    terms = {}
    for i, name in enumerate(fit.term_names):
        se = float(fit.std_errors[i])
        est = float(fit.coefficients[i])
        z = est / se if se > 0 else float("nan")
        terms[name] = {
            "estimate": est,
            "std_error": se,
            "z": z,
            "p": float(2.0 * stats.norm.sf(abs(z))) if se > 0 else float("nan"),
        }
    return {
        "terms": terms,
        "log_likelihood": float(fit.log_likelihood),
        "aic": float(fit.aic),
        "bic": float(fit.bic),
        "n": int(fit.n),
        "converged": bool(fit.converged),
    }


def lr_dif(ds, alpha=DEFAULT_ALPHA, rule="wald") -> DifDecision:
    """Traditional logistic-regression DIF test.

    Fits intercept + trait + group + trait:group. Non-uniform DIF when the
    interaction is significant; otherwise uniform DIF when the group main
    effect is; otherwise no DIF. ``rule`` selects Wald z tests (default)
    or likelihood-ratio tests of the corresponding nested models.
    """
    _require_two_groups(ds)
    full = fit_logistic(ds, DesignSpec((INTERCEPT, TRAIT, GROUP, TRAIT_X_GROUP)))
    reduced = fit_logistic(ds, DesignSpec((INTERCEPT, TRAIT, GROUP)))

    if rule == "wald":
        w3 = wald_test(full, TRAIT_X_GROUP)
        w2 = wald_test(full, GROUP)
        stat3, p3 = w3.z ** 2, w3.p
        stat2, p2 = w2.z ** 2, w2.p
    elif rule == "lr":
        base = fit_logistic(ds, DesignSpec((INTERCEPT, TRAIT)))
        t3 = lr_test(full, reduced)
        t2 = lr_test(reduced, base)
        stat3, p3 = t3.chi2, t3.p
        stat2, p2 = t2.chi2, t2.p
    else:
        raise PreconditionError(f"unknown decision rule {rule!r}")

    if p3 < alpha:
        verdict, statistic, p = NONUNIFORM_DIF, stat3, p3
        effect = full.coefficient(TRAIT_X_GROUP)
    elif p2 < alpha:
        verdict, statistic, p = UNIFORM_DIF, stat2, p2
        effect = full.coefficient(GROUP)
    else:
        verdict, statistic, p = NO_DIF, stat2, p2
        effect = full.coefficient(GROUP)

    return DifDecision(
        method="lr",
        statistic=float(statistic),
        df=1,
        p=float(p),
        effect=float(effect),
        verdict=verdict,
        alpha=alpha,
        details={
            "rule": rule,
            "p_interaction": float(p3),
            "p_group": float(p2),
            "fit_full": _glm_summary(full),
            "fit_reduced": _glm_summary(reduced),
        },
    )


def _glmm_summary(fit) -> dict:
    terms = {}
    for i, name in enumerate(fit.term_names):
        se = float(fit.std_errors[i])
        est = float(fit.fixed_effects[i])
        z = est / se if se > 0 else float("nan")
        terms[name] = {
            "estimate": est,
            "std_error": se,
            "z": z,
            "p": float(2.0 * stats.norm.sf(abs(z))) if se > 0 else float("nan"),
        }
    return {
        "terms": terms,
        "tau2": float(fit.tau2),
        "random_variances": {k: float(v) for k, v in fit.random_variances.items()},
        "log_likelihood": float(fit.log_likelihood),
        "aic": float(fit.aic),
        "bic": float(fit.bic),
        "n": int(fit.n),
        "n_clusters": int(fit.n_clusters),
        "method": fit.method,
        "converged": bool(fit.converged),
        "boundary": bool(fit.boundary),
    }


def _glmm_wald(fit, term):
    se = fit.std_error(term)
    if se <= 0 or not np.isfinite(se):
        raise PreconditionError(
            f"standard error for {term!r} unavailable; cannot test"
        )
    z = fit.coefficient(term) / se
    return z, float(2.0 * stats.norm.sf(abs(z)))


def mlr_dif(ds, interaction=False, level2_covariates=None,
            alpha=DEFAULT_ALPHA, method="laplace") -> DifDecision:
    """Multilevel logistic-regression DIF test with a cluster random
    intercept.

    Without the interaction the item shows DIF iff the group fixed effect
    is significant. With the interaction the uniform/non-uniform logic of
    the traditional test applies.
    """
    _require_two_groups(ds)
    fixed = (INTERCEPT, TRAIT, GROUP) + (
        (TRAIT_X_GROUP,) if interaction else ()
    )
    design = GlmmDesign(
        fixed_terms=fixed,
        level2_covariates=dict(level2_covariates or {}),
    )
    fit = fit_glmm(ds, design, method=method)
    z_group, p_group = _glmm_wald(fit, GROUP)

    if interaction:
        z_int, p_int = _glmm_wald(fit, TRAIT_X_GROUP)
        if p_int < alpha:
            verdict, statistic, p = NONUNIFORM_DIF, z_int ** 2, p_int
            effect = fit.coefficient(TRAIT_X_GROUP)
        elif p_group < alpha:
            verdict, statistic, p = UNIFORM_DIF, z_group ** 2, p_group
            effect = fit.coefficient(GROUP)
        else:
            verdict, statistic, p = NO_DIF, z_group ** 2, p_group
            effect = fit.coefficient(GROUP)
        details_extra = {"p_interaction": float(p_int)}
    else:
        verdict = DIF if p_group < alpha else NO_DIF
        statistic, p = z_group ** 2, p_group
        effect = fit.coefficient(GROUP)
        details_extra = {}

    return DifDecision(
        method="mlr",
        statistic=float(statistic),
        df=1,
        p=float(p),
        effect=float(effect),
        verdict=verdict,
        alpha=alpha,
        details={
            "interaction": bool(interaction),
            "p_group": float(p_group),
            **details_extra,
            "fit": _glmm_summary(fit),
        },
    )


def lord_test(matrix: ItemResponseMatrix, studied_item, item_set=None,
              alpha=DEFAULT_ALPHA, min_persons=30,
              force_unit_discrimination=False) -> DifDecision:
    """Wald comparison of linked 1PL difficulties between the groups.

    Calibrates the item set separately in the reference and focal groups,
    links the focal scale by mean-mean equating, and tests the studied
    item's difficulty difference; the squared z is reported against
    chi-square with 1 degree of freedom.
    """
    item_set = tuple(item_set) if item_set is not None else matrix.item_names
    if studied_item not in item_set:
        raise PreconditionError(
            f"studied item {studied_item!r} is not in the item set"
        )
    if len(item_set) < 2:
        raise PreconditionError(
            "the item set must contain the studied item and at least one other"
        )
    sub = matrix.subset(item_set)
    ref = fit_1pl(sub, group=0, min_persons=min_persons,
                  force_unit_discrimination=force_unit_discrimination)
    focal = fit_1pl(sub, group=1, min_persons=min_persons,
                    force_unit_discrimination=force_unit_discrimination)
    linked = link_calibrations(ref, focal)
    if studied_item not in linked.item_names:
        raise PreconditionError(
            f"studied item {studied_item!r} was excluded as degenerate"
        )
    diff = linked.difficulty(studied_item) - ref.difficulty(studied_item)
    var_sum = (
        linked.difficulty_var(studied_item) + ref.difficulty_var(studied_item)
    )
    z = diff / np.sqrt(var_sum)
    chi2 = float(z ** 2)
    p = float(stats.chi2.sf(chi2, 1))
    return DifDecision(
        method="lord",
        statistic=chi2,
        df=1,
        p=p,
        effect=float(diff),
        verdict=DIF if p < alpha else NO_DIF,
        alpha=alpha,
        details={
            "studied_item": studied_item,
            "item_set": list(item_set),
            "z": float(z),
            "difficulty_reference": ref.difficulty(studied_item),
            "difficulty_focal_linked": linked.difficulty(studied_item),
            "var_reference": ref.difficulty_var(studied_item),
            "var_focal": linked.difficulty_var(studied_item),
            "discrimination_reference": ref.discrimination,
            "discrimination_focal": focal.discrimination,
            "link_shift": linked.link_shift,
        },
    )
