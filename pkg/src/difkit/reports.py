"""Report assembly: model-comparison table, DIF decision tables, dataset
summaries, and Markdown/CSV/JSON renderers.

Markdown output rounds numbers to two decimals (the presentation used in
the model-comparison write-ups); CSV and JSON keep full precision.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _stats

from .data import ClusterRow, DifDataset, cluster_table
from .dif import DifDecision
from .errors import DifkitError
from .glm import (
    GROUP,
    INTERCEPT,
    TRAIT,
    TRAIT_X_GROUP,
    DesignSpec,
    FittedGlm,
    fit_logistic,
)
from .glmm import (
    LOGIT_RESIDUAL_VARIANCE,
    FittedGlmm,
    GlmmDesign,
    adjusted_icc,
    fit_glmm,
    r2_latent,
    r2_single_level,
)
from .simulate import SimReport

FORMATS = ("md", "csv", "json")

_COEF_ROWS = (INTERCEPT, TRAIT, GROUP, TRAIT_X_GROUP)
_COEF_LABELS = {
    INTERCEPT: "b0 (intercept)",
    TRAIT: "b1 (trait)",
    GROUP: "b2 (group)",
    TRAIT_X_GROUP: "b3 (trait x group)",
}


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class ModelColumn:
    """One fitted model's column in the comparison table."""

    name: str
    ok: bool
    error: str | None = None
    terms: dict = field(default_factory=dict)  # term -> (est, se, p)
    tau2: float | None = None
    sigma2: float | None = None
    n: int | None = None
    aic: float | None = None
    bic: float | None = None
    minus2ll: float | None = None
    icc: float | None = None
    r2_marginal: float | None = None
    r2_conditional: float | None = None
    fit: object | None = None  # underlying FittedGlm/FittedGlmm, not serialized

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "ok": self.ok,
            "error": self.error,
            "terms": {
                t: {"estimate": e, "std_error": s, "p": p}
                for t, (e, s, p) in self.terms.items()
            },
            "tau2": self.tau2,
            "sigma2": self.sigma2,
            "n": self.n,
            "aic": self.aic,
            "bic": self.bic,
            "minus2ll": self.minus2ll,
            "icc": self.icc,
            "r2_marginal": self.r2_marginal,
            "r2_conditional": self.r2_conditional,
        }


@dataclass
class ModelComparisonReport:
    """Columns for the null, main, interaction, and single-level models."""

    columns: list

    def column(self, name: str) -> ModelColumn:
        for col in self.columns:
            if col.name == name:
                return col
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {"models": [c.to_json_dict() for c in self.columns]}


def _wald_p(est, se):
    if se is None or se <= 0 or not np.isfinite(se):
        return float("nan")
    return float(2.0 * _stats.norm.sf(abs(est / se)))


def _glmm_column(name, ds, design, method) -> ModelColumn:
    fit = fit_glmm(ds, design, method=method)
    terms = {}
    for i, term in enumerate(fit.term_names):
        est = float(fit.fixed_effects[i])
        se = float(fit.std_errors[i])
        terms[term] = (est, se, _wald_p(est, se))
    marginal, conditional = r2_latent(fit, ds)
    return ModelColumn(
        name=name, ok=True, terms=terms,
        tau2=fit.tau2, sigma2=LOGIT_RESIDUAL_VARIANCE,
        n=fit.n, aic=float(fit.aic), bic=float(fit.bic),
        minus2ll=float(fit.deviance), icc=adjusted_icc(fit),
        r2_marginal=marginal, r2_conditional=conditional,
        fit=fit,
    )


def _glm_column(name, ds, design) -> ModelColumn:
    fit = fit_logistic(ds, design)
    terms = {}
    for i, term in enumerate(fit.term_names):
        est = float(fit.coefficients[i])
        se = float(fit.std_errors[i])
        terms[term] = (est, se, _wald_p(est, se))
    return ModelColumn(
        name=name, ok=True, terms=terms,
        tau2=None, sigma2=None,
        n=fit.n, aic=float(fit.aic), bic=float(fit.bic),
        minus2ll=float(fit.deviance), icc=None,
        r2_marginal=r2_single_level(fit, ds), r2_conditional=None,
        fit=fit,
    )


def compare_models(ds: DifDataset, method="laplace") -> ModelComparisonReport:
    """Fit the four-model series and assemble the comparison table.

    Model 0: random intercept only. Model 1: + trait + group. Model 2:
    + trait x group. Model 3: single-level with the interaction. A fit
    failure marks its column failed and the remaining models still run.
    """
    specs = [
        ("Model 0", "glmm", GlmmDesign(fixed_terms=(INTERCEPT,))),
        ("Model 1", "glmm", GlmmDesign(fixed_terms=(INTERCEPT, TRAIT, GROUP))),
        ("Model 2", "glmm",
         GlmmDesign(fixed_terms=(INTERCEPT, TRAIT, GROUP, TRAIT_X_GROUP))),
        ("Model 3", "glm",
         DesignSpec((INTERCEPT, TRAIT, GROUP, TRAIT_X_GROUP))),
    ]
    columns = []
    for name, kind, design in specs:
        try:
            if kind == "glmm":
                columns.append(_glmm_column(name, ds, design, method))
            else:
                columns.append(_glm_column(name, ds, design))
        except DifkitError as exc:
            columns.append(ModelColumn(name=name, ok=False, error=str(exc)))
    return ModelComparisonReport(columns=columns)


# ---------------------------------------------------------------------------
# Rendering helpers
# ---------------------------------------------------------------------------


def _fmt2(value) -> str:
    if value is None:
        return ""
    return f"{value:.2f}"


def _markdown_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |",
             "| " + " | ".join("---" for _ in header) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines) + "\n"


def _csv_table(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def render_model_comparison(report: ModelComparisonReport, fmt="md") -> str:
    if fmt == "json":
        return json.dumps(report.to_json_dict(), indent=2, allow_nan=False)

    header = [""] + [c.name for c in report.columns]
    rows = []
    for term in _COEF_ROWS:
        if not any(term in c.terms for c in report.columns):
            continue
        cells, se_cells = [], []
        for c in report.columns:
            if term in c.terms:
                est, se, p = c.terms[term]
                cells.append(f"{_fmt2(est)}{significance_stars(p)}")
                se_cells.append(f"({_fmt2(se)})")
            else:
                cells.append("")
                se_cells.append("")
        rows.append([_COEF_LABELS[term]] + cells)
        rows.append([""] + se_cells)

    def stat_row(label, getter, integer=False):
        cells = []
        for c in report.columns:
            v = getter(c)
            if v is None:
                cells.append("")
            elif integer:
                cells.append(str(int(v)))
            else:
                cells.append(_fmt2(v))
        rows.append([label] + cells)

    stat_row("tau0^2", lambda c: c.tau2)
    stat_row("sigma^2", lambda c: c.sigma2)
    stat_row("N", lambda c: c.n, integer=True)
    stat_row("AIC", lambda c: c.aic)
    stat_row("BIC", lambda c: c.bic)
    stat_row("-2LL", lambda c: c.minus2ll)
    stat_row("ICC", lambda c: c.icc)
    stat_row("R2_marg", lambda c: c.r2_marginal)
    stat_row("R2_cond", lambda c: c.r2_conditional)
    for c in report.columns:
        if not c.ok:
            rows.append([f"[{c.name} failed: {c.error}]"] +
                        [""] * len(report.columns))

    if fmt == "md":
        return _markdown_table(header, rows)
    if fmt == "csv":
        return _csv_table(header, rows)
    raise DifkitError(f"unknown format {fmt!r}")


def render_cluster_table(rows: list, fmt="md") -> str:
    header = ["cluster", "group 0", "group 1", "response 0", "response 1"]
    table = [
        [r.label, r.n_group0, r.n_group1, r.n_response0, r.n_response1]
        for r in rows
    ]
    if fmt == "json":
        return json.dumps(
            [
                {
                    "cluster": r.label,
                    "n_group0": r.n_group0, "n_group1": r.n_group1,
                    "n_response0": r.n_response0, "n_response1": r.n_response1,
                }
                for r in rows
            ],
            indent=2,
        )
    if fmt == "md":
        return _markdown_table(header, table)
    if fmt == "csv":
        return _csv_table(header, table)
    raise DifkitError(f"unknown format {fmt!r}")


@dataclass
class DatasetSummary:
    """Outcome of a prepare run: sizes, drop accounting, cluster table."""

    n_records: int
    n_group0: int
    n_group1: int
    n_clusters: int
    provenance: str
    drop_counts: dict
    clusters: list | None = None

    def to_json_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_group0": self.n_group0,
            "n_group1": self.n_group1,
            "n_clusters": self.n_clusters,
            "provenance": self.provenance,
            "drop_counts": self.drop_counts,
            "clusters": [
                {
                    "cluster": r.label,
                    "n_group0": r.n_group0, "n_group1": r.n_group1,
                    "n_response0": r.n_response0, "n_response1": r.n_response1,
                }
                for r in (self.clusters or [])
            ],
        }


def summarize_dataset(ds: DifDataset) -> DatasetSummary:
    n0, n1 = ds.group_counts()
    return DatasetSummary(
        n_records=ds.n,
        n_group0=n0,
        n_group1=n1,
        n_clusters=ds.cluster_count,
        provenance=ds.provenance,
        drop_counts=dict(ds.drop_counts),
        clusters=cluster_table(ds) if ds.has_clusters else [],
    )


def render_dataset_summary(summary: DatasetSummary, fmt="md") -> str:
    if fmt == "json":
        return json.dumps(summary.to_json_dict(), indent=2)
    lines = [
        f"records: {summary.n_records}",
        f"group 0 / group 1: {summary.n_group0} / {summary.n_group1}",
        f"clusters: {summary.n_clusters}",
        f"source: {summary.provenance}",
        "dropped rows: " + ", ".join(
            f"{k}={v}" for k, v in summary.drop_counts.items()
        ),
    ]
    head = "\n".join(lines) + "\n"
    if summary.clusters:
        head += "\n" + render_cluster_table(summary.clusters, fmt=fmt)
    return head


def decision_to_json_dict(decision: DifDecision) -> dict:
    return {
        "method": decision.method,
        "statistic": decision.statistic,
        "df": decision.df,
        "p": decision.p,
        "effect": decision.effect,
        "verdict": decision.verdict,
        "alpha": decision.alpha,
        "details": _jsonable(decision.details),
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def render_decision(decision: DifDecision, fmt="md") -> str:
    if fmt == "json":
        return json.dumps(decision_to_json_dict(decision), indent=2)
    if decision.method == "mh":
        d = decision.details
        rows = [
            ["chi2_MH",
             f"{decision.statistic:.3f}{significance_stars(decision.p)}",
             f"{decision.p:.4f}"],
            ["alpha_MH", f"{d['alpha_hat']:.3f}", ""],
            ["delta_MH", f"{d['delta_hat']:.3f}", ""],
            ["Effect Size", d["ets_class"], ""],
            ["Verdict", decision.verdict, ""],
        ]
        header = ["Measure", "Statistic", "p-value"]
    elif decision.method == "lord":
        d = decision.details
        rows = [[
            d["studied_item"], len(d["item_set"]),
            f"{decision.statistic:.4f}", f"{decision.p:.4f}",
            decision.verdict,
        ]]
        header = ["Item", "Set size", "chi2_Lord", "p-value", "Verdict"]
    else:
        rows = [[
            decision.method, f"{decision.statistic:.4f}", decision.df,
            f"{decision.p:.4f}",
            "" if decision.effect is None else f"{decision.effect:.4f}",
            decision.verdict,
        ]]
        header = ["Method", "Statistic", "df", "p-value", "Effect", "Verdict"]
    if fmt == "md":
        return _markdown_table(header, rows)
    if fmt == "csv":
        return _csv_table(header, rows)
    raise DifkitError(f"unknown format {fmt!r}")


def render_sim_report(report: SimReport, fmt="md") -> str:
    if fmt == "json":
        return json.dumps(report.to_json_dict(), indent=2)
    header = ["method", "evaluated", "rejections", "rejection rate",
              "MC SE", "estimate mean", "estimate SD", "failures",
              "nonconverged"]
    rows = []
    for name, s in report.methods.items():
        rows.append([
            name, s.evaluated, s.rejections,
            "" if s.rejection_rate is None else f"{s.rejection_rate:.4f}",
            "" if s.mc_se is None else f"{s.mc_se:.4f}",
            "" if s.estimate_mean is None else f"{s.estimate_mean:.4f}",
            "" if s.estimate_sd is None else f"{s.estimate_sd:.4f}",
            s.failures, s.nonconverged,
        ])
    if fmt == "md":
        return _markdown_table(header, rows)
    if fmt == "csv":
        return _csv_table(header, rows)
    raise DifkitError(f"unknown format {fmt!r}")
