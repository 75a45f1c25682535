"""One-parameter IRT calibration by marginal maximum likelihood.

Items follow a 1PL response model P(theta) = sigmoid(a (theta - b_j)) with
a common discrimination ``a`` and per-item difficulties ``b_j``; the latent
trait is standard normal. Estimation is Bock-Aitkin EM on a fixed
normal-density quadrature grid, followed by a short Newton refinement of
the same marginal likelihood so difficulties and their standard errors are
tight enough for between-group Wald comparisons. A flag forces ``a = 1``
(pure Rasch).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError, PreconditionError

QUAD_POINTS = 21
QUAD_RANGE = 5.0
EM_LL_RTOL = 1e-6
EM_MAX_ITER = 500
DISCRIMINATION_BOUNDS = (1e-3, 50.0)
DIFFICULTY_BOUND = 30.0
DEFAULT_MIN_PERSONS = 30


@dataclass(frozen=True)
class ItemResponseMatrix:
    """Binary person-by-item responses with a per-person group label."""

    responses: np.ndarray
    group: np.ndarray
    item_names: tuple

    def __post_init__(self):
        responses = np.asarray(self.responses, dtype=np.int8)
        group = np.asarray(self.group, dtype=np.int8)
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "group", group)
        if responses.ndim != 2:
            raise DataError("responses must be a persons x items matrix")
        if not np.isin(responses, (0, 1)).all():
            raise DataError("item responses must be binary 0/1")
        if group.shape != (responses.shape[0],):
            raise DataError("group labels must have one entry per person")
        if not np.isin(group, (0, 1)).all():
            raise DataError("group labels must be binary 0/1")
        if len(self.item_names) != responses.shape[1]:
            raise DataError("item_names must match the response columns")
        responses.setflags(write=False)
        group.setflags(write=False)

    @property
    def n_persons(self) -> int:
        return self.responses.shape[0]

    @property
    def n_items(self) -> int:
        return self.responses.shape[1]

    def subset(self, item_names) -> "ItemResponseMatrix":
        missing = [n for n in item_names if n not in self.item_names]
        if missing:
            raise PreconditionError(f"unknown item(s) {missing}")
        idx = [self.item_names.index(n) for n in item_names]
        return ItemResponseMatrix(
            self.responses[:, idx].copy(), self.group.copy(), tuple(item_names)
        )

    @classmethod
    def from_csv(cls, path, group_column, item_columns=None, delimiter=","):
        """Read a delimited file of 0/1 item columns plus a group column."""
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh, delimiter=delimiter)
            if reader.fieldnames is None:
                raise DataError(f"{path} is empty")
            if group_column not in reader.fieldnames:
                raise DataError(
                    f"group column {group_column!r} not in {reader.fieldnames}"
                )
            names = (
                tuple(item_columns)
                if item_columns is not None
                else tuple(c for c in reader.fieldnames if c != group_column)
            )
            rows, groups = [], []
            for i, row in enumerate(reader, start=1):
                try:
                    rows.append([int(row[c]) for c in names])
                    groups.append(int(row[group_column]))
                except (KeyError, TypeError, ValueError):
                    raise DataError(
                        f"non-binary or missing cell at data row {i} of {path}"
                    ) from None
        return cls(np.array(rows), np.array(groups), names)


@dataclass(frozen=True)
class IrtCalibration:
    """Per-item difficulties with variances, on a mean-0/variance-1 scale."""

    item_names: tuple
    difficulties: np.ndarray
    difficulty_vars: np.ndarray
    discrimination: float
    group: int | None
    log_likelihood: float
    loglik_history: tuple
    n_persons: int
    converged: bool
    excluded_items: tuple = ()
    warnings: tuple = ()
    link_shift: float = 0.0

    def difficulty(self, item: str) -> float:
        return float(self.difficulties[self.item_names.index(item)])

    def difficulty_var(self, item: str) -> float:
        return float(self.difficulty_vars[self.item_names.index(item)])


def _quadrature_grid(n_points=QUAD_POINTS, span=QUAD_RANGE):
    nodes = np.linspace(-span, span, n_points)
    weights = np.exp(-0.5 * nodes ** 2)
    return nodes, weights / weights.sum()


def _item_logprobs(a, b, nodes):
    # z[j, k] = a * (theta_k - b_j)
    z = a * (nodes[None, :] - b[:, None])
    log_p = -np.logaddexp(0.0, -z)
    log_q = -np.logaddexp(0.0, z)
    return log_p, log_q


def _estep(Y, a, b, nodes, log_weights):
    """Posterior node weights, expected counts, and the marginal loglik."""
    log_p, log_q = _item_logprobs(a, b, nodes)
    joint = Y @ log_p + (1.0 - Y) @ log_q + log_weights[None, :]
    peak = joint.max(axis=1)
    norm = peak + np.log(np.exp(joint - peak[:, None]).sum(axis=1))
    w = np.exp(joint - norm[:, None])
    ll = float(norm.sum())
    r = Y.T @ w            # expected endorsements per item and node
    m = w.sum(axis=0)      # expected persons per node
    return ll, w, r, m


def _score(Y, a, b, nodes, log_weights, estimate_a):
    """Analytic score of the marginal log-likelihood (Fisher's identity)."""
    _, _, r, m = _estep(Y, a, b, nodes, log_weights)
    z = a * (nodes[None, :] - b[:, None])
    P = 0.5 * (1.0 + np.tanh(0.5 * z))
    resid = r - m[None, :] * P
    s_b = -a * resid.sum(axis=1)
    if not estimate_a:
        return s_b
    s_a = float((resid * (nodes[None, :] - b[:, None])).sum())
    return np.append(s_b, s_a)


def _mstep(r, m, a, b, nodes, estimate_a, cycles=50, tol=1e-10):
    """Maximize the expected complete-data log-likelihood by coordinate
    Newton updates (items in parallel, then the shared discrimination)."""

    def q_value(a_, b_):
        log_p, log_q = _item_logprobs(a_, b_, nodes)
        return float((r * log_p + (m[None, :] - r) * log_q).sum())

    q_prev = q_value(a, b)
    for _ in range(cycles):
        # Per-item difficulty updates.
        z = a * (nodes[None, :] - b[:, None])
        P = 0.5 * (1.0 + np.tanh(0.5 * z))
        resid = (r - m[None, :] * P).sum(axis=1)
        info = (m[None, :] * P * (1.0 - P)).sum(axis=1) * a ** 2
        step = np.where(info > 0, -a * resid / np.maximum(info, 1e-12), 0.0)
        for _ in range(30):
            b_new = np.clip(b - step, -DIFFICULTY_BOUND, DIFFICULTY_BOUND)
            if q_value(a, b_new) >= q_prev - 1e-12:
                break
            step *= 0.5
        b = b_new

        if estimate_a:
            z = a * (nodes[None, :] - b[:, None])
            P = 0.5 * (1.0 + np.tanh(0.5 * z))
            dev = nodes[None, :] - b[:, None]
            s_a = ((r - m[None, :] * P) * dev).sum()
            i_a = (m[None, :] * P * (1.0 - P) * dev ** 2).sum()
            step_a = s_a / max(i_a, 1e-12)
            for _ in range(30):
                a_new = float(np.clip(a + step_a, *DISCRIMINATION_BOUNDS))
                if q_value(a_new, b) >= q_prev - 1e-12:
                    break
                step_a *= 0.5
            a = a_new

        q_now = q_value(a, b)
        if q_now - q_prev < tol * (abs(q_prev) + 1.0):
            q_prev = q_now
            break
        q_prev = q_now
    return a, b


def fit_1pl(matrix: ItemResponseMatrix, group=None, *,
            force_unit_discrimination=False, min_persons=DEFAULT_MIN_PERSONS,
            max_iter=EM_MAX_ITER, refine=True) -> IrtCalibration:
    """Calibrate item difficulties for one group (or the pooled sample).

    The marginal log-likelihood is non-decreasing across iterations (the
    recorded history asserts this downstream). Items answered identically
    by every person in the filtered group cannot be calibrated and raise
    :class:`DataError`.
    """
    if matrix.n_items < 2:
        raise PreconditionError("calibration needs at least 2 items")
    if group is None:
        Y = matrix.responses.astype(float)
    else:
        Y = matrix.responses[matrix.group == group].astype(float)
    n = Y.shape[0]
    if n < min_persons:
        raise PreconditionError(
            f"calibration group has {n} persons; floor is {min_persons}"
        )
    p_hat = Y.mean(axis=0)
    keep = (p_hat > 0.0) & (p_hat < 1.0)
    excluded = tuple(
        name for name, ok in zip(matrix.item_names, keep) if not ok
    )
    warnings = ()
    item_names = matrix.item_names
    if excluded:
        warnings = (
            f"excluded item(s) with constant responses in this group: "
            f"{', '.join(excluded)}",
        )
        Y = Y[:, keep]
        p_hat = p_hat[keep]
        item_names = tuple(
            name for name, ok in zip(matrix.item_names, keep) if ok
        )
        if len(item_names) < 2:
            raise DataError(
                "fewer than 2 calibratable items remain after excluding "
                f"{excluded}"
            )

    nodes, weights = _quadrature_grid()
    log_weights = np.log(weights)
    a = 1.0
    b = np.clip(-np.log(p_hat / (1.0 - p_hat)), -3.0, 3.0)
    estimate_a = not force_unit_discrimination

    history = []
    ll_prev = None
    converged = False
    for _ in range(max_iter):
        ll, _, r, m = _estep(Y, a, b, nodes, log_weights)
        history.append(ll)
        if ll_prev is not None and (
            abs(ll - ll_prev) < EM_LL_RTOL * (abs(ll_prev) + 0.1)
        ):
            converged = True
            break
        ll_prev = ll
        a, b = _mstep(r, m, a, b, nodes, estimate_a)
    if not converged:
        raise NumericalError(
            "EM did not converge within "
            f"{max_iter} iterations; last log-likelihoods {history[-5:]}"
        )

    if refine:
        a, b, history = _newton_refine(
            Y, a, b, nodes, log_weights, estimate_a, history
        )

    ll, _, _, _ = _estep(Y, a, b, nodes, log_weights)
    info = _observed_information(Y, a, b, nodes, log_weights, estimate_a)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "observed information is singular; item variances unavailable"
        ) from exc
    b_vars = np.diag(cov)[: len(b)].copy()
    if (b_vars <= 0).any():
        raise NumericalError("non-positive difficulty variance estimate")

    return IrtCalibration(
        item_names=item_names,
        difficulties=b.copy(),
        difficulty_vars=b_vars,
        discrimination=float(a),
        group=group,
        log_likelihood=ll,
        loglik_history=tuple(history),
        n_persons=n,
        converged=True,
        excluded_items=excluded,
        warnings=warnings,
    )


def _pack(a, b, estimate_a):
    return np.append(b, a) if estimate_a else b.copy()


def _unpack(theta, n_items, a, estimate_a):
    if estimate_a:
        return float(theta[-1]), theta[:n_items]
    return a, theta


def _marginal_ll(Y, theta, nodes, log_weights, n_items, a0, estimate_a):
    a, b = _unpack(theta, n_items, a0, estimate_a)
    ll, _, _, _ = _estep(Y, a, b, nodes, log_weights)
    return ll


def _newton_refine(Y, a, b, nodes, log_weights, estimate_a, history,
                   max_steps=25, gtol=1e-9):
    """Polish the EM solution on the same marginal likelihood; each step is
    damped, so the likelihood trace stays non-decreasing."""
    n_items = len(b)
    theta = _pack(a, b, estimate_a)
    ll = _marginal_ll(Y, theta, nodes, log_weights, n_items, a, estimate_a)
    history = list(history)
    for _ in range(max_steps):
        a_cur, b_cur = _unpack(theta, n_items, a, estimate_a)
        score = _score(Y, a_cur, b_cur, nodes, log_weights, estimate_a)
        if np.abs(score).max() < gtol * max(1.0, Y.shape[0]):
            break
        info = _observed_information(
            Y, a_cur, b_cur, nodes, log_weights, estimate_a
        )
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            break
        improved = False
        for _ in range(30):
            cand = theta + step
            ll_new = _marginal_ll(
                Y, cand, nodes, log_weights, n_items, a, estimate_a
            )
            if ll_new >= ll - 1e-12:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        theta, ll = cand, max(ll, ll_new)
        history.append(ll)
    a_fin, b_fin = _unpack(theta, n_items, a, estimate_a)
    return float(a_fin), b_fin, history


def _observed_information(Y, a, b, nodes, log_weights, estimate_a, h=1e-5):
    """Observed information as minus the central-difference Jacobian of the
    quadrature-based analytic score."""
    theta = _pack(a, b, estimate_a)
    n_items = len(b)
    dim = len(theta)
    H = np.empty((dim, dim))
    for j in range(dim):
        delta = h * max(1.0, abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += delta
        dn[j] -= delta
        a_up, b_up = _unpack(up, n_items, a, estimate_a)
        a_dn, b_dn = _unpack(dn, n_items, a, estimate_a)
        s_up = _score(Y, a_up, b_up, nodes, log_weights, estimate_a)
        s_dn = _score(Y, a_dn, b_dn, nodes, log_weights, estimate_a)
        H[:, j] = (s_up - s_dn) / (2.0 * delta)
    return -0.5 * (H + H.T)


def link_calibrations(ref: IrtCalibration, focal: IrtCalibration) -> IrtCalibration:
    """Place the focal difficulties on the reference scale by mean-mean
    equating over all items; variances are unchanged by the shift."""
    if ref.item_names != focal.item_names:
        raise PreconditionError(
            "calibrations cover different item sets: "
            f"{ref.item_names} vs {focal.item_names}"
        )
    shift = float(ref.difficulties.mean() - focal.difficulties.mean())
    return IrtCalibration(
        item_names=focal.item_names,
        difficulties=focal.difficulties + shift,
        difficulty_vars=focal.difficulty_vars.copy(),
        discrimination=focal.discrimination,
        group=focal.group,
        log_likelihood=focal.log_likelihood,
        loglik_history=focal.loglik_history,
        n_persons=focal.n_persons,
        converged=focal.converged,
        excluded_items=focal.excluded_items,
        warnings=focal.warnings,
        link_shift=shift,
    )


def posterior_trait_means(calib: IrtCalibration, responses) -> np.ndarray:
    """Expected a-posteriori trait for each response vector under the
    calibrated model."""
    Y = np.asarray(responses, dtype=float)
    nodes, weights = _quadrature_grid()
    log_weights = np.log(weights)
    log_p, log_q = _item_logprobs(
        calib.discrimination, calib.difficulties, nodes
    )
    joint = Y @ log_p + (1.0 - Y) @ log_q + log_weights[None, :]
    peak = joint.max(axis=1)
    w = np.exp(joint - peak[:, None])
    w /= w.sum(axis=1, keepdims=True)
    return w @ nodes
