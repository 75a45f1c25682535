"""Seeded generation of clustered binary DIF data and Monte Carlo studies.

Each replication draws cluster intercepts from N(0, tau2), per-person
group membership and traits from the configured distributions, and
responses from the logistic model

    logit P(y=1) = b0 + U_cluster + b1 * trait + b2 * group
                   + b3 * trait * group.

Replication ``i`` uses the PCG64 stream seeded with ``seed XOR
splitmix64(i)``, so replications are reproducible independently of
execution order. The harness tabulates per-method rejection rates with
Monte Carlo standard errors and running moments of the effect estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DifDataset
from .dif import NO_DIF, lr_dif, mh_dif, mlr_dif
from .errors import DifkitError, PreconditionError

_MASK64 = (1 << 64) - 1


def splitmix64(value: int) -> int:
    """One step of the splitmix64 sequence (used for stream seeding)."""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def replication_seed(seed: int, replication: int) -> int:
    return (seed & _MASK64) ^ splitmix64(replication)


@dataclass(frozen=True)
class SimConfig:
    """Generator settings for one clustered-DIF scenario."""

    n_clusters: int
    cluster_size: int | tuple
    tau2: float
    coefficients: tuple  # (b0, b1, b2, b3)
    trait_reference: tuple = (0.0, 1.0)  # (mean, sd)
    trait_focal: tuple = (0.0, 1.0)
    p_focal: float = 0.5
    seed: int = 0
    replications: int = 1

    def __post_init__(self):
        object.__setattr__(self, "coefficients",
                           tuple(float(c) for c in self.coefficients))
        object.__setattr__(self, "trait_reference",
                           tuple(float(v) for v in self.trait_reference))
        object.__setattr__(self, "trait_focal",
                           tuple(float(v) for v in self.trait_focal))
        if self.n_clusters < 1:
            raise PreconditionError("n_clusters must be >= 1")
        if self.tau2 < 0:
            raise PreconditionError("tau2 must be >= 0")
        if not 0.0 <= self.p_focal <= 1.0:
            raise PreconditionError("p_focal must lie in [0, 1]")
        if self.replications < 1:
            raise PreconditionError("replications must be >= 1")
        if len(self.coefficients) != 4:
            raise PreconditionError("coefficients must be (b0, b1, b2, b3)")
        sizes = self.cluster_sizes()
        if len(sizes) != self.n_clusters or any(s < 1 for s in sizes):
            raise PreconditionError(
                "cluster_size must be a positive int or one per cluster"
            )

    def cluster_sizes(self) -> tuple:
        if isinstance(self.cluster_size, int):
            return (self.cluster_size,) * self.n_clusters
        return tuple(int(s) for s in self.cluster_size)

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SimConfig":
        try:
            cluster_size = obj["cluster_size"]
            if isinstance(cluster_size, list):
                cluster_size = tuple(cluster_size)
            return cls(
                n_clusters=int(obj["n_clusters"]),
                cluster_size=cluster_size,
                tau2=float(obj["tau2"]),
                coefficients=tuple(obj["coefficients"]),
                trait_reference=tuple(obj.get("trait_reference", (0.0, 1.0))),
                trait_focal=tuple(obj.get("trait_focal", (0.0, 1.0))),
                p_focal=float(obj.get("p_focal", 0.5)),
                seed=int(obj.get("seed", 0)),
                replications=int(obj.get("replications", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PreconditionError(f"bad simulation config: {exc}") from exc

    def to_json_dict(self) -> dict:
        return {
            "n_clusters": self.n_clusters,
            "cluster_size": (
                self.cluster_size if isinstance(self.cluster_size, int)
                else list(self.cluster_size)
            ),
            "tau2": self.tau2,
            "coefficients": list(self.coefficients),
            "trait_reference": list(self.trait_reference),
            "trait_focal": list(self.trait_focal),
            "p_focal": self.p_focal,
            "seed": self.seed,
            "replications": self.replications,
        }


def generate(config: SimConfig, replication: int = 0) -> DifDataset:
    """Draw one replication's dataset; fully determined by (seed, index)."""
    rng = np.random.Generator(
        np.random.PCG64(replication_seed(config.seed, replication))
    )
    sizes = config.cluster_sizes()
    n = sum(sizes)
    cl = np.repeat(np.arange(config.n_clusters), sizes)
    u = rng.normal(0.0, np.sqrt(config.tau2), size=config.n_clusters)
    group = (rng.random(n) < config.p_focal).astype(np.int8)
    z = rng.standard_normal(n)
    mu_r, sd_r = config.trait_reference
    mu_f, sd_f = config.trait_focal
    trait = np.where(group == 1, mu_f + sd_f * z, mu_r + sd_r * z)
    b0, b1, b2, b3 = config.coefficients
    eta = b0 + u[cl] + b1 * trait + b2 * group + b3 * trait * group
    prob = 0.5 * (1.0 + np.tanh(0.5 * eta))
    response = (rng.random(n) < prob).astype(np.int8)
    labels = tuple(str(i + 1) for i in range(config.n_clusters))
    return DifDataset(
        response=response,
        group=group,
        trait=trait,
        cluster_index=cl,
        cluster_labels=labels,
        provenance=f"simulated(seed={config.seed}, replication={replication})",
    )


class Welford:
    """Running mean/variance with an order-independent merge."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, value: float):
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (value - self.mean)

    def merge(self, other: "Welford"):
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean, other.m2
            return
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / total
        self.m2 += other.m2 + delta ** 2 * self.count * other.count / total
        self.count = total

    @property
    def sd(self):
        if self.count < 2:
            return None
        return float(np.sqrt(self.m2 / (self.count - 1)))


@dataclass
class MethodSummary:
    """Tabulated outcomes of one method across replications."""

    method: str
    evaluated: int = 0
    rejections: int = 0
    failures: int = 0
    nonconverged: int = 0
    _moments: Welford = field(default_factory=Welford)

    @property
    def rejection_rate(self) -> float | None:
        if self.evaluated == 0:
            return None
        return self.rejections / self.evaluated

    @property
    def mc_se(self) -> float | None:
        r = self.rejection_rate
        if r is None:
            return None
        return float(np.sqrt(r * (1.0 - r) / self.evaluated))

    @property
    def estimate_mean(self) -> float | None:
        return self._moments.mean if self._moments.count else None

    @property
    def estimate_sd(self) -> float | None:
        return self._moments.sd

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "evaluated": self.evaluated,
            "rejections": self.rejections,
            "failures": self.failures,
            "nonconverged": self.nonconverged,
            "rejection_rate": self.rejection_rate,
            "mc_se": self.mc_se,
            "estimate_mean": self.estimate_mean,
            "estimate_sd": self.estimate_sd,
        }


@dataclass(frozen=True)
class SimReport:
    """Monte Carlo study outcome: per-method rates and estimate moments."""

    config: SimConfig
    alpha: float
    methods: dict

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_json_dict(),
            "alpha": self.alpha,
            "replications": self.config.replications,
            "methods": {
                name: summary.to_json_dict()
                for name, summary in self.methods.items()
            },
        }


_METHODS = ("mh", "lr", "mlr")


def _apply_method(method, ds, alpha):
    if method == "mh":
        decision = mh_dif(ds, alpha=alpha)
        converged = True
    elif method == "lr":
        decision = lr_dif(ds, alpha=alpha)
        converged = decision.details["fit_full"]["converged"]
    else:
        decision = mlr_dif(ds, alpha=alpha)
        converged = decision.details["fit"]["converged"]
    return decision, converged


def run_study(config: SimConfig, methods=("mh", "lr", "mlr"),
              alpha=0.05) -> SimReport:
    """Run the configured replications and tabulate each method.

    A replication where a method raises is recorded as a failure for that
    method and the study continues; rejection means any DIF verdict at the
    given alpha.
    """
    methods = tuple(methods)
    unknown = [m for m in methods if m not in _METHODS]
    if unknown:
        raise PreconditionError(
            f"unknown method(s) {unknown}; choose from {_METHODS}"
        )
    summaries = {m: MethodSummary(method=m) for m in methods}
    for rep in range(config.replications):
        ds = generate(config, rep)
        for method in methods:
            summary = summaries[method]
            try:
                decision, converged = _apply_method(method, ds, alpha)
            except DifkitError:
                summary.failures += 1
                continue
            summary.evaluated += 1
            if not converged:
                summary.nonconverged += 1
            if decision.verdict != NO_DIF:
                summary.rejections += 1
            if decision.effect is not None:
                summary._moments.add(float(decision.effect))
    return SimReport(config=config, alpha=alpha, methods=summaries)
