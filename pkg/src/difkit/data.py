"""Canonical dataset for DIF analysis and ingestion from delimited files.

A dataset is one record per respondent: a binary item response, a binary
group label (0 = reference, 1 = focal), a continuous matching trait, and an
optional cluster label identifying the level-2 unit the respondent belongs
to. Ingestion recodes raw survey extracts into this form under a declarative
:class:`RecodeSpec` and accounts for every dropped row.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    EmptyResultError,
    MissingColumnError,
    PreconditionError,
    UnmappedCodeError,
)

DROP = "drop"


@dataclass(frozen=True)
class RespondentRecord:
    """A single respondent: response, group, matching trait, optional cluster."""

    response: int
    group: int
    trait: float
    cluster: str | None = None

    def __post_init__(self):
        if self.response not in (0, 1):
            raise DataError(f"response must be 0 or 1, got {self.response!r}")
        if self.group not in (0, 1):
            raise DataError(f"group must be 0 or 1, got {self.group!r}")
        if not math.isfinite(self.trait):
            raise DataError(f"trait must be finite, got {self.trait!r}")


@dataclass(frozen=True)
class RecodeSpec:
    """Declarative recoding rules for one delimited survey extract.

    ``response_map`` and ``group_map`` send every observed raw code to 0, 1,
    or ``"drop"``; an observed code missing from its map is an error, not a
    silent drop. ``drop_codes`` lists raw codes excluded wherever they appear
    in the trait or cluster columns.
    """

    response_column: str
    group_column: str
    trait_column: str
    response_map: dict
    group_map: dict
    cluster_column: str | None = None
    drop_codes: tuple = ()

    def __post_init__(self):
        for name, mapping in (("response_map", self.response_map),
                              ("group_map", self.group_map)):
            for code, target in mapping.items():
                if target not in (0, 1, DROP):
                    raise ConfigError(
                        f"{name}[{code!r}] must be 0, 1, or {DROP!r}, got {target!r}"
                    )

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RecodeSpec":
        try:
            return cls(
                response_column=obj["response_column"],
                group_column=obj["group_column"],
                trait_column=obj["trait_column"],
                cluster_column=obj.get("cluster_column"),
                response_map=dict(obj["response_map"]),
                group_map=dict(obj["group_map"]),
                drop_codes=tuple(str(c) for c in obj.get("drop_codes", ())),
            )
        except KeyError as exc:
            raise ConfigError(f"recode config is missing key {exc}") from exc

    @classmethod
    def from_file(cls, path) -> "RecodeSpec":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read recode config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"recode config {path} is not valid JSON: {exc}") from exc
        return cls.from_json_dict(obj)


class DifDataset:
    """Immutable column store of respondent records.

    Cluster labels are re-indexed to a contiguous 0..C-1 internal index in
    label order (numeric-aware); the original labels are retained for
    reporting. Arrays are read-only so a dataset can be shared freely.
    """

    def __init__(self, response, group, trait, cluster_index=None,
                 cluster_labels=(), provenance="", drop_counts=None):
        self.response = np.asarray(response, dtype=np.int8)
        self.group = np.asarray(group, dtype=np.int8)
        self.trait = np.asarray(trait, dtype=np.float64)
        self.cluster_labels = tuple(str(c) for c in cluster_labels)
        self.cluster_index = (
            None if cluster_index is None
            else np.asarray(cluster_index, dtype=np.int64)
        )
        self.provenance = provenance
        self.drop_counts = dict(drop_counts or {})
        self._validate()
        for arr in (self.response, self.group, self.trait, self.cluster_index):
            if arr is not None:
                arr.setflags(write=False)

    def _validate(self):
        n = len(self.response)
        if len(self.group) != n or len(self.trait) != n:
            raise DataError("response, group, and trait must have equal length")
        if not np.isin(self.response, (0, 1)).all():
            raise DataError("responses must be binary 0/1")
        if not np.isin(self.group, (0, 1)).all():
            raise DataError("group labels must be binary 0/1")
        if not np.isfinite(self.trait).all():
            raise DataError("trait values must be finite")
        if self.cluster_index is not None:
            if len(self.cluster_index) != n:
                raise DataError("cluster index must have one entry per record")
            c = len(self.cluster_labels)
            if n and (self.cluster_index.min() < 0 or self.cluster_index.max() >= c):
                raise DataError("cluster indices must lie in 0..cluster_count-1")

    @classmethod
    def from_records(cls, records, provenance="", drop_counts=None) -> "DifDataset":
        records = list(records)
        response = [r.response for r in records]
        group = [r.group for r in records]
        trait = [r.trait for r in records]
        clusters = [r.cluster for r in records]
        has_cluster = any(c is not None for c in clusters)
        if has_cluster:
            if any(c is None for c in clusters):
                raise DataError("either all records carry a cluster label or none do")
            labels = sorted(set(clusters), key=_label_sort_key)
            index_of = {lab: i for i, lab in enumerate(labels)}
            cluster_index = [index_of[c] for c in clusters]
        else:
            labels, cluster_index = (), None
        return cls(response, group, trait, cluster_index, labels,
                   provenance, drop_counts)

    @property
    def n(self) -> int:
        return len(self.response)

    @property
    def cluster_count(self) -> int:
        return len(self.cluster_labels)

    @property
    def has_clusters(self) -> bool:
        return self.cluster_index is not None and self.cluster_count > 0

    def __len__(self):
        return self.n

    def records(self):
        """Iterate the dataset as RespondentRecord values, in ingest order."""
        for i in range(self.n):
            cluster = (
                self.cluster_labels[self.cluster_index[i]]
                if self.has_clusters else None
            )
            yield RespondentRecord(int(self.response[i]), int(self.group[i]),
                                   float(self.trait[i]), cluster)

    def group_counts(self) -> tuple[int, int]:
        n1 = int(self.group.sum())
        return self.n - n1, n1

    def to_csv(self, path=None) -> str | None:
        """Serialize to the canonical delimited form (deterministic)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if self.has_clusters:
            writer.writerow(["response", "group", "trait", "cluster"])
            for i in range(self.n):
                writer.writerow([
                    int(self.response[i]), int(self.group[i]),
                    _format_trait(self.trait[i]),
                    self.cluster_labels[self.cluster_index[i]],
                ])
        else:
            writer.writerow(["response", "group", "trait"])
            for i in range(self.n):
                writer.writerow([
                    int(self.response[i]), int(self.group[i]),
                    _format_trait(self.trait[i]),
                ])
        text = buf.getvalue()
        if path is None:
            return text
        Path(path).write_text(text, encoding="utf-8")
        return None

    @classmethod
    def read_canonical(cls, path, delimiter=",") -> "DifDataset":
        """Read a file previously written by :meth:`to_csv`."""
        spec = RecodeSpec(
            response_column="response", group_column="group",
            trait_column="trait",
            response_map={"0": 0, "1": 1}, group_map={"0": 0, "1": 1},
            cluster_column=None,
        )
        with open(path, "r", encoding="utf-8", newline="") as fh:
            header = csv.reader(fh, delimiter=delimiter)
            first = next(header, None)
        if first is not None and "cluster" in first:
            spec = RecodeSpec(
                response_column="response", group_column="group",
                trait_column="trait", cluster_column="cluster",
                response_map={"0": 0, "1": 1}, group_map={"0": 0, "1": 1},
            )
        return ingest(path, spec, delimiter=delimiter)


def _label_sort_key(label):
    try:
        return (0, float(label), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(label))


def _format_trait(value: float) -> str:
    return repr(float(value))


def ingest(path, spec: RecodeSpec, delimiter=",") -> DifDataset:
    """Read a delimited file and recode it into a :class:`DifDataset`.

    Rows whose response or group code maps to ``drop``, whose trait or
    cluster code is listed in ``drop_codes``, or with a missing required
    cell are excluded and counted per reason. An observed response/group
    code absent from its map raises :class:`UnmappedCodeError`.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"input file not found: {path}")

    required = [spec.response_column, spec.group_column, spec.trait_column]
    if spec.cluster_column is not None:
        required.append(spec.cluster_column)

    drops = {"response": 0, "group": 0, "drop_code": 0, "missing": 0}
    records = []
    drop_codes = set(spec.drop_codes)

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        if reader.fieldnames is None:
            raise DataError(f"{path} is empty (no header row)")
        missing_cols = [c for c in required if c not in reader.fieldnames]
        if missing_cols:
            raise MissingColumnError(
                f"column(s) {missing_cols} not found in {path}; "
                f"header has {reader.fieldnames}"
            )

        for row_num, row in enumerate(reader, start=1):
            raw = {c: (row.get(c) or "").strip() for c in required}
            if any(raw[c] == "" for c in required):
                drops["missing"] += 1
                continue

            r_code, g_code = raw[spec.response_column], raw[spec.group_column]
            if r_code not in spec.response_map:
                raise UnmappedCodeError(spec.response_column, r_code, row_num)
            if g_code not in spec.group_map:
                raise UnmappedCodeError(spec.group_column, g_code, row_num)

            response = spec.response_map[r_code]
            group = spec.group_map[g_code]
            if response == DROP:
                drops["response"] += 1
                continue
            if group == DROP:
                drops["group"] += 1
                continue

            t_code = raw[spec.trait_column]
            if t_code in drop_codes:
                drops["drop_code"] += 1
                continue
            cluster = None
            if spec.cluster_column is not None:
                cluster = raw[spec.cluster_column]
                if cluster in drop_codes:
                    drops["drop_code"] += 1
                    continue
            try:
                trait = float(t_code)
            except ValueError:
                raise DataError(
                    f"trait value {t_code!r} at data row {row_num} is not numeric"
                ) from None
            if not math.isfinite(trait):
                drops["missing"] += 1
                continue

            records.append(RespondentRecord(response, group, trait, cluster))

    if not records:
        raise EmptyResultError(
            f"no records survived recoding of {path} "
            f"(dropped: {_drop_summary(drops)})"
        )

    provenance = f"{path.name} (dropped: {_drop_summary(drops)})"
    return DifDataset.from_records(records, provenance=provenance,
                                   drop_counts=drops)


def _drop_summary(drops: dict) -> str:
    return ", ".join(f"{k}={v}" for k, v in drops.items())


@dataclass(frozen=True)
class ClusterRow:
    """Per-cluster tallies by group membership and by response value."""

    label: str
    n_group0: int
    n_group1: int
    n_response0: int
    n_response1: int

    @property
    def total(self) -> int:
        return self.n_group0 + self.n_group1


def cluster_table(ds: DifDataset) -> list[ClusterRow]:
    """Tabulate record counts per cluster, split by group and by response.

    Row order follows the dataset's cluster label order; the column sums
    equal the whole-dataset counts.
    """
    if not ds.has_clusters:
        raise PreconditionError("dataset has no cluster labels")
    rows = []
    for i, label in enumerate(ds.cluster_labels):
        mask = ds.cluster_index == i
        g = ds.group[mask]
        r = ds.response[mask]
        rows.append(ClusterRow(
            label=label,
            n_group0=int((g == 0).sum()), n_group1=int((g == 1).sum()),
            n_response0=int((r == 0).sum()), n_response1=int((r == 1).sum()),
        ))
    return rows


# Recode rules for the 2022 NSDUH extract analyzed throughout the docs:
# item ADDPREV (1=Yes, 2=No, 85/94/97/98/99 invalid), group PDEN10
# (1=large metro, 2=small metro, 3=non-CBSA), trait KSSLR6MON (0-24),
# clusters IREDUHIGHST2 (education level 1-11).
NSDUH_2022_RECODE = RecodeSpec(
    response_column="ADDPREV",
    group_column="PDEN10",
    trait_column="KSSLR6MON",
    cluster_column="IREDUHIGHST2",
    response_map={"1": 1, "2": 0, "85": DROP, "94": DROP, "97": DROP,
                  "98": DROP, "99": DROP},
    group_map={"1": 1, "2": 0, "3": DROP},
)
