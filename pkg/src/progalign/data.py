"""Cohort data containers, validation, and CSV ingestion.

Two long-format CSV files describe a cohort:

* observations: ``subject_id,marker_id,t,value,is_first_visit`` with one row
  per marker measurement (``marker_id`` is the marker name),
* subjects: ``subject_id,diagnosis_status,t_event,weight,<covariates...>``
  where ``t_event`` is the diagnosis time for diagnosed subjects and the
  last dementia-free visit time otherwise.

Times are years since study entry (t=0 at the first visit). Missing marker
values (empty cells) are skipped at load and never imputed.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_AGE_REFERENCE = 70.0


class CohortError(Exception):
    """Base error for cohort ingestion problems."""


class ParseError(CohortError):
    """A CSV cell could not be parsed; message carries the row number."""


class ValidationError(CohortError):
    """Structurally parsed data violates a cohort invariant."""


class DiagnosisStatus(str, Enum):
    DIAGNOSED = "diagnosed"
    CENSORED_FREE = "censored_free"


@dataclass(frozen=True)
class Subject:
    """One participant: covariate row plus diagnosis anchor information."""

    id: str
    covariates: tuple[float, ...]
    status: DiagnosisStatus
    t_diag: float | None = None
    t_last: float | None = None
    weight: float = 1.0

    def validate(self) -> None:
        if self.status is DiagnosisStatus.DIAGNOSED:
            if self.t_diag is None or self.t_last is not None:
                raise ValidationError(
                    f"subject {self.id!r}: diagnosed subjects need t_diag and no t_last"
                )
            if self.t_diag < 0:
                raise ValidationError(f"subject {self.id!r}: t_diag must be >= 0")
        else:
            if self.t_last is None or self.t_diag is not None:
                raise ValidationError(
                    f"subject {self.id!r}: censored subjects need t_last and no t_diag"
                )
            if self.t_last < 0:
                raise ValidationError(f"subject {self.id!r}: t_last must be >= 0")
        if not np.isfinite(self.weight) or self.weight <= 0:
            raise ValidationError(f"subject {self.id!r}: weight must be positive")
        if not all(np.isfinite(c) for c in self.covariates):
            raise ValidationError(f"subject {self.id!r}: non-finite covariate")

    @property
    def t_event(self) -> float:
        return self.t_diag if self.status is DiagnosisStatus.DIAGNOSED else self.t_last


@dataclass(frozen=True)
class Observation:
    """One marker measurement at time ``t`` (years from entry)."""

    subject_id: str
    marker_id: int
    t: float
    value: float
    is_first_visit: bool = False

    def validate(self) -> None:
        if self.t < 0 or not np.isfinite(self.t):
            raise ValidationError(
                f"observation ({self.subject_id!r}, marker {self.marker_id}, t={self.t}):"
                " t must be finite and >= 0"
            )
        if not np.isfinite(self.value):
            raise ValidationError(
                f"observation ({self.subject_id!r}, marker {self.marker_id}, t={self.t}):"
                " value must be finite"
            )


@dataclass
class CohortData:
    """Validated cohort: subjects, long-format observations, marker metadata.

    Immutable by convention after construction; sampler chains read it
    concurrently without copying.
    """

    subjects: list[Subject]
    observations: list[Observation]
    marker_names: list[str]
    marker_flip: list[bool]
    covariate_names: list[str] = field(default_factory=list)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_markers(self) -> int:
        return len(self.marker_names)

    def subject_index(self) -> dict[str, int]:
        return {s.id: i for i, s in enumerate(self.subjects)}

    def covariate_matrix(self) -> np.ndarray:
        return np.array([s.covariates for s in self.subjects], dtype=float).reshape(
            self.n_subjects, len(self.covariate_names)
        )

    def validate(self) -> None:
        if len(self.marker_flip) != len(self.marker_names):
            raise ValidationError("marker_flip and marker_names lengths differ")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subject ids")
        ncov = len(self.covariate_names)
        for s in self.subjects:
            s.validate()
            if len(s.covariates) != ncov:
                raise ValidationError(
                    f"subject {s.id!r}: expected {ncov} covariates, got {len(s.covariates)}"
                )
        known = set(ids)
        seen: set[tuple[str, int, float]] = set()
        with_obs: set[str] = set()
        for o in self.observations:
            o.validate()
            if o.subject_id not in known:
                raise ValidationError(f"observation references unknown subject {o.subject_id!r}")
            if not 0 <= o.marker_id < self.n_markers:
                raise ValidationError(
                    f"observation references unknown marker index {o.marker_id}"
                )
            key = (o.subject_id, o.marker_id, o.t)
            if key in seen:
                raise ValidationError(
                    f"duplicate observation for subject {o.subject_id!r}, "
                    f"marker {self.marker_names[o.marker_id]!r}, t={o.t}"
                )
            seen.add(key)
            with_obs.add(o.subject_id)
        missing = known - with_obs
        if missing:
            raise ValidationError(
                f"{len(missing)} subject(s) without any observation: "
                f"{sorted(missing)[:5]}"
            )

    def marker_arrays(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-marker columns (subject index, t, value, first-visit flag)."""
        index = self.subject_index()
        rows = [o for o in self.observations if o.marker_id == k]
        subj = np.array([index[o.subject_id] for o in rows], dtype=np.int64)
        t = np.array([o.t for o in rows], dtype=float)
        val = np.array([o.value for o in rows], dtype=float)
        fv = np.array([o.is_first_visit for o in rows], dtype=float)
        return subj, t, val, fv


@dataclass(frozen=True)
class ColumnSchema:
    """Column mapping between on-disk CSV headers and cohort fields.

    ``covariates`` lists the subject-file columns to use as the design row,
    in order; None means every column after the four reserved ones.
    ``center`` maps a covariate column to a reference value subtracted at
    load (e.g. ``{"age": 70.0}`` for the usual age centering).
    """

    subject_id: str = "subject_id"
    marker_id: str = "marker_id"
    t: str = "t"
    value: str = "value"
    is_first_visit: str = "is_first_visit"
    diagnosis_status: str = "diagnosis_status"
    t_event: str = "t_event"
    weight: str = "weight"
    covariates: tuple[str, ...] | None = None
    center: tuple[tuple[str, float], ...] = ()

    def centered(self) -> dict[str, float]:
        return dict(self.center)


_TRUE = {"1", "true", "True", "TRUE", "yes"}
_FALSE = {"0", "false", "False", "FALSE", "no", ""}


def _parse_bool(text: str, row: int, col: str) -> bool:
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ParseError(f"row {row}: column {col!r}: not a boolean: {text!r}")


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"row {row}: column {col!r}: not a number: {text!r}") from None


def _status_from(text: str, row: int) -> DiagnosisStatus:
    norm = text.strip().lower()
    if norm in ("diagnosed", "dementia", "1"):
        return DiagnosisStatus.DIAGNOSED
    if norm in ("censored_free", "censored", "free", "0"):
        return DiagnosisStatus.CENSORED_FREE
    raise ParseError(f"row {row}: unknown diagnosis status {text!r}")


def load_cohort(
    observations_path,
    subjects_path,
    schema: ColumnSchema | None = None,
    marker_names: list[str] | None = None,
    marker_flip: list[bool] | None = None,
) -> CohortData:
    """Read and validate the two cohort CSV files.

    Subjects without a single retained observation are dropped (with a
    logged count); observation rows with an empty value cell are skipped
    (missing at random: the corresponding likelihood terms are absent).
    Marker name order follows ``marker_names`` when given, else first
    appearance in the observations file.
    """
    schema = schema or ColumnSchema()
    subjects, cov_names = _read_subjects(subjects_path, schema)
    observations, names = _read_observations(observations_path, schema, marker_names)

    if marker_flip is None:
        marker_flip = [False] * len(names)
    if len(marker_flip) != len(names):
        raise ValidationError("marker_flip length does not match marker count")

    with_obs = {o.subject_id for o in observations}
    known = {s.id for s in subjects}
    orphan = with_obs - known
    if orphan:
        raise ValidationError(
            f"observations reference {len(orphan)} unknown subject(s): {sorted(orphan)[:5]}"
        )
    kept = [s for s in subjects if s.id in with_obs]
    dropped = len(subjects) - len(kept)
    if dropped:
        logger.warning("dropped %d subject(s) without observations", dropped)

    data = CohortData(
        subjects=kept,
        observations=observations,
        marker_names=names,
        marker_flip=list(marker_flip),
        covariate_names=cov_names,
    )
    data.validate()
    return data


def _read_subjects(path, schema: ColumnSchema) -> tuple[list[Subject], list[str]]:
    reserved = {schema.subject_id, schema.diagnosis_status, schema.t_event, schema.weight}
    centered = schema.centered()
    subjects: list[Subject] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty subjects file")
        header = list(reader.fieldnames)
        for col in (schema.subject_id, schema.diagnosis_status, schema.t_event):
            if col not in header:
                raise ParseError(f"{path}: missing column {col!r}")
        has_weight = schema.weight in header
        if schema.covariates is None:
            cov_cols = [c for c in header if c not in reserved]
        else:
            cov_cols = list(schema.covariates)
            for c in cov_cols:
                if c not in header:
                    raise ParseError(f"{path}: missing covariate column {c!r}")
        for rownum, row in enumerate(reader, start=2):
            if row.get(None):
                raise ParseError(f"row {rownum}: more cells than header columns")
            status = _status_from(row[schema.diagnosis_status], rownum)
            t_event = _parse_float(row[schema.t_event], rownum, schema.t_event)
            weight = 1.0
            if has_weight and row[schema.weight] not in ("", None):
                weight = _parse_float(row[schema.weight], rownum, schema.weight)
            covs = []
            for c in cov_cols:
                v = _parse_float(row[c], rownum, c)
                covs.append(v - centered.get(c, 0.0))
            subjects.append(
                Subject(
                    id=row[schema.subject_id],
                    covariates=tuple(covs),
                    status=status,
                    t_diag=t_event if status is DiagnosisStatus.DIAGNOSED else None,
                    t_last=t_event if status is DiagnosisStatus.CENSORED_FREE else None,
                    weight=weight,
                )
            )
    return subjects, cov_cols


def _read_observations(
    path, schema: ColumnSchema, marker_names: list[str] | None
) -> tuple[list[Observation], list[str]]:
    observations: list[Observation] = []
    names: list[str] = list(marker_names) if marker_names else []
    index = {n: i for i, n in enumerate(names)}
    fixed_markers = marker_names is not None
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty observations file")
        for col in (schema.subject_id, schema.marker_id, schema.t, schema.value):
            if col not in reader.fieldnames:
                raise ParseError(f"{path}: missing column {col!r}")
        has_fv = schema.is_first_visit in reader.fieldnames
        for rownum, row in enumerate(reader, start=2):
            if row.get(None):
                raise ParseError(f"row {rownum}: more cells than header columns")
            raw_value = row[schema.value]
            if raw_value is None or raw_value.strip() == "":
                skipped += 1
                continue
            marker = row[schema.marker_id]
            if marker not in index:
                if fixed_markers:
                    raise ValidationError(f"row {rownum}: unknown marker {marker!r}")
                index[marker] = len(names)
                names.append(marker)
            fv = _parse_bool(row[schema.is_first_visit], rownum, schema.is_first_visit) if has_fv else False
            observations.append(
                Observation(
                    subject_id=row[schema.subject_id],
                    marker_id=index[marker],
                    t=_parse_float(row[schema.t], rownum, schema.t),
                    value=_parse_float(raw_value, rownum, schema.value),
                    is_first_visit=fv,
                )
            )
    if skipped:
        logger.info("skipped %d observation row(s) with missing values", skipped)
    return observations, names


def write_cohort(data: CohortData, observations_path, subjects_path) -> None:
    """Write the two cohort CSVs in the canonical column layout."""
    with open(observations_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "marker_id", "t", "value", "is_first_visit"])
        for o in data.observations:
            writer.writerow(
                [
                    o.subject_id,
                    data.marker_names[o.marker_id],
                    repr(o.t),
                    repr(o.value),
                    int(o.is_first_visit),
                ]
            )
    with open(subjects_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["subject_id", "diagnosis_status", "t_event", "weight"] + list(data.covariate_names)
        )
        for s in data.subjects:
            writer.writerow(
                [s.id, s.status.value, repr(s.t_event), repr(s.weight)]
                + [repr(c) for c in s.covariates]
            )


def dataset_sha256(data: CohortData) -> str:
    """Content hash of the cohort, for cross-run compatibility checks."""
    h = hashlib.sha256()
    for name, flip in zip(data.marker_names, data.marker_flip):
        h.update(f"marker:{name}:{int(flip)}\n".encode())
    h.update(("covariates:" + ",".join(data.covariate_names) + "\n").encode())
    for s in data.subjects:
        h.update(
            f"subject:{s.id}:{s.status.value}:{s.t_event!r}:{s.weight!r}:"
            f"{','.join(repr(c) for c in s.covariates)}\n".encode()
        )
    for o in data.observations:
        h.update(
            f"obs:{o.subject_id}:{o.marker_id}:{o.t!r}:{o.value!r}:{int(o.is_first_visit)}\n".encode()
        )
    return h.hexdigest()


@dataclass(frozen=True)
class MarkerSummary:
    name: str
    n_subjects: int
    baseline_mean: float
    baseline_sd: float
    repeat_mean: float


@dataclass(frozen=True)
class CohortSummary:
    n_subjects: int
    markers: tuple[MarkerSummary, ...]
    covariate_means: tuple[tuple[str, float], ...]


def summarize_cohort(data: CohortData) -> CohortSummary:
    """Descriptive table: per-marker N / baseline mean / SD / repeat count,
    per-covariate mean (the proportion, for 0/1 indicators)."""
    if not data.subjects:
        raise ValidationError("empty cohort")
    rows = []
    for k, name in enumerate(data.marker_names):
        per_subject: dict[str, list[tuple[float, float]]] = {}
        for o in data.observations:
            if o.marker_id == k:
                per_subject.setdefault(o.subject_id, []).append((o.t, o.value))
        if not per_subject:
            rows.append(MarkerSummary(name, 0, float("nan"), float("nan"), float("nan")))
            continue
        baselines = np.array([min(v)[1] for v in per_subject.values()])
        counts = np.array([len(v) for v in per_subject.values()], dtype=float)
        sd = float(np.std(baselines, ddof=1)) if len(baselines) > 1 else float("nan")
        rows.append(
            MarkerSummary(
                name=name,
                n_subjects=len(per_subject),
                baseline_mean=float(np.mean(baselines)),
                baseline_sd=sd,
                repeat_mean=float(np.mean(counts)),
            )
        )
    cov = data.covariate_matrix()
    means = tuple(
        (name, float(cov[:, j].mean())) for j, name in enumerate(data.covariate_names)
    )
    return CohortSummary(
        n_subjects=data.n_subjects, markers=tuple(rows), covariate_means=means
    )


def drop_marker(data: CohortData, k: int) -> CohortData:
    """Cohort with marker ``k`` removed (for sensitivity subsets)."""
    names = [n for i, n in enumerate(data.marker_names) if i != k]
    flip = [f for i, f in enumerate(data.marker_flip) if i != k]
    obs = [
        replace(o, marker_id=o.marker_id - (o.marker_id > k))
        for o in data.observations
        if o.marker_id != k
    ]
    keep = {o.subject_id for o in obs}
    subjects = [s for s in data.subjects if s.id in keep]
    out = CohortData(subjects, obs, names, flip, list(data.covariate_names))
    out.validate()
    return out
