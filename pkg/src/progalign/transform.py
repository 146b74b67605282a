"""Severity-scale construction: weighted percentiles and Gaussian scores.

Raw marker values map to [0,1] severity percentiles through a weighted
empirical CDF evaluated with the midpoint (mid-rank) convention, then to an
unbounded Gaussian scale through the standard-normal quantile function.
Markers where higher raw values mean better condition are flipped by
negation before fitting, so severity always increases with impairment
(0 = best observed condition, 1 = worst).

Percentiles are clipped to [delta, 1-delta] with delta = 1/(4 N_k) per
marker, keeping the Gaussian scores finite at the sample extremes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .data import CohortData

__all__ = [
    "WeightedEcdf",
    "TransformSpec",
    "NormalizedObservation",
    "fit_weighted_ecdf",
    "fit_transform",
    "normalize_cohort",
    "severity_of",
    "save_ecdf",
    "load_ecdf",
]


class DegenerateMarkerError(ValueError):
    """All values of a marker coincide; no percentile scale exists."""


@dataclass(frozen=True)
class WeightedEcdf:
    """Weighted step ECDF over distinct support points.

    ``cum_weight[j]`` is the normalized cumulative weight up to and
    including ``support[j]`` (last entry exactly 1). Evaluation uses the
    midpoint convention at observed points: mass strictly below plus half
    the mass at the point, so ties map to the middle of their block.
    """

    support: np.ndarray
    cum_weight: np.ndarray

    @property
    def point_mass(self) -> np.ndarray:
        return np.diff(self.cum_weight, prepend=0.0)

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        idx = np.searchsorted(self.support, y, side="left")
        below = np.where(idx > 0, self.cum_weight[np.maximum(idx - 1, 0)], 0.0)
        at = np.zeros_like(below)
        inside = idx < len(self.support)
        hit = inside & (self.support[np.minimum(idx, len(self.support) - 1)] == y)
        mass = self.point_mass
        at[hit] = 0.5 * mass[idx[hit]]
        return below + at


def fit_weighted_ecdf(values, weights) -> WeightedEcdf:
    """Fit the weighted ECDF of ``values`` with per-observation ``weights``.

    Requires at least two distinct values and strictly positive weights.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.shape != weights.shape or values.ndim != 1:
        raise ValueError("values and weights must be 1-D arrays of equal length")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite marker value")
    if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be positive and finite")
    support, inverse = np.unique(values, return_inverse=True)
    if support.size < 2:
        raise DegenerateMarkerError("marker has fewer than 2 distinct values")
    mass = np.bincount(inverse, weights=weights, minlength=support.size)
    cum = np.cumsum(mass)
    cum /= cum[-1]
    cum[-1] = 1.0
    return WeightedEcdf(support=support, cum_weight=cum)


@dataclass
class TransformSpec:
    """Fitted per-marker severity transform (ECDF + flip + clip bound)."""

    marker_names: list[str]
    flip: list[bool]
    ecdfs: list[WeightedEcdf]
    delta: list[float]
    n_obs: list[int] = field(default_factory=list)

    def marker_index(self, k_or_name) -> int:
        if isinstance(k_or_name, str):
            try:
                return self.marker_names.index(k_or_name)
            except ValueError:
                raise KeyError(f"marker {k_or_name!r} not in transform") from None
        k = int(k_or_name)
        if not 0 <= k < len(self.marker_names):
            raise KeyError(f"marker index {k} not in transform")
        return k

    def percentile(self, k_or_name, values) -> np.ndarray:
        """Severity percentiles of raw values, flip applied, clipped."""
        k = self.marker_index(k_or_name)
        v = np.asarray(values, dtype=float)
        if self.flip[k]:
            v = -v
        p = self.ecdfs[k](v)
        return np.clip(p, self.delta[k], 1.0 - self.delta[k])

    def normalized(self, k_or_name, values) -> np.ndarray:
        return ndtri(self.percentile(k_or_name, values))


def fit_transform(data: CohortData, clip_delta=None) -> TransformSpec:
    """Fit the severity transform on every observation of every marker.

    All visits of a marker are pooled; each observation carries its
    subject's clinical-stage weight. Flipped markers are negated before
    fitting so weights and tie structure are preserved. ``clip_delta``
    overrides the per-marker default 1/(4 N_k).
    """
    index = data.subject_index()
    weights_by_subject = np.array([s.weight for s in data.subjects])
    ecdfs, deltas, n_obs = [], [], []
    for k, name in enumerate(data.marker_names):
        vals, w = [], []
        for o in data.observations:
            if o.marker_id == k:
                vals.append(-o.value if data.marker_flip[k] else o.value)
                w.append(weights_by_subject[index[o.subject_id]])
        if len(vals) < 2:
            raise DegenerateMarkerError(f"marker {name!r} has fewer than 2 observations")
        ecdfs.append(fit_weighted_ecdf(np.array(vals), np.array(w)))
        deltas.append(float(clip_delta) if clip_delta is not None else 1.0 / (4.0 * len(vals)))
        n_obs.append(len(vals))
    return TransformSpec(
        marker_names=list(data.marker_names),
        flip=list(data.marker_flip),
        ecdfs=ecdfs,
        delta=deltas,
        n_obs=n_obs,
    )


@dataclass(frozen=True)
class NormalizedObservation:
    """Observation on the severity/normalized scales."""

    subject_id: str
    marker_id: int
    t: float
    percentile: float
    normalized: float
    is_first_visit: bool = False


def normalize_cohort(data: CohortData, spec: TransformSpec) -> list[NormalizedObservation]:
    """Map every observation to (percentile, normalized) via the fitted spec."""
    for name in data.marker_names:
        if name not in spec.marker_names:
            raise KeyError(f"marker {name!r} missing from the fitted transform")
    out = []
    for o in data.observations:
        name = data.marker_names[o.marker_id]
        p = float(spec.percentile(name, o.value))
        out.append(
            NormalizedObservation(
                subject_id=o.subject_id,
                marker_id=o.marker_id,
                t=o.t,
                percentile=p,
                normalized=float(ndtri(p)),
                is_first_visit=o.is_first_visit,
            )
        )
    return out


def severity_of(normalized):
    """Back-transform Gaussian-scale values to severity percentiles."""
    return ndtr(np.asarray(normalized, dtype=float))


def assume_normalized(data: CohortData) -> list[NormalizedObservation]:
    """Wrap a cohort whose values are already on the Gaussian scale."""
    return [
        NormalizedObservation(
            subject_id=o.subject_id,
            marker_id=o.marker_id,
            t=o.t,
            percentile=float(ndtr(o.value)),
            normalized=o.value,
            is_first_visit=o.is_first_visit,
        )
        for o in data.observations
    ]


def save_ecdf(spec: TransformSpec, path) -> None:
    """Export fitted ECDFs as ``marker_id,value,cum_weight`` rows.

    A ``<path>.meta.json`` sidecar carries the clip bound, flip flag and
    observation count each marker needs for exact re-use.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["marker_id", "value", "cum_weight"])
        for name, ecdf in zip(spec.marker_names, spec.ecdfs):
            for v, c in zip(ecdf.support, ecdf.cum_weight):
                writer.writerow([name, repr(float(v)), repr(float(c))])
    meta = {
        name: {"delta": spec.delta[k], "flip": spec.flip[k], "n_obs": spec.n_obs[k]}
        for k, name in enumerate(spec.marker_names)
    }
    with open(f"{path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ecdf(path) -> TransformSpec:
    """Rebuild a TransformSpec from :func:`save_ecdf` output."""
    per_marker: dict[str, list[tuple[float, float]]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            name = row["marker_id"]
            if name not in per_marker:
                per_marker[name] = []
                order.append(name)
            per_marker[name].append((float(row["value"]), float(row["cum_weight"])))
    with open(f"{path}.meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    ecdfs, deltas, flips, n_obs = [], [], [], []
    for name in order:
        pts = sorted(per_marker[name])
        support = np.array([p[0] for p in pts])
        cum = np.array([p[1] for p in pts])
        ecdfs.append(WeightedEcdf(support=support, cum_weight=cum))
        deltas.append(float(meta[name]["delta"]))
        flips.append(bool(meta[name]["flip"]))
        n_obs.append(int(meta[name]["n_obs"]))
    return TransformSpec(
        marker_names=order, flip=flips, ecdfs=ecdfs, delta=deltas, n_obs=n_obs
    )
