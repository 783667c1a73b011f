"""Shared data model, validation, CSV round-trip, and deterministic seeding.

All estimator and simulator modules consume the types defined here. Types are
treated as immutable after construction and are safe to share across parallel
workers.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

ESTIMATOR_NAMES = ("MetaIPW", "ClbIPW", "MetaAIPW", "ClbAIPW")

# 17 significant digits round-trips any finite float64 exactly
_FLOAT_FMT = "%.17g"


def _fmt(v) -> str:
    return _FLOAT_FMT % float(v)


@dataclass(frozen=True)
class UnitRecord:
    """One observed unit: covariates x, treatment arm z in {0,1}, outcome y."""

    x: np.ndarray
    z: int
    y: float


@dataclass(frozen=True)
class SiteDataset:
    """All units held by one data site.

    Parameters
    ----------
    site_id : int
        1-based site index.
    records : tuple of UnitRecord
        The site's units; non-empty, all sharing dimension ``d``.
    d : int
        Covariate dimension.
    """

    site_id: int
    records: tuple
    d: int

    @classmethod
    def from_arrays(cls, site_id: int, x: np.ndarray, z, y) -> "SiteDataset":
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=int)
        y = np.asarray(y, dtype=float)
        if x.ndim != 2:
            raise ValueError("x must be a 2-d array of shape (n, d)")
        recs = tuple(UnitRecord(x[i], int(z[i]), float(y[i])) for i in range(len(y)))
        ds = cls(site_id=site_id, records=recs, d=x.shape[1])
        # seed the array caches so estimators never restack per-record rows
        ds.__dict__["x_matrix"] = x
        ds.__dict__["z_vec"] = z
        ds.__dict__["y_vec"] = y
        return ds

    @property
    def n(self) -> int:
        return len(self.records)

    @cached_property
    def x_matrix(self) -> np.ndarray:
        return np.array([r.x for r in self.records], dtype=float)

    @cached_property
    def z_vec(self) -> np.ndarray:
        return np.array([r.z for r in self.records], dtype=int)

    @cached_property
    def y_vec(self) -> np.ndarray:
        return np.array([r.y for r in self.records], dtype=float)


@dataclass(frozen=True)
class TargetCovariates:
    """Public covariate sample from the population of interest, shape (n, d)."""

    xs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xs", np.asarray(self.xs, dtype=float))

    @property
    def n(self) -> int:
        return len(self.xs)

    @property
    def d(self) -> int:
        return self.xs.shape[1]


@dataclass(frozen=True)
class SelectionLabel:
    """Routing label for one sampled unit.

    Either Selected(site_id, z) with site_id in [1..K], or Dropped
    (site_id is None), in which case the unit is discarded.
    """

    site_id: Optional[int] = None
    z: Optional[int] = None

    def __post_init__(self):
        if self.site_id is not None and self.site_id < 1:
            raise ValueError("site_id must be >= 1 when selected")

    @property
    def dropped(self) -> bool:
        return self.site_id is None

    @classmethod
    def selected(cls, site_id: int, z: int) -> "SelectionLabel":
        return cls(site_id=site_id, z=int(z))


DROPPED = SelectionLabel()


@dataclass
class EstimateReport:
    """Point estimate with plug-in variance and a normal-quantile interval.

    ``var_hat`` is scaled so that the squared standard error equals
    ``var_hat / n_effective``; ``n_effective`` is 1 for the per-site-combined
    Meta estimator and the pooled observed count for the CLB and AIPW
    estimators.
    """

    estimator_name: str
    tau_hat: float
    var_hat: float
    n_effective: float
    ci_level: float
    ci_lo: float
    ci_hi: float
    per_site_diagnostics: list = field(default_factory=list)
    notes: str = ""

    def __post_init__(self):
        if self.estimator_name not in ESTIMATOR_NAMES:
            raise ValueError(f"unknown estimator_name {self.estimator_name!r}")
        if not (0.0 < self.ci_level < 1.0):
            raise ValueError("ci_level must lie in (0, 1)")
        if self.var_hat < 0:
            raise ValueError("var_hat must be non-negative")
        if not (self.ci_lo <= self.tau_hat <= self.ci_hi):
            raise ValueError("interval must bracket the point estimate")

    def to_json(self) -> str:
        obj = {
            "estimator_name": self.estimator_name,
            "tau_hat": self.tau_hat,
            "var_hat": self.var_hat,
            "n_effective": self.n_effective,
            "ci_level": self.ci_level,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "per_site_diagnostics": [list(t) for t in self.per_site_diagnostics],
            "notes": self.notes,
        }
        return json.dumps(obj)

    @classmethod
    def from_json(cls, s: str) -> "EstimateReport":
        obj = json.loads(s)
        obj["per_site_diagnostics"] = [tuple(t) for t in obj["per_site_diagnostics"]]
        return cls(**obj)


@dataclass(frozen=True)
class SeedSpec:
    """Deterministic stream derivation: replication r and site k map to a
    child seed hashed from the master seed. Identical SeedSpec values yield
    bit-identical generated data on any platform."""

    master_seed: int

    def child_seed(self, r: int, k: int) -> int:
        msg = f"{self.master_seed}:{r}:{k}".encode()
        return int.from_bytes(hashlib.blake2b(msg, digest_size=8).digest(), "big")

    def rng(self, r: int, k: int) -> np.random.Generator:
        return np.random.default_rng(self.child_seed(r, k))

    def root_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.master_seed)


@dataclass
class ValidationReport:
    ok: bool
    errors: list
    warnings: list


def validate_dataset(sites: Sequence[SiteDataset], target: TargetCovariates) -> ValidationReport:
    """Check the multi-site data model and report violations.

    A site with a missing treatment arm is reported as a warning, not an
    error: the pooled CLB estimators tolerate under-coverage while the
    per-site Meta estimator excludes such sites.
    """
    errors, warnings = [], []
    if not sites:
        errors.append("no sites provided")
        return ValidationReport(False, errors, warnings)

    seen = set()
    d = sites[0].d
    for s in sites:
        if s.site_id in seen:
            errors.append(f"duplicate site_id {s.site_id}")
        seen.add(s.site_id)
        if s.site_id < 1:
            errors.append(f"site_id {s.site_id} is not >= 1")
        if s.n == 0:
            errors.append(f"site {s.site_id} has no records")
            continue
        if s.d != d:
            errors.append(f"dimension mismatch site {s.site_id}")
        bad_dim = any(np.shape(r.x) != (s.d,) for r in s.records)
        if bad_dim:
            errors.append(f"dimension mismatch site {s.site_id}")
        x = s.x_matrix
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(s.y_vec)):
            errors.append(f"non-finite value in site {s.site_id}")
        zv = s.z_vec
        if not np.all((zv == 0) | (zv == 1)):
            errors.append(f"site {s.site_id} has z outside {{0,1}}")
        else:
            if not np.any(zv == 0):
                warnings.append(f"site {s.site_id} lacks control units; Meta-IPW will exclude it")
            if not np.any(zv == 1):
                warnings.append(f"site {s.site_id} lacks treated units; Meta-IPW will exclude it")

    if target.n == 0:
        errors.append("target covariate set is empty")
    elif target.d != d:
        errors.append("dimension mismatch between target and sites")
    elif not np.all(np.isfinite(target.xs)):
        errors.append("non-finite value in target covariates")

    return ValidationReport(not errors, errors, warnings)


# ---------------------------------------------------------------------------
# CSV interchange. Dataset header: site_id,z,y,x1,...,xd  Target header: x1,...,xd


def write_sites_csv(sites: Sequence[SiteDataset], path) -> None:
    d = sites[0].d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "z", "y"] + [f"x{j + 1}" for j in range(d)])
        for s in sites:
            x, zv, yv = s.x_matrix, s.z_vec, s.y_vec
            for i in range(s.n):
                w.writerow([s.site_id, int(zv[i]), _fmt(yv[i])] + [_fmt(v) for v in x[i]])


def read_sites_csv(path) -> list:
    groups: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = len(header) - 3
        for row in r:
            sid = int(row[0])
            groups.setdefault(sid, []).append(
                (int(row[1]), float(row[2]), [float(v) for v in row[3:]])
            )
    sites = []
    for sid in sorted(groups):
        rows = groups[sid]
        x = np.array([t[2] for t in rows], dtype=float)
        z = np.array([t[0] for t in rows], dtype=int)
        y = np.array([t[1] for t in rows], dtype=float)
        if x.shape[1] != d:
            raise ValueError("inconsistent covariate dimension in CSV")
        sites.append(SiteDataset.from_arrays(sid, x, z, y))
    return sites


def write_target_csv(target: TargetCovariates, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(target.d)])
        for row in target.xs:
            w.writerow([_fmt(v) for v in row])


def read_target_csv(path) -> TargetCovariates:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        xs = np.array([[float(v) for v in row] for row in r], dtype=float)
    return TargetCovariates(xs=xs)
