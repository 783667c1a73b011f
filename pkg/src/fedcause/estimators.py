"""The four estimators: per-site Meta-IPW with precision-weighted combination,
pooled CLB-IPW from site aggregates, and the decoupled AIPW variants of both,
all in Hajek form with plug-in variances and normal-quantile intervals.

Hajek normalization makes every estimate invariant to the one shared constant
left unidentified in assembled propensity sets; the plug-in variances are
self-normalized for the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import EstimateReport, SiteDataset, TargetCovariates
from .density_ratio import FeatureMap
from .nuisance import (SCORE_FLOOR, FoldPlan, OutcomeModel, PropensitySet,
                       crossfit_split, fit_outcome_direct, pooled_score)


class OverlapError(RuntimeError):
    """An arm is empty across every site: pooled scores cannot be formed."""


class AllSitesExcludedError(RuntimeError):
    """Every site was excluded from the per-site combination."""


@dataclass(frozen=True)
class Excluded:
    reason: str


@dataclass
class SiteAggregates:
    """Un-normalized IPW sums G and estimated arm sizes N for one site, plus
    the squared-weight moments needed to rebuild the plug-in variance after
    the across-site combination."""

    site_id: int
    G1: float = 0.0
    G0: float = 0.0
    N1: float = 0.0
    N0: float = 0.0
    w2_1: float = 0.0
    w2y_1: float = 0.0
    w2y2_1: float = 0.0
    w2_0: float = 0.0
    w2y_0: float = 0.0
    w2y2_0: float = 0.0
    n_units: int = 0
    n_floored: int = 0

    def to_payload(self) -> dict:
        return {k: getattr(self, k) for k in (
            "site_id", "G1", "G0", "N1", "N0",
            "w2_1", "w2y_1", "w2y2_1", "w2_0", "w2y_0", "w2y2_0",
            "n_units", "n_floored")}

    @classmethod
    def from_payload(cls, obj: dict) -> "SiteAggregates":
        return cls(**{k: obj[k] for k in (
            "site_id", "G1", "G0", "N1", "N0",
            "w2_1", "w2y_1", "w2y2_1", "w2_0", "w2y_0", "w2y2_0",
            "n_units", "n_floored")})


@dataclass
class VarAccumulator:
    """Squared-weight moment sums for one arm; centred second moments are
    recovered as sum_w2y2 - 2 mu sum_w2y + mu^2 sum_w2."""

    sum_w2: float = 0.0
    sum_w2y: float = 0.0
    sum_w2y2: float = 0.0
    n_used: int = 0

    def add(self, w: np.ndarray, y: np.ndarray) -> None:
        w2 = w * w
        self.sum_w2 += float(np.sum(w2))
        self.sum_w2y += float(np.sum(w2 * y))
        self.sum_w2y2 += float(np.sum(w2 * y * y))
        self.n_used += len(w)

    def centred(self, mu: float) -> float:
        return max(self.sum_w2y2 - 2.0 * mu * self.sum_w2y + mu * mu * self.sum_w2, 0.0)


@dataclass
class MetaDeltas:
    """Per-site Hajek residual means and their variance moments, one arm each,
    computed with the site's own scores."""

    site_id: int
    d1: float
    d0: float
    n1_hat: float
    n0_hat: float
    s2_1: float
    s2_0: float
    n_units: int = 0

    def to_payload(self) -> dict:
        return {k: getattr(self, k) for k in (
            "site_id", "d1", "d0", "n1_hat", "n0_hat", "s2_1", "s2_0", "n_units")}

    @classmethod
    def from_payload(cls, obj: dict) -> "MetaDeltas":
        return cls(**{k: obj[k] for k in (
            "site_id", "d1", "d0", "n1_hat", "n0_hat", "s2_1", "s2_0", "n_units")})


@dataclass
class AipwInputs:
    """Everything the decoupled combination needs for one cross-fit fold."""

    target_mean_term: float
    target_sq_term: float
    n_target: int
    deltas: list
    lambda_hat: float
    n_pooled: int
    fold: int = 0

    def __post_init__(self):
        if self.lambda_hat <= 0:
            raise ValueError("lambda_hat must be positive")


def _z_quantile(level: float) -> float:
    return NormalDist().inv_cdf((1.0 + level) / 2.0)


def gaussian_interval(tau: float, var_hat: float, n_effective: float, level: float):
    half = _z_quantile(level) * float(np.sqrt(var_hat / n_effective))
    return tau - half, tau + half


def confidence_interval(report: EstimateReport, level: float):
    """Normal-quantile interval tau_hat +/- z * sqrt(var_hat / n_effective)."""
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    return gaussian_interval(report.tau_hat, report.var_hat, report.n_effective, level)


# ---------------------------------------------------------------------------
# Meta: per-site Hajek estimates combined with precision weights


def meta_ipw_site(site: SiteDataset, e1: Callable, e0: Callable):
    """Hajek IPW contrast on one site with its own arm scores.

    Returns (tau_k, var_k) or Excluded. var_k is the self-normalized plug-in
    squared standard error sum_w^2 (y - mu_hat)^2 / (sum_w)^2 per arm, so it
    shares the Hajek form's indifference to the unknown scale constant.
    """
    z = site.z_vec
    y = site.y_vec
    x = site.x_matrix
    treated = z == 1
    if not np.any(treated):
        return Excluded("no treated units")
    if np.all(treated):
        return Excluded("no control units")
    s1 = np.asarray(e1(x[treated]), dtype=float).reshape(-1)
    s0 = np.asarray(e0(x[~treated]), dtype=float).reshape(-1)
    if np.any(s1 <= 0.0):
        return Excluded("non-positive treated-arm score")
    if np.any(s0 <= 0.0):
        return Excluded("non-positive control-arm score")
    w1 = 1.0 / s1
    w0 = 1.0 / s0
    n1_hat = float(np.sum(w1))
    n0_hat = float(np.sum(w0))
    mu1 = float(np.sum(w1 * y[treated])) / n1_hat
    mu0 = float(np.sum(w0 * y[~treated])) / n0_hat
    v1 = float(np.sum((w1 * (y[treated] - mu1)) ** 2))
    v0 = float(np.sum((w0 * (y[~treated] - mu0)) ** 2))
    var_k = v1 / n1_hat ** 2 + v0 / n0_hat ** 2
    return mu1 - mu0, var_k


def meta_combine(site_results: Dict[int, Union[Tuple[float, float], Excluded]],
                 mode="inverse_variance", ci_level: float = 0.95,
                 estimator_name: str = "MetaIPW") -> EstimateReport:
    """Combine per-site (tau_k, var_k) results.

    mode "inverse_variance" weighs each included site by 1/var_k and reports
    var_hat = 1 / sum(1/var_k); mode ("fixed", {site_id: w}) renormalizes the
    given weights over the included sites and reports var_hat =
    sum(w_tilde^2 var_k). Excluded sites appear in the diagnostics with their
    reason. n_effective is 1: var_hat is already the squared standard error.
    """
    diagnostics = []
    included: List[Tuple[int, float, float]] = []
    for sid in sorted(site_results):
        res = site_results[sid]
        if isinstance(res, Excluded):
            diagnostics.append((sid, False, res.reason))
        else:
            included.append((sid, float(res[0]), float(res[1])))
    if not included:
        raise AllSitesExcludedError("all sites excluded from the Meta combination")

    if mode == "inverse_variance":
        raw = {sid: 1.0 / max(var, 1e-300) for sid, _, var in included}
    else:
        kind, weights = mode
        if kind != "fixed":
            raise ValueError(f"unknown combination mode {mode!r}")
        raw = {sid: float(weights[sid]) for sid, _, _ in included}
        if any(w < 0 for w in raw.values()) or sum(raw.values()) <= 0:
            raise ValueError("fixed weights must be non-negative and not all zero")
    total = sum(raw.values())
    eta = {sid: w / total for sid, w in raw.items()}

    tau = sum(eta[sid] * tk for sid, tk, _ in included)
    if mode == "inverse_variance":
        var_hat = 1.0 / sum(1.0 / max(var, 1e-300) for _, _, var in included)
    else:
        var_hat = sum(eta[sid] ** 2 * var for sid, _, var in included)
    for sid, _, _ in included:
        diagnostics.append((sid, True, f"weight={eta[sid]:.6g}"))
    diagnostics.sort(key=lambda t: t[0])
    lo, hi = gaussian_interval(tau, var_hat, 1.0, ci_level)
    return EstimateReport(estimator_name=estimator_name, tau_hat=tau, var_hat=var_hat,
                          n_effective=1.0, ci_level=ci_level, ci_lo=lo, ci_hi=hi,
                          per_site_diagnostics=diagnostics)


def meta_ipw(sites: Sequence[SiteDataset], p: PropensitySet,
             mode="inverse_variance", ci_level: float = 0.95) -> EstimateReport:
    """Per-site Meta-IPW over all sites whose two arm scores are available."""
    results = {}
    for s in sites:
        if not (p.has(s.site_id, 1) and p.has(s.site_id, 0)):
            results[s.site_id] = Excluded("missing arm score model")
            continue
        e1 = lambda x, k=s.site_id: p.eval(k, 1, x)
        e0 = lambda x, k=s.site_id: p.eval(k, 0, x)
        results[s.site_id] = meta_ipw_site(s, e1, e0)
    return meta_combine(results, mode=mode, ci_level=ci_level)


# ---------------------------------------------------------------------------
# CLB: pooled Hajek over heterogeneous scores, assembled from site aggregates


def _clb_aggregate_arrays(site_id: int, x: np.ndarray, z: np.ndarray, y: np.ndarray,
                          p: PropensitySet, eta: Optional[Dict[int, float]],
                          include: Optional[np.ndarray]) -> SiteAggregates:
    agg = SiteAggregates(site_id=site_id)
    eta_k = 1.0 if eta is None else float(eta.get(site_id, 1.0))
    keep = np.ones(len(z), dtype=bool) if include is None else np.asarray(include, dtype=bool)
    for arm in (1, 0):
        mask = (z == arm) & keep
        if not np.any(mask):
            continue
        s = pooled_score(p, eta, x[mask], arm)
        agg.n_floored += int(np.sum(s < SCORE_FLOOR))
        w = eta_k / np.maximum(s, SCORE_FLOOR)
        ya = y[mask]
        G = float(np.sum(w * ya))
        N = float(np.sum(w))
        w2 = w * w
        moments = (float(np.sum(w2)), float(np.sum(w2 * ya)), float(np.sum(w2 * ya * ya)))
        if arm == 1:
            agg.G1, agg.N1 = G, N
            agg.w2_1, agg.w2y_1, agg.w2y2_1 = moments
        else:
            agg.G0, agg.N0 = G, N
            agg.w2_0, agg.w2y_0, agg.w2y2_0 = moments
        agg.n_units += int(np.sum(mask))
    return agg


def clb_site_aggregates(site: SiteDataset, p: PropensitySet,
                        eta: Optional[Dict[int, float]] = None,
                        include: Optional[np.ndarray] = None) -> SiteAggregates:
    """One site's contribution to the pooled Hajek sums: G = sum eta_k y / score
    and N = sum eta_k / score per arm, pooled scores in the denominator.
    A site missing an arm still contributes valid sums for the other arm.
    """
    return _clb_aggregate_arrays(site.site_id, site.x_matrix, site.z_vec, site.y_vec,
                                 p, eta, include)


def clb_combine(aggs: Sequence[SiteAggregates], n_pooled: Optional[int] = None,
                ci_level: float = 0.95) -> EstimateReport:
    """Server-side combination: mu_hat_z = sum_k G_z / sum_k N_z, tau their
    difference. The plug-in variance is the self-normalized Hajek form
    var_hat = n_pooled * (V1 / N1_hat^2 + V0 / N0_hat^2) with V the centred
    squared-weight sums, n_effective = n_pooled; the unobservable drop share
    cancels throughout. Sums run in ascending site order, fixed for bitwise
    reproducibility.
    """
    aggs = sorted(aggs, key=lambda a: a.site_id)
    if not aggs:
        raise ValueError("no site aggregates to combine")
    if n_pooled is None:
        n_pooled = sum(a.n_units for a in aggs)
    if n_pooled <= 0:
        raise ValueError("n_pooled must be positive")
    N1 = sum(a.N1 for a in aggs)
    N0 = sum(a.N0 for a in aggs)
    if N1 <= 0.0:
        raise OverlapError("treated arm empty across all sites")
    if N0 <= 0.0:
        raise OverlapError("control arm empty across all sites")
    mu1 = sum(a.G1 for a in aggs) / N1
    mu0 = sum(a.G0 for a in aggs) / N0
    tau = mu1 - mu0
    v1 = VarAccumulator(sum(a.w2_1 for a in aggs), sum(a.w2y_1 for a in aggs),
                        sum(a.w2y2_1 for a in aggs))
    v0 = VarAccumulator(sum(a.w2_0 for a in aggs), sum(a.w2y_0 for a in aggs),
                        sum(a.w2y2_0 for a in aggs))
    var_hat = n_pooled * (v1.centred(mu1) / N1 ** 2 + v0.centred(mu0) / N0 ** 2)
    diagnostics = [(a.site_id, True,
                    f"n_units={a.n_units} floored={a.n_floored}") for a in aggs]
    lo, hi = gaussian_interval(tau, var_hat, n_pooled, ci_level)
    return EstimateReport(estimator_name="ClbIPW", tau_hat=tau, var_hat=var_hat,
                          n_effective=float(n_pooled), ci_level=ci_level,
                          ci_lo=lo, ci_hi=hi, per_site_diagnostics=diagnostics)


def clb_ipw(sites: Sequence[SiteDataset], p: PropensitySet,
            eta: Optional[Dict[int, float]] = None, ci_level: float = 0.95,
            include: Optional[Dict[int, np.ndarray]] = None,
            n_pooled: Optional[int] = None) -> EstimateReport:
    aggs = [clb_site_aggregates(s, p, eta,
                                None if include is None else include.get(s.site_id))
            for s in sorted(sites, key=lambda t: t.site_id)]
    return clb_combine(aggs, n_pooled=n_pooled, ci_level=ci_level)


# ---------------------------------------------------------------------------
# Decoupled AIPW: target-mean term plus IPW corrections on residuals


def aipw_corrections(site: SiteDataset, m1: OutcomeModel, m0: OutcomeModel,
                     p: PropensitySet, flavor: str = "clb",
                     eta: Optional[Dict[int, float]] = None,
                     include: Optional[np.ndarray] = None):
    """Residualized IPW terms for one site: every y is replaced by
    y - m_z(x) for the realized arm.

    flavor "clb" returns SiteAggregates of the residuals under pooled scores;
    flavor "meta" returns MetaDeltas, the per-arm Hajek residual means under
    the site's own scores, or Excluded when an arm or its score is missing.
    The outcome models must come from the complementary cross-fit fold.
    """
    z = site.z_vec
    y = site.y_vec
    x = site.x_matrix
    resid = np.where(z == 1,
                     y - np.atleast_1d(m1.predict(x)),
                     y - np.atleast_1d(m0.predict(x)))
    if flavor == "clb":
        return _clb_aggregate_arrays(site.site_id, x, z, resid, p, eta, include)
    if flavor != "meta":
        raise ValueError(f"unknown flavor {flavor!r}")

    keep = np.ones(len(z), dtype=bool) if include is None else np.asarray(include, dtype=bool)
    if not (p.has(site.site_id, 1) and p.has(site.site_id, 0)):
        return Excluded("missing arm score model")
    out = {}
    n_units = 0
    for arm in (1, 0):
        mask = (z == arm) & keep
        if not np.any(mask):
            return Excluded(f"no arm-{arm} units")
        s = np.asarray(p.eval(site.site_id, arm, x[mask]), dtype=float)
        if np.any(s <= 0.0):
            return Excluded(f"non-positive arm-{arm} score")
        w = 1.0 / s
        r = resid[mask]
        n_hat = float(np.sum(w))
        out[arm] = (float(np.sum(w * r)) / n_hat, n_hat, float(np.sum((w * r) ** 2)))
        n_units += int(np.sum(mask))
    return MetaDeltas(site_id=site.site_id,
                      d1=out[1][0], d0=out[0][0],
                      n1_hat=out[1][1], n0_hat=out[0][1],
                      s2_1=out[1][2], s2_0=out[0][2],
                      n_units=n_units)


def aipw_combine(inputs, flavor: str = "clb",
                 weights: Optional[Dict[int, float]] = None,
                 ci_level: float = 0.95) -> EstimateReport:
    """Assemble the decoupled estimate from per-fold inputs.

    Per fold, tau_f = target_mean_term + correction; the final estimate
    averages the folds. The plug-in variance adds the target-sample variance
    of the modelled contrast (divided by lambda_hat) at weight 1/F and the
    residual correction variance at weight 1/F^2, reflecting that the folds
    share the target sample but correct disjoint units. n_effective is the
    pooled source count.
    """
    folds: List[AipwInputs] = list(inputs) if isinstance(inputs, (list, tuple)) else [inputs]
    if not folds:
        raise ValueError("no fold inputs")
    if any(f.n_target <= 0 for f in folds):
        raise ValueError("empty target set")
    n_pooled = folds[0].n_pooled
    if any(f.n_pooled != n_pooled for f in folds):
        raise ValueError("inconsistent pooled counts across folds")
    F = len(folds)

    taus, vts, vcs = [], [], []
    diagnostics = []
    for f in folds:
        if flavor == "clb":
            aggs = sorted(f.deltas, key=lambda a: a.site_id)
            N1 = sum(a.N1 for a in aggs)
            N0 = sum(a.N0 for a in aggs)
            if N1 <= 0.0 or N0 <= 0.0:
                raise OverlapError("an arm is empty across all sites in a fold")
            corr = sum(a.G1 for a in aggs) / N1 - sum(a.G0 for a in aggs) / N0
            s2_1 = sum(a.w2y2_1 for a in aggs)
            s2_0 = sum(a.w2y2_0 for a in aggs)
            vc = n_pooled * (s2_1 / N1 ** 2 + s2_0 / N0 ** 2)
            for a in aggs:
                diagnostics.append((a.site_id, True,
                                    f"fold={f.fold} n_units={a.n_units} floored={a.n_floored}"))
        elif flavor == "meta":
            incl = [d for d in f.deltas if not isinstance(d, Excluded)]
            for d in f.deltas:
                if isinstance(d, Excluded):
                    diagnostics.append((-1, False, f"fold={f.fold} {d.reason}"))
            if not incl:
                raise AllSitesExcludedError("all sites excluded from a fold's corrections")
            raw = {d.site_id: (1.0 if weights is None else float(weights.get(d.site_id, 0.0)))
                   for d in incl}
            tot = sum(raw.values())
            if tot <= 0:
                raise ValueError("correction weights sum to zero")
            corr = sum(raw[d.site_id] / tot * (d.d1 - d.d0) for d in incl)
            vc = n_pooled * sum((raw[d.site_id] / tot) ** 2 *
                                (d.s2_1 / d.n1_hat ** 2 + d.s2_0 / d.n0_hat ** 2)
                                for d in incl)
            for d in incl:
                diagnostics.append((d.site_id, True,
                                    f"fold={f.fold} weight={raw[d.site_id] / tot:.6g}"))
        else:
            raise ValueError(f"unknown flavor {flavor!r}")
        taus.append(f.target_mean_term + corr)
        vts.append(f.target_sq_term / f.lambda_hat)
        vcs.append(vc)

    tau = sum(taus) / F
    var_hat = sum(vts) / F + sum(vcs) / F ** 2
    name = "ClbAIPW" if flavor == "clb" else "MetaAIPW"
    lo, hi = gaussian_interval(tau, var_hat, n_pooled, ci_level)
    return EstimateReport(estimator_name=name, tau_hat=tau, var_hat=var_hat,
                          n_effective=float(n_pooled), ci_level=ci_level,
                          ci_lo=lo, ci_hi=hi, per_site_diagnostics=diagnostics)


def decoupled_aipw(sites: Sequence[SiteDataset], target: TargetCovariates,
                   p: PropensitySet, psi_om: FeatureMap, flavor: str = "clb",
                   F: int = 2, rng=None, eta: Optional[Dict[int, float]] = None,
                   weights: Optional[Dict[int, float]] = None,
                   include: Optional[Dict[int, np.ndarray]] = None,
                   ci_level: float = 0.95, model_trainer=None,
                   fold_plan: Optional[FoldPlan] = None) -> EstimateReport:
    """Cross-fitted decoupled AIPW, centralized reference implementation.

    Outcome models train on the complement of each fold (by default an exact
    weighted least-squares solve of the score-weighted loss) and correct only
    that fold's units; the target-mean term is recomputed per fold. ``include``
    masks units out of both training and corrections. ``model_trainer`` may
    replace the direct solve; it receives (arm, train_include) and returns an
    OutcomeModel, letting a federated trainer stand in.
    """
    sites = sorted(sites, key=lambda s: s.site_id)
    if fold_plan is None:
        fold_plan = crossfit_split(sites, target, F, rng)
    F = fold_plan.F

    def _train(arm: int, train_include: Dict[int, np.ndarray]) -> OutcomeModel:
        if model_trainer is not None:
            return model_trainer(arm, train_include)
        return fit_outcome_direct(sites, arm, psi_om, p, eta=None, include=train_include)

    base = {s.site_id: (np.ones(s.n, dtype=bool) if include is None or s.site_id not in include
                        else np.asarray(include[s.site_id], dtype=bool))
            for s in sites}
    n_pooled = int(sum(np.sum(base[s.site_id]) for s in sites))
    if n_pooled <= 0:
        raise ValueError("no usable source units")

    inputs = []
    for f in range(F):
        train_inc = {s.site_id: base[s.site_id] & fold_plan.train_mask(s.site_id, f)
                     for s in sites}
        eval_inc = {s.site_id: base[s.site_id] & fold_plan.eval_mask(s.site_id, f)
                    for s in sites}
        m1 = _train(1, train_inc)
        m0 = _train(0, train_inc)
        diff = np.atleast_1d(m1.predict(target.xs)) - np.atleast_1d(m0.predict(target.xs))
        deltas = [aipw_corrections(s, m1, m0, p, flavor, eta, eval_inc[s.site_id])
                  for s in sites]
        inputs.append(AipwInputs(target_mean_term=float(np.mean(diff)),
                                 target_sq_term=float(np.var(diff, ddof=1)),
                                 n_target=target.n, deltas=deltas,
                                 lambda_hat=target.n / n_pooled,
                                 n_pooled=n_pooled, fold=f))
    return aipw_combine(inputs, flavor=flavor, weights=weights, ci_level=ci_level)
