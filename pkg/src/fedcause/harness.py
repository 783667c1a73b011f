"""Monte Carlo driver for the synthetic-shift experiments.

Sweeps the heterogeneity dial, regenerates data per replication from derived
seeds, runs the selected estimators, and writes tidy CSV summaries (MSE/bias
curves over the dial, and the interval-quality grid over model
misspecification). Replications are independent tasks; results reduce in
replication order, so worker count never changes the output bytes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import SiteDataset, TargetCovariates
from .density_ratio import (IDENTITY_PLUS_INTERCEPT, MISSPECIFIED, TiltingError,
                            fit_knn, fit_tilting, oracle_gaussian_ratio)
from .estimators import (AllSitesExcludedError, OverlapError, clb_ipw,
                         decoupled_aipw, meta_ipw)
from .nuisance import PropensitySet, crossfit_split, invert_balancing_model
from .synthgen import (ShiftConfig, gen_covariate_shift, misspecify_features,
                       place_site_means)

ESTIMATOR_IDS = ("meta_ipw", "clb_ipw", "meta_aipw", "clb_aipw")

SWEEP_COLUMNS = ("d_kl", "estimator", "nuisance_mode", "ps_spec", "om_spec",
                 "mse", "bias", "var", "coverage", "fail_rate")
CI_GRID_COLUMNS = ("estimator", "ps_spec", "om_spec",
                   "mean_tau_hat", "mean_half_width", "coverage")


@dataclass(frozen=True)
class SweepSpec:
    """One experiment family: which dial values, how many replications, which
    estimators, and how the nuisances are obtained.

    placements re-draws the site means that many times per dial value and
    cycles replications over them. meta_weight_mode picks the per-site
    combination weights: exact asymptotic precisions ("oracle"), plug-in
    inverse variances ("estimated"), or equal ("vanilla").
    """

    d_kl_grid: tuple = (0.0, 1.0, 2.0, 3.0, 4.0)
    replications: int = 500
    placements: int = 4
    estimators: tuple = ESTIMATOR_IDS
    nuisance_mode: str = "oracle"
    ps_spec: str = "correct"
    om_spec: str = "correct"
    meta_weight_mode: str = "oracle"
    folds: int = 2
    ci_level: float = 0.95
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    max_fail_frac: float = 0.10

    def __post_init__(self):
        if not self.d_kl_grid:
            raise ValueError("d_kl grid must be non-empty")
        if self.replications < 1 or self.placements < 1:
            raise ValueError("replications and placements must be >= 1")
        for e in self.estimators:
            if e not in ESTIMATOR_IDS:
                raise ValueError(f"unknown estimator id {e!r}")
        if self.nuisance_mode not in ("oracle", "tilting", "knn"):
            raise ValueError(f"unknown nuisance mode {self.nuisance_mode!r}")
        if self.ps_spec not in ("correct", "wrong") or self.om_spec not in ("correct", "wrong"):
            raise ValueError("ps_spec and om_spec must be 'correct' or 'wrong'")
        if self.meta_weight_mode not in ("oracle", "estimated", "vanilla"):
            raise ValueError(f"unknown weight mode {self.meta_weight_mode!r}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not (0.0 < self.ci_level < 1.0):
            raise ValueError("ci_level must lie in (0, 1)")

    def to_json_obj(self) -> dict:
        obj = {k: getattr(self, k) for k in (
            "replications", "placements", "nuisance_mode", "ps_spec", "om_spec",
            "meta_weight_mode", "folds", "ci_level", "max_fail_frac")}
        obj["d_kl_grid"] = list(self.d_kl_grid)
        obj["estimators"] = list(self.estimators)
        sh = {k: getattr(self.shift, k) for k in (
            "n_sites", "n_target", "d", "mu_target", "sigma", "d_kl", "noise_sd")}
        sh["site_sizes"] = list(self.shift.site_sizes)
        sh["prop_coef"] = list(self.shift.prop_coef)
        sh["beta1"] = list(self.shift.beta1)
        sh["beta0"] = list(self.shift.beta0)
        obj["shift"] = sh
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SweepSpec":
        obj = dict(obj)
        sh = obj.pop("shift", None)
        kwargs = {}
        for k in ("replications", "placements", "nuisance_mode", "ps_spec",
                  "om_spec", "meta_weight_mode", "folds", "ci_level",
                  "max_fail_frac"):
            if k in obj:
                kwargs[k] = obj[k]
        if "d_kl_grid" in obj:
            kwargs["d_kl_grid"] = tuple(float(v) for v in obj["d_kl_grid"])
        if "estimators" in obj:
            kwargs["estimators"] = tuple(obj["estimators"])
        if sh is not None:
            sh = dict(sh)
            for k in ("site_sizes", "prop_coef", "beta1", "beta0"):
                if k in sh:
                    sh[k] = tuple(sh[k])
            kwargs["shift"] = ShiftConfig(**sh)
        return cls(**kwargs)


@dataclass
class CellStats:
    """Replication summary for one (d_kl, estimator) cell. mse equals
    bias^2 + var by construction; var uses the population normalizer."""

    mse: float = math.nan
    bias: float = math.nan
    var: float = math.nan
    mean_tau_hat: float = math.nan
    mean_var_hat: float = math.nan
    mean_half_width: float = math.nan
    coverage: float = math.nan
    n_fail: int = 0
    n_reps: int = 0
    aborted: bool = False

    @property
    def fail_rate(self) -> float:
        return self.n_fail / self.n_reps if self.n_reps else math.nan


@dataclass
class SweepResult:
    spec: SweepSpec
    seed: int
    cells: Dict[Tuple[float, str], CellStats]

    def check_decomposition(self, tol: float = 1e-10) -> None:
        for key, c in self.cells.items():
            if c.aborted or math.isnan(c.mse):
                continue
            gap = abs(c.mse - (c.bias ** 2 + c.var))
            if gap > tol * max(1.0, abs(c.mse)):
                raise AssertionError(f"cell {key}: mse decomposition off by {gap}")


# ---------------------------------------------------------------------------
# Oracle nuisances for the shift design


def oracle_shift_propensity(shift: ShiftConfig, means: Sequence[float]) -> PropensitySet:
    """Exact selection-arm scores for the shift design, normalized so the
    site shares integrate to one over the target law."""
    c = np.asarray(shift.prop_coef, dtype=float)
    n_pooled = sum(shift.site_sizes)
    mu_t = np.full(shift.d, shift.mu_target)
    e = {}
    for k, mu_k in enumerate(np.asarray(means, dtype=float), start=1):
        share = shift.site_sizes[k - 1] / n_pooled
        mu_s = np.full(shift.d, mu_k)

        def make(arm, mu_s=mu_s, share=share):
            def fn(x):
                x = np.atleast_2d(np.asarray(x, dtype=float))
                ratio = oracle_gaussian_ratio(mu_s, mu_t, shift.sigma, x)
                p1 = 1.0 / (1.0 + np.exp(x @ c))
                return share * np.atleast_1d(ratio) * (p1 if arm == 1 else 1.0 - p1)
            return fn

        e[(k, 1)] = make(1)
        e[(k, 0)] = make(0)
    return PropensitySet(e=e, kind="oracle", global_constant_unknown=False)


def oracle_meta_site_variances(shift: ShiftConfig, means: Sequence[float], rng,
                               n_draws: int = 200_000) -> Dict[int, float]:
    """Asymptotic per-site squared standard errors of the one-site Hajek
    estimator, by Monte Carlo integration over each site's covariate law."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    c = np.asarray(shift.prop_coef, dtype=float)
    b1 = np.asarray(shift.beta1, dtype=float)
    b0 = np.asarray(shift.beta0, dtype=float)
    mu1 = float(b1 @ np.full(shift.d, shift.mu_target))
    mu0 = float(b0 @ np.full(shift.d, shift.mu_target))
    p = oracle_shift_propensity(shift, means)
    out = {}
    for k, mu_k in enumerate(np.asarray(means, dtype=float), start=1):
        x = rng.normal(mu_k, shift.sigma, size=(n_draws, shift.d))
        p1 = 1.0 / (1.0 + np.exp(x @ c))
        e1 = p.eval(k, 1, x)
        e0 = p.eval(k, 0, x)
        y1 = x @ b1
        y0 = x @ b0
        V1 = float(np.mean(p1 * (y1 - mu1) ** 2 / e1 ** 2))
        V0 = float(np.mean((1.0 - p1) * (y0 - mu0) ** 2 / e0 ** 2))
        D1 = float(np.mean(p1 / e1))
        D0 = float(np.mean((1.0 - p1) / e0))
        out[k] = (V1 / D1 ** 2 + V0 / D0 ** 2) / shift.site_sizes[k - 1]
    return out


# ---------------------------------------------------------------------------
# Fitted nuisances with pair-level excision


def _fit_pair_ratios(sites: Sequence[SiteDataset], target: TargetCovariates,
                     mode: str, ps_spec: str):
    """Fit one selection ratio per (site, arm). Pairs whose fit fails are
    dropped; callers excise the matching units. Returns (score_fns, failed)."""
    wrong = ps_spec == "wrong"
    psi = MISSPECIFIED if wrong else IDENTITY_PLUS_INTERCEPT
    n_pooled = sum(s.n for s in sites)
    tgt_raw = target.xs
    tgt_feat = misspecify_features(tgt_raw) if wrong else tgt_raw
    fns = {}
    failed = []
    for s in sites:
        for arm in (1, 0):
            src = s.x_matrix[s.z_vec == arm]
            if len(src) == 0:
                failed.append((s.site_id, arm, "empty arm"))
                continue
            share = len(src) / n_pooled
            try:
                if mode == "tilting":
                    bal = fit_tilting(src, tgt_raw, psi=psi)
                    model = invert_balancing_model(bal, len(src), target.n)
                    fn = (lambda x, m=model, sh=share:
                          sh * np.atleast_1d(m.eval(np.atleast_2d(x))))
                else:
                    src_f = misspecify_features(src) if wrong else src
                    model = fit_knn(src_f, tgt_feat)
                    if wrong:
                        fn = (lambda x, m=model, sh=share:
                              sh * np.atleast_1d(m.eval(misspecify_features(np.atleast_2d(x)))))
                    else:
                        fn = (lambda x, m=model, sh=share:
                              sh * np.atleast_1d(m.eval(np.atleast_2d(x))))
            except (TiltingError, ValueError) as exc:
                failed.append((s.site_id, arm, str(exc)))
                continue
            fns[(s.site_id, arm)] = fn
    return fns, failed


def _build_nuisance(spec: SweepSpec, sites, target, means):
    """Returns (PropensitySet, include_masks, n_usable). Units whose own
    (site, arm) pair has no usable score model are excised everywhere."""
    if spec.nuisance_mode == "oracle":
        p = oracle_shift_propensity(spec.shift, means)
        include = {s.site_id: np.ones(s.n, dtype=bool) for s in sites}
        return p, include, sum(s.n for s in sites)
    fns, failed = _fit_pair_ratios(sites, target, spec.nuisance_mode, spec.ps_spec)
    if not fns:
        raise OverlapError("every ratio fit failed; no scores available")
    p = PropensitySet(e=fns, kind="assembled", global_constant_unknown=True)
    dead = {(k, arm) for k, arm, _ in failed}
    include = {}
    for s in sites:
        mask = np.ones(s.n, dtype=bool)
        for arm in (1, 0):
            if (s.site_id, arm) in dead:
                mask &= s.z_vec != arm
        include[s.site_id] = mask
    n_usable = int(sum(np.sum(m) for m in include.values()))
    if n_usable == 0:
        raise OverlapError("excision removed every unit")
    return p, include, n_usable


# ---------------------------------------------------------------------------
# One replication


def _run_one_rep(spec: SweepSpec, seed: int, grid_index: int, rep: int,
                 means: Tuple[float, ...],
                 oracle_site_vars: Optional[Dict[int, float]]) -> dict:
    rng = np.random.default_rng((seed, grid_index, rep))
    sites, target, true_tau = gen_covariate_shift(spec.shift, rng,
                                                  means=np.asarray(means))
    out = {"true_tau": true_tau, "results": {}}
    try:
        p, include, n_usable = _build_nuisance(spec, sites, target, means)
    except (OverlapError, TiltingError, ValueError) as exc:
        for est in spec.estimators:
            out["results"][est] = ("fail", f"nuisance: {exc}")
        return out

    psi_om = MISSPECIFIED if spec.om_spec == "wrong" else IDENTITY_PLUS_INTERCEPT
    if spec.meta_weight_mode == "oracle" and oracle_site_vars is not None:
        fixed = {k: 1.0 / v for k, v in oracle_site_vars.items()}
        meta_mode, aipw_weights = ("fixed", fixed), fixed
    elif spec.meta_weight_mode == "vanilla":
        meta_mode = ("fixed", {s.site_id: 1.0 for s in sites})
        aipw_weights = None
    else:
        meta_mode, aipw_weights = "inverse_variance", None

    fold_plan = None
    if "meta_aipw" in spec.estimators or "clb_aipw" in spec.estimators:
        fold_plan = crossfit_split(sites, target, spec.folds, rng)

    for est in spec.estimators:
        try:
            if est == "meta_ipw":
                rep_out = meta_ipw(sites, p, mode=meta_mode, ci_level=spec.ci_level)
            elif est == "clb_ipw":
                rep_out = clb_ipw(sites, p, ci_level=spec.ci_level,
                                  include=include, n_pooled=n_usable)
            else:
                flavor = "meta" if est == "meta_aipw" else "clb"
                rep_out = decoupled_aipw(
                    sites, target, p, psi_om, flavor=flavor,
                    weights=aipw_weights if flavor == "meta" else None,
                    include=include, ci_level=spec.ci_level, fold_plan=fold_plan)
            covered = bool(rep_out.ci_lo <= true_tau <= rep_out.ci_hi)
            out["results"][est] = (rep_out.tau_hat,
                                   rep_out.var_hat / rep_out.n_effective,
                                   0.5 * (rep_out.ci_hi - rep_out.ci_lo),
                                   covered)
        except (OverlapError, AllSitesExcludedError, TiltingError, ValueError) as exc:
            out["results"][est] = ("fail", str(exc))
    return out


def _rep_task(args):
    spec, seed, gi, r, means, oracle_vars = args
    return gi, r, _run_one_rep(spec, seed, gi, r, means, oracle_vars)


# ---------------------------------------------------------------------------
# The sweep


def run_monte_carlo(spec: SweepSpec, seed: int, jobs: int = 1) -> SweepResult:
    """Run the full (d_kl x estimator) grid. Cells whose failure share
    exceeds max_fail_frac are marked aborted and keep NaN statistics; the
    sweep itself always completes."""
    placements: Dict[Tuple[int, int], Tuple[float, ...]] = {}
    oracle_vars: Dict[Tuple[int, int], Optional[Dict[int, float]]] = {}
    need_oracle_w = spec.meta_weight_mode == "oracle" and (
        "meta_ipw" in spec.estimators or "meta_aipw" in spec.estimators)
    for gi, d_kl in enumerate(spec.d_kl_grid):
        for pi in range(spec.placements):
            mrng = np.random.default_rng((seed, 9000 + gi, pi))
            means = place_site_means(float(d_kl), spec.shift.n_sites,
                                     spec.shift.sigma, spec.shift.mu_target, mrng)
            placements[(gi, pi)] = tuple(float(v) for v in means)
            if need_oracle_w:
                vrng = np.random.default_rng((seed, 7000 + gi, pi))
                oracle_vars[(gi, pi)] = oracle_meta_site_variances(
                    spec.shift, means, vrng)
            else:
                oracle_vars[(gi, pi)] = None

    tasks = []
    for gi in range(len(spec.d_kl_grid)):
        for r in range(spec.replications):
            pi = r % spec.placements
            tasks.append((spec, seed, gi, r, placements[(gi, pi)],
                          oracle_vars[(gi, pi)]))

    results: Dict[Tuple[int, int], dict] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for gi, r, res in pool.map(_rep_task, tasks,
                                       chunksize=max(1, len(tasks) // (jobs * 8) or 1)):
                results[(gi, r)] = res
    else:
        for t in tasks:
            gi, r, res = _rep_task(t)
            results[(gi, r)] = res

    cells = {}
    for gi, d_kl in enumerate(spec.d_kl_grid):
        per_est = {est: [] for est in spec.estimators}
        fails = {est: 0 for est in spec.estimators}
        true_taus = []
        for r in range(spec.replications):
            res = results[(gi, r)]
            true_taus.append(res["true_tau"])
            for est in spec.estimators:
                entry = res["results"][est]
                if entry[0] == "fail":
                    fails[est] += 1
                else:
                    per_est[est].append(entry)
        for est in spec.estimators:
            stats = CellStats(n_fail=fails[est], n_reps=spec.replications)
            ok = per_est[est]
            if fails[est] > spec.max_fail_frac * spec.replications:
                stats.aborted = True
            elif ok:
                taus = np.array([e[0] for e in ok])
                tvals = [results[(gi, r)]["true_tau"] for r in range(spec.replications)
                         if results[(gi, r)]["results"][est][0] != "fail"]
                errs = taus - np.array(tvals)
                stats.bias = float(np.mean(errs))
                stats.var = float(np.var(taus))
                stats.mse = stats.bias ** 2 + stats.var
                stats.mean_tau_hat = float(np.mean(taus))
                stats.mean_var_hat = float(np.mean([e[1] for e in ok]))
                stats.mean_half_width = float(np.mean([e[2] for e in ok]))
                stats.coverage = float(np.mean([1.0 if e[3] else 0.0 for e in ok]))
            cells[(float(d_kl), est)] = stats
    result = SweepResult(spec=spec, seed=seed, cells=cells)
    result.check_decomposition()
    return result


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_kl(spec: SweepSpec, seed: int, out_path, jobs: int = 1) -> SweepResult:
    """Run the dial sweep and write one CSV row per (d_kl, estimator)."""
    result = run_monte_carlo(spec, seed, jobs=jobs)
    lines = [",".join(SWEEP_COLUMNS)]
    for d_kl in spec.d_kl_grid:
        for est in spec.estimators:
            c = result.cells[(float(d_kl), est)]
            lines.append(",".join([
                _fmt(float(d_kl)), est, spec.nuisance_mode, spec.ps_spec,
                spec.om_spec, _fmt(c.mse), _fmt(c.bias), _fmt(c.var),
                _fmt(c.coverage), _fmt(c.fail_rate)]))
    with open(out_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return result


def ci_grid(spec: SweepSpec, seed: int, out_path, jobs: int = 1) -> Dict[tuple, CellStats]:
    """Interval quality at heterogeneity 3 over the four (ps_spec, om_spec)
    combinations, each run on the same derived data streams."""
    rows = {}
    lines = [",".join(CI_GRID_COLUMNS)]
    for ps in ("correct", "wrong"):
        for om in ("correct", "wrong"):
            cell_spec = replace(spec, d_kl_grid=(3.0,), ps_spec=ps, om_spec=om)
            result = run_monte_carlo(cell_spec, seed, jobs=jobs)
            for est in spec.estimators:
                c = result.cells[(3.0, est)]
                rows[(est, ps, om)] = c
                lines.append(",".join([
                    est, ps, om, _fmt(c.mean_tau_hat),
                    _fmt(c.mean_half_width), _fmt(c.coverage)]))
    with open(out_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows
