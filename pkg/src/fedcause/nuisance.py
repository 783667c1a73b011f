"""Propensity assembly, pooled assignment scores, cross-fit folds, and the
inverse-propensity-weighted outcome loss with its analytic gradient."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .core import SiteDataset, TargetCovariates
from .density_ratio import FeatureMap, RatioModel

# near-zero assignment scores are floored here before any division
SCORE_FLOOR = 1e-12


@dataclass
class PropensitySet:
    """Selection-arm probability functions e[(site_id, z)](x), known either
    exactly (kind "oracle") or assembled from fitted ratios up to one shared
    positive constant (kind "assembled")."""

    e: Dict[Tuple[int, int], Callable]
    kind: str = "assembled"
    global_constant_unknown: bool = True

    @property
    def pairs(self):
        return sorted(self.e.keys())

    @property
    def site_ids(self):
        return sorted({k for k, _ in self.e.keys()})

    def has(self, site_id: int, z: int) -> bool:
        return (site_id, int(z)) in self.e

    def eval(self, site_id: int, z: int, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        fn = self.e.get((site_id, int(z)))
        if fn is None:
            return np.zeros(len(x))
        return np.asarray(fn(x), dtype=float).reshape(len(x))

    def scaled(self, c: float) -> "PropensitySet":
        """Every function multiplied by c > 0; estimators must not notice."""
        if c <= 0:
            raise ValueError("scale must be positive")
        scaled = {
            pair: (lambda x, f=fn: c * np.asarray(f(x), dtype=float))
            for pair, fn in self.e.items()
        }
        return PropensitySet(e=scaled, kind="assembled", global_constant_unknown=True)


def assemble_propensity(ratios: Dict[Tuple[int, int], RatioModel],
                        site_arm_counts: Dict[Tuple[int, int], int],
                        n_pooled: int) -> PropensitySet:
    """Turn density-ratio models into selection-arm scores:
    e_hat[(k, z)](x) = r_hat[(k, z)](x) * count(k, z) / n_pooled.

    The ratio models must estimate p(x | selected into (k, z)) / p_target(x);
    a balancing-oriented tilt fit needs invert_balancing_model first. The
    drop probability is unobservable and deliberately omitted, so the set is
    correct only up to one shared positive constant. Pairs absent from
    ``ratios`` evaluate to zero downstream.
    """
    if n_pooled <= 0:
        raise ValueError("n_pooled must be positive")
    e = {}
    for pair, model in ratios.items():
        count = site_arm_counts.get(pair)
        if count is None or count <= 0:
            raise ValueError(f"missing or non-positive count for pair {pair}")
        share = count / n_pooled
        e[pair] = (lambda x, m=model, s=share: s * np.asarray(m.eval(np.atleast_2d(x)), dtype=float))
    return PropensitySet(e=e, kind="assembled", global_constant_unknown=True)


def invert_balancing_model(model: RatioModel, n_source: int, n_target: int) -> RatioModel:
    """Convert a source-to-target balancing tilt into the selection-side ratio
    p_source/p_target: negate gamma and add log(n_target/n_source) to the
    intercept. Requires a tilting model whose feature map has an intercept."""
    if model.backend != "tilting":
        raise ValueError("only tilting models can be inverted analytically")
    if not model.psi.has_intercept:
        raise ValueError("inversion needs an intercept in the feature map")
    gamma = -np.asarray(model.gamma, dtype=float)
    gamma[0] += np.log(n_target / n_source)
    info = dict(model.fit_info)
    info["inverted"] = True
    return RatioModel(backend="tilting", gamma=gamma, psi=model.psi, fit_info=info)


def pooled_score(p: PropensitySet, eta: Optional[Dict[int, float]], x, z: int) -> np.ndarray:
    """Weighted pooled assignment score sum_k eta_k * e_hat[(k, z)](x).
    eta defaults to 1 for every site."""
    if not p.e:
        raise ValueError("empty propensity set")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    total = np.zeros(len(x))
    for (k, zz) in p.pairs:
        if zz != int(z):
            continue
        w = 1.0 if eta is None else float(eta.get(k, 1.0))
        if w == 0.0:
            continue
        total += w * p.eval(k, zz, x)
    return total


@dataclass(frozen=True)
class FoldPlan:
    """Per-site partition of unit indices into F folds of near-equal size.
    Target covariates are never split; outcome models do not train on them."""

    F: int
    fold_index: Dict[int, np.ndarray]

    def eval_mask(self, site_id: int, fold: int) -> np.ndarray:
        return self.fold_index[site_id] == fold

    def train_mask(self, site_id: int, fold: int) -> np.ndarray:
        return self.fold_index[site_id] != fold


def crossfit_split(sites: Sequence[SiteDataset], target: Optional[TargetCovariates],
                   F: int, rng) -> FoldPlan:
    """Uniformly random balanced fold assignment per site, deterministic for
    a given generator state. Fold sizes within a site differ by at most 1."""
    if F < 2:
        raise ValueError("F must be >= 2")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    fold_index = {}
    for s in sites:
        if s.n < F:
            raise ValueError(f"site {s.site_id} has fewer records than folds")
        perm = rng.permutation(s.n)
        idx = np.empty(s.n, dtype=int)
        idx[perm] = np.arange(s.n) % F
        fold_index[s.site_id] = idx
    return FoldPlan(F=F, fold_index=fold_index)


@dataclass
class OutcomeModel:
    """Linear outcome regression for one arm on a feature map.

    A constant term always leads the coefficient vector: predictions are
    psi.design(x) @ theta, where design prepends a ones column whenever the
    map itself has none.
    """

    arm: int
    psi: FeatureMap
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("non-finite outcome-model parameters")

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        d = np.atleast_2d(self.psi.design(x))
        out = d @ self.theta
        return float(out[0]) if single else out

    def to_json(self) -> str:
        return json.dumps({"arm": self.arm, "psi": self.psi.name,
                           "theta": [float(v) for v in self.theta]})

    @classmethod
    def from_json(cls, s: str) -> "OutcomeModel":
        obj = json.loads(s)
        return cls(arm=int(obj["arm"]), psi=FeatureMap(obj["psi"]),
                   theta=np.asarray(obj["theta"], dtype=float))


def zero_outcome_model(arm: int, psi: FeatureMap, d: int) -> OutcomeModel:
    p = psi.output_dim(d) + (0 if psi.has_intercept else 1)
    return OutcomeModel(arm=arm, psi=psi, theta=np.zeros(p))


def weighted_loss_and_grad(m: OutcomeModel, site: SiteDataset, p: PropensitySet,
                           eta: Optional[Dict[int, float]] = None,
                           include: Optional[np.ndarray] = None):
    """Squared loss on one site's arm-matching units, each term divided by the
    pooled assignment score at that unit.

    Returns (loss, grad, n_excluded). Units whose pooled score is exactly zero
    are excluded and counted; near-zero scores are floored at 1e-12.
    """
    z = site.z_vec
    mask = z == m.arm
    if include is not None:
        mask = mask & np.asarray(include, dtype=bool)
    pdim = len(m.theta)
    if not np.any(mask):
        return 0.0, np.zeros(pdim), 0
    x = site.x_matrix[mask]
    y = site.y_vec[mask]
    s = pooled_score(p, eta, x, m.arm)
    use = s > 0.0
    n_excluded = int(np.sum(~use))
    if not np.any(use):
        return 0.0, np.zeros(pdim), n_excluded
    w = 1.0 / np.maximum(s[use], SCORE_FLOOR)
    design = np.atleast_2d(m.psi.design(x[use]))
    resid = y[use] - design @ m.theta
    loss = float(np.sum(w * resid ** 2))
    grad = -2.0 * design.T @ (w * resid)
    return loss, grad, n_excluded


def fit_outcome_direct(sites: Sequence[SiteDataset], arm: int, psi: FeatureMap,
                       p: PropensitySet, eta: Optional[Dict[int, float]] = None,
                       include: Optional[Dict[int, np.ndarray]] = None) -> OutcomeModel:
    """Minimize the pooled weighted squared loss exactly via least squares.

    Weights 1/score are normalized to mean one before solving, which leaves
    the minimizer unchanged and makes the fit invariant to the shared unknown
    constant in assembled scores by construction.
    """
    rows, ys, ws = [], [], []
    for s in sorted(sites, key=lambda t: t.site_id):
        mask = s.z_vec == arm
        if include is not None and s.site_id in include:
            mask = mask & np.asarray(include[s.site_id], dtype=bool)
        if not np.any(mask):
            continue
        x = s.x_matrix[mask]
        sc = pooled_score(p, eta, x, arm)
        use = sc > 0.0
        if not np.any(use):
            continue
        rows.append(np.atleast_2d(psi.design(x[use])))
        ys.append(s.y_vec[mask][use])
        ws.append(1.0 / np.maximum(sc[use], SCORE_FLOOR))
    if not rows:
        raise ValueError(f"no usable units to fit the arm-{arm} outcome model")
    D = np.vstack(rows)
    y = np.concatenate(ys)
    w = np.concatenate(ws)
    w = w / w.mean()
    sw = np.sqrt(w)
    theta, *_ = np.linalg.lstsq(D * sw[:, None], y * sw, rcond=None)
    return OutcomeModel(arm=arm, psi=psi, theta=theta)
