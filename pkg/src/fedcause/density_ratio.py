"""Density-ratio estimation between a source sample and target covariates.

Two backends are provided. The parametric backend fits an exponential tilt
exp(psi(x)' gamma) by moment matching on a feature map, solving the convex
dual with a damped Newton method. The nonparametric backend forms a ratio of
nearest-neighbour counts. An analytic Gaussian oracle supports testing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

FEATURE_MAP_NAMES = ("identity", "identity_plus_intercept", "misspecified")


def _misspec_transform(x: np.ndarray) -> np.ndarray:
    """Deliberately wrong 3-d feature transform: (x1*x2, x2^2, x3/max(1, x1*x2))."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError("misspecified transform requires d = 3")
    x2d = np.atleast_2d(x)
    f1 = x2d[:, 0] * x2d[:, 1]
    f2 = x2d[:, 1] ** 2
    f3 = x2d[:, 2] / np.maximum(1.0, f1)
    out = np.column_stack([f1, f2, f3])
    return out[0] if x.ndim == 1 else out


@dataclass(frozen=True)
class FeatureMap:
    """Named representation function psi.

    identity                x -> x
    identity_plus_intercept x -> (1, x)
    misspecified            x -> (1, x1*x2, x2^2, x3/max(1, x1*x2)); the
                            constant column keeps a free normalization when
                            the map is used for ratio fitting
    """

    name: str

    def __post_init__(self):
        if self.name not in FEATURE_MAP_NAMES:
            raise ValueError(f"unknown feature map {self.name!r}")

    @property
    def has_intercept(self) -> bool:
        return self.name != "identity"

    def output_dim(self, d: int) -> int:
        if self.name == "identity":
            return d
        if self.name == "identity_plus_intercept":
            return d + 1
        return 4

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2d = np.atleast_2d(x)
        if self.name == "identity":
            out = x2d
        elif self.name == "identity_plus_intercept":
            out = np.hstack([np.ones((len(x2d), 1)), x2d])
        else:
            out = np.hstack([np.ones((len(x2d), 1)), _misspec_transform(x2d)])
        return out[0] if single else out

    def design(self, x) -> np.ndarray:
        """Regression design: apply() with a constant column guaranteed."""
        f = self.apply(x)
        if self.has_intercept:
            return f
        f2d = np.atleast_2d(f)
        out = np.hstack([np.ones((len(f2d), 1)), f2d])
        return out[0] if f.ndim == 1 else out


IDENTITY = FeatureMap("identity")
IDENTITY_PLUS_INTERCEPT = FeatureMap("identity_plus_intercept")
MISSPECIFIED = FeatureMap("misspecified")


class TiltingError(Exception):
    """Moment matching did not converge.

    Attributes: ``residual`` is the best relative residual norm seen,
    ``iterations`` the Newton iterations used, ``separated`` flags the case
    where the target moments lie outside the reachable set and the dual is
    unbounded below.
    """

    def __init__(self, message, residual=float("nan"), iterations=0, separated=False):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.separated = separated


@dataclass
class RatioModel:
    """A fitted density-ratio function of x.

    backend "tilting": eval(x) = exp(psi(x)' gamma), strictly positive.
    backend "knn": eval(x) = (n_target/n_source) * M / max(W, 1) where W
    counts target points inside the closed ball reaching x's M-th nearest
    source neighbour.
    """

    backend: str
    gamma: Optional[np.ndarray] = None
    psi: Optional[FeatureMap] = None
    M: Optional[int] = None
    source_points: Optional[np.ndarray] = None
    target_points: Optional[np.ndarray] = None
    n_source: Optional[int] = None
    n_target: Optional[int] = None
    scale: Optional[np.ndarray] = None
    fit_info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in ("tilting", "knn"):
            raise ValueError(f"unknown backend {self.backend!r}")

    def eval(self, x):
        vals, _ = self.eval_with_diagnostics(x)
        return vals

    def eval_with_diagnostics(self, x):
        """Returns (values, n_floored); n_floored counts empty-ball probes."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if self.backend == "tilting":
            f = np.atleast_2d(self.psi.apply(x))
            vals = np.exp(f @ self.gamma)
            return (float(vals[0]) if single else vals), 0
        pts = np.atleast_2d(x)
        if self.scale is not None:
            pts = pts / self.scale
        # squared distances on both sides so boundary ties (duplicate points)
        # land inside the closed ball regardless of sqrt rounding
        src, tgt = self.source_points, self.target_points
        w = np.empty(len(pts), dtype=float)
        block = max(1, 2 ** 21 // max(len(src) + len(tgt), 1))
        for lo in range(0, len(pts), block):
            chunk = pts[lo:lo + block]
            d2s = np.sum((chunk[:, None, :] - src[None, :, :]) ** 2, axis=2)
            rho2 = np.partition(d2s, self.M - 1, axis=1)[:, self.M - 1]
            d2t = np.sum((chunk[:, None, :] - tgt[None, :, :]) ** 2, axis=2)
            w[lo:lo + block] = np.sum(d2t <= rho2[:, None], axis=1)
        n_floored = int(np.sum(w < 1))
        vals = (self.n_target / self.n_source) * self.M / np.maximum(w, 1)
        return (float(vals[0]) if single else vals), n_floored

    def to_json_obj(self, source_points_ref=None) -> dict:
        if self.backend == "tilting":
            return {
                "backend": "tilting",
                "gamma": [float(v) for v in self.gamma],
                "psi": self.psi.name,
            }
        return {
            "backend": "knn",
            "M": int(self.M),
            "n_source": int(self.n_source),
            "n_target": int(self.n_target),
            "source_points_ref": source_points_ref,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RatioModel":
        if obj["backend"] == "tilting":
            return cls(
                backend="tilting",
                gamma=np.asarray(obj["gamma"], dtype=float),
                psi=FeatureMap(obj["psi"]),
            )
        raise ValueError("knn models do not round-trip through JSON alone; "
                         "the point sets live outside the schema")


def _unstandardize(g, mu, sd, has_intercept: bool) -> np.ndarray:
    graw = g / sd
    if has_intercept:
        graw[0] = g[0] - float(((mu / sd)[1:] * g[1:]).sum())
    return graw


def fit_tilting(source, target, psi: FeatureMap = IDENTITY_PLUS_INTERCEPT,
                tol: float = 1e-9, max_iter: int = 200) -> RatioModel:
    """Fit exp(psi(x)' gamma) so source units reweighted by it match target
    feature totals: sum_source psi exp(psi' gamma) = sum_target psi.

    Solved by damped Newton on the convex dual
    G(gamma) = sum_source exp(psi' gamma) - gamma' sum_target psi, whose
    gradient is the moment residual. Steps are Levenberg-damped with a trust
    cap and backtracked until the dual decreases, so the recorded dual trace
    is non-increasing. Convergence is declared at relative residual <= tol
    (gradient norm over max(1, target-moment norm)). A stall at relative
    residual <= 1e-5 is accepted and flagged soft in fit_info; anything worse
    raises TiltingError carrying the best residual, with separation (target
    moments outside the reachable set, dual unbounded below) reported
    distinctly.

    The returned model reweights source toward target. When the selection-side
    ratio p_source/p_target is needed instead, invert it (see
    nuisance.invert_balancing_model).
    """
    src = np.atleast_2d(np.asarray(source, dtype=float))
    tgt = np.atleast_2d(np.asarray(target, dtype=float))
    if src.size == 0 or tgt.size == 0:
        raise ValueError("source and target must be non-empty")
    if src.shape[1] != tgt.shape[1]:
        raise ValueError("source and target dimension mismatch")

    A = np.atleast_2d(psi.apply(src)).astype(float)
    t = np.atleast_2d(psi.apply(tgt)).sum(axis=0).astype(float)
    n, p = A.shape
    has_icpt = psi.has_intercept

    # internal standardization; the intercept column absorbs the centering
    sd = A.std(axis=0)
    sd[sd == 0] = 1.0
    if has_icpt:
        mu = A.mean(axis=0)
        n_t = float(len(tgt))
        A = (A - mu) / sd
        A[:, 0] = 1.0
        t = (t - n_t * mu) / sd
        t[0] = n_t
    else:
        mu = np.zeros(p)
        A = A / sd
        t = t / sd
    scale = max(1.0, float(np.linalg.norm(t)))

    def dual(g):
        with np.errstate(over="ignore"):
            return float(np.exp(A @ g).sum() - g @ t)

    g = np.zeros(p)
    cur = dual(g)
    lam = 0.0
    best_g, best_rn = g.copy(), math.inf
    trace = [cur]
    it = 0
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore"):
            eg = np.exp(A @ g)
        grad = A.T @ eg - t
        rn = float(np.linalg.norm(grad)) / scale
        if rn < best_rn:
            best_rn, best_g = rn, g.copy()
        if rn <= tol:
            gamma = _unstandardize(g, mu, sd, has_icpt)
            return RatioModel(backend="tilting", gamma=gamma, psi=psi,
                              fit_info={"iterations": it, "residual": rn,
                                        "soft": False, "dual_trace": trace})
        if float(np.linalg.norm(g)) > 50.0 or cur < -1e10:
            raise TiltingError(
                f"separation: dual unbounded below, best relative residual {best_rn:.3g}",
                residual=best_rn, iterations=it, separated=True)
        H = (A * eg[:, None]).T @ A
        moved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(H + lam * np.eye(p), -grad)
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-8)
                continue
            sn = float(np.linalg.norm(step))
            if sn > 4.0:
                step *= 4.0 / sn
            ts = 1.0
            for _ in range(50):
                cand = dual(g + ts * step)
                if np.isfinite(cand) and cand < cur - 1e-14 * abs(cur):
                    g = g + ts * step
                    cur = cand
                    trace.append(cur)
                    moved = True
                    break
                ts *= 0.5
            if moved:
                lam = lam / 3.0 if lam > 1e-12 else 0.0
                break
            lam = max(lam * 10.0, 1e-8)
        if not moved:
            break

    if best_rn <= 1e-5:
        gamma = _unstandardize(best_g, mu, sd, has_icpt)
        return RatioModel(backend="tilting", gamma=gamma, psi=psi,
                          fit_info={"iterations": it, "residual": best_rn,
                                    "soft": True, "dual_trace": trace})
    raise TiltingError(
        f"no convergence in {it} iterations, best relative residual {best_rn:.3g}",
        residual=best_rn, iterations=it, separated=False)


def fit_knn(source, target, M: Optional[int] = None, standardize: bool = False) -> RatioModel:
    """Nearest-neighbour count-ratio estimator of p_source / p_target.

    For a probe x, rho is the Euclidean distance to its M-th nearest source
    point and W counts target points with distance <= rho (closed ball, ties
    included). The estimate is (n_target/n_source) * M / max(W, 1); the floor
    guards empty balls and is surfaced through eval_with_diagnostics. M
    defaults to ceil(n_source^(2/(2+d))). Distances are taken on raw
    coordinates unless standardize is set.
    """
    src = np.atleast_2d(np.asarray(source, dtype=float))
    tgt = np.atleast_2d(np.asarray(target, dtype=float))
    if src.shape[1] != tgt.shape[1]:
        raise ValueError("source and target dimension mismatch")
    n_s, d = src.shape
    if M is None:
        M = math.ceil(n_s ** (2.0 / (2.0 + d)))
    M = int(M)
    if M < 1:
        raise ValueError("M must be >= 1")
    if M > n_s:
        raise ValueError(f"M={M} exceeds the source size {n_s}")
    scale = None
    if standardize:
        scale = src.std(axis=0)
        scale[scale == 0] = 1.0
        src = src / scale
        tgt = tgt / scale
    return RatioModel(backend="knn", M=M,
                      source_points=np.ascontiguousarray(src),
                      target_points=np.ascontiguousarray(tgt),
                      n_source=n_s, n_target=len(tgt), scale=scale)


def oracle_gaussian_ratio(mu_source, mu_target, sigma: float, x):
    """Exact p_source/p_target for equal-covariance isotropic Gaussians:
    exp((mu_s - mu_t)' x / sigma^2 + (|mu_t|^2 - |mu_s|^2) / (2 sigma^2)).

    Scalar means with 1-d x treat x as a batch of scalar probes; vector means
    with 1-d x treat x as a single point.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ms = np.atleast_1d(np.asarray(mu_source, dtype=float))
    mt = np.atleast_1d(np.asarray(mu_target, dtype=float))
    d = len(ms)
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x2d, single = x.reshape(1, 1), True
    elif x.ndim == 1 and d == 1:
        x2d, single = x.reshape(-1, 1), False
    elif x.ndim == 1:
        x2d, single = x.reshape(1, -1), True
    else:
        x2d, single = x, False
    val = np.exp(x2d @ (ms - mt) / sigma ** 2 + (mt @ mt - ms @ ms) / (2.0 * sigma ** 2))
    return float(val[0]) if single else val
