"""Single-process simulator for the two collaborative protocols.

Every exchange is an explicit message with a JSON-serializable payload, so a
run leaves an auditable transcript. The server never sees unit records: sites
publish fitted ratio models and aggregate sums only, and the final report is
assembled purely from parsed messages, which is why ``replay`` on a saved log
reproduces it bitwise.

Protocol one: each site sends its inverse-propensity aggregate sums once and
the server combines them into the pooled estimate.

Protocol two: sites publish per-arm ratio models, the server assembles the
pooled scores, outcome models for both arms are trained by federated
averaging under a cross-fit plan, and sites return residualized aggregates
per fold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import EstimateReport, SiteDataset, TargetCovariates
from .density_ratio import RatioModel
from .estimators import (AipwInputs, Excluded, MetaDeltas, SiteAggregates,
                         aipw_combine, aipw_corrections, clb_combine,
                         clb_site_aggregates)
from .nuisance import (FoldPlan, OutcomeModel, PropensitySet,
                       assemble_propensity, crossfit_split,
                       weighted_loss_and_grad, zero_outcome_model)

MESSAGE_KINDS = ("publish_ratio_model", "aggregates", "model_params",
                 "gradient_update", "target_mean_term")

_SERVER_KINDS = ("model_params", "target_mean_term")


class PrivacyError(RuntimeError):
    """A requested exchange would move unit-level records off a site."""


class FedAvgDivergence(RuntimeError):
    """Federated averaging lost control of the loss; carries the loss trace."""

    def __init__(self, message: str, trace: List[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class SiteMessage:
    sender: Union[str, int]
    kind: str
    round: int
    payload: dict

    def to_json_line(self) -> str:
        return json.dumps({"round": self.round, "from": self.sender,
                           "kind": self.kind, "payload": self.payload})

    @classmethod
    def from_json_line(cls, line: str) -> "SiteMessage":
        obj = json.loads(line)
        return cls(sender=obj["from"], kind=obj["kind"],
                   round=obj["round"], payload=obj["payload"])


@dataclass
class MessageLog:
    messages: List[SiteMessage] = field(default_factory=list)

    def append(self, msg: SiteMessage) -> None:
        self.messages.append(msg)

    def __iter__(self):
        return iter(self.messages)

    def __len__(self):
        return len(self.messages)

    def by_kind(self, kind: str) -> List[SiteMessage]:
        return [m for m in self.messages if m.kind == kind]

    def to_jsonl(self) -> str:
        return "".join(m.to_json_line() + "\n" for m in self.messages)

    @classmethod
    def from_jsonl(cls, text: str) -> "MessageLog":
        return cls([SiteMessage.from_json_line(ln)
                    for ln in text.splitlines() if ln.strip()])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "MessageLog":
        with open(path) as fh:
            return cls.from_jsonl(fh.read())


@dataclass(frozen=True)
class FedConfig:
    """Federated-averaging schedule.

    learning_rate None lets the engine derive a stable step from the pooled
    curvature of the mean weighted loss. tol 0 disables early stopping so the
    round count, and hence the message count, is exactly the budget.
    """

    rounds: int = 50
    local_steps: int = 1
    learning_rate: Optional[float] = None
    server_weighting: str = "arm_count"
    tol: float = 0.0

    def __post_init__(self):
        if self.rounds < 1 or self.local_steps < 1:
            raise ValueError("rounds and local_steps must be >= 1")
        if self.server_weighting not in ("arm_count", "uniform"):
            raise ValueError(f"unknown server weighting {self.server_weighting!r}")


def expected_message_count(n_sites: int, rounds: int, folds: int) -> int:
    """Transcript length of protocol two at a full round budget: per fold and
    round one parameter message to each site and one update back, plus the
    publish, per-fold aggregate, and target-term messages."""
    return n_sites * (2 * rounds * folds + folds + 1) + folds


def _wire(obj, enabled: bool):
    # JSON round-trips finite floats exactly, so enabling this changes bytes
    # on the wire but never the arithmetic.
    return json.loads(json.dumps(obj)) if enabled else obj


# ---------------------------------------------------------------------------
# Federated averaging of the weighted outcome regressions, both arms at once


def _site_local_update(site: SiteDataset, p: PropensitySet, psi, payload: dict,
                       cfg: FedConfig, lr: float, eta, inc) -> dict:
    out = {"fold": payload["fold"], "round": payload["round"]}
    for arm in (1, 0):
        th0 = np.asarray(payload[f"theta{arm}"], dtype=float)
        th = th0.copy()
        mask = site.z_vec == arm
        if inc is not None:
            mask = mask & np.asarray(inc, dtype=bool)
        n_arm = int(np.sum(mask))
        n_used = 0
        mean_loss = 0.0
        for step in range(cfg.local_steps):
            m = OutcomeModel(arm=arm, psi=psi, theta=th)
            loss, grad, n_excl = weighted_loss_and_grad(m, site, p, eta, inc)
            n_used = n_arm - n_excl
            if step == 0:
                mean_loss = loss / n_used if n_used > 0 else 0.0
            if n_used == 0:
                break
            th = th - (lr / n_used) * grad
        out[f"delta{arm}"] = [float(v) for v in (th - th0)]
        out[f"n{arm}"] = int(n_used)
        out[f"loss{arm}"] = float(mean_loss)
    return out


def suggest_learning_rate(sites: Sequence[SiteDataset], p: PropensitySet, psi,
                          eta=None, include: Optional[Dict[int, np.ndarray]] = None
                          ) -> float:
    """1 / L for the pooled mean weighted loss, the largest single step that
    keeps one-local-step averaging monotone; L is the top curvature over arms.
    """
    worst = 0.0
    from .nuisance import SCORE_FLOOR, pooled_score
    for arm in (1, 0):
        H = None
        n = 0
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
            w = 1.0 / np.maximum(sc[use], SCORE_FLOOR)
            design = np.atleast_2d(psi.design(x[use]))
            contrib = design.T @ (design * w[:, None])
            H = contrib if H is None else H + contrib
            n += int(np.sum(use))
        if H is None or n == 0:
            continue
        lam = float(np.linalg.eigvalsh(2.0 * H / n)[-1])
        worst = max(worst, lam)
    if worst <= 0.0:
        return 1.0
    return 1.0 / worst


def _fedavg_engine(sites: Sequence[SiteDataset], p: PropensitySet, psi,
                   cfg: FedConfig, eta=None,
                   include: Optional[Dict[int, np.ndarray]] = None,
                   fold: int = 0, emit=None, wire: bool = False):
    """Run the averaging rounds for one fold; both arms ride each message.

    With emit set, every parameter broadcast and gradient update is recorded;
    with wire set, consumed payloads pass through a JSON round-trip first.
    Returns (model_treated, model_control, info).
    """
    sites = sorted(sites, key=lambda s: s.site_id)
    d = sites[0].d
    lr = cfg.learning_rate
    if lr is None:
        lr = suggest_learning_rate(sites, p, psi, eta, include)
    pdim = len(zero_outcome_model(1, psi, d).theta)
    theta = {1: [0.0] * pdim, 0: [0.0] * pdim}
    trace: List[float] = []
    prev = None
    rounds_run = 0
    converged = False
    for r in range(cfg.rounds):
        broadcast = {}
        for s in sites:
            payload = {"fold": fold, "round": r, "to": s.site_id,
                       "theta1": list(theta[1]), "theta0": list(theta[0])}
            if emit is not None:
                emit(SiteMessage("server", "model_params", r, payload))
            broadcast[s.site_id] = _wire(payload, wire)
        updates = []
        for s in sites:
            inc = None if include is None else include.get(s.site_id)
            upd = _site_local_update(s, p, psi, broadcast[s.site_id], cfg, lr, eta, inc)
            if emit is not None:
                emit(SiteMessage(s.site_id, "gradient_update", r, upd))
            updates.append(_wire(upd, wire))
        total_loss = 0.0
        for arm in (1, 0):
            if cfg.server_weighting == "arm_count":
                wk = [float(u[f"n{arm}"]) for u in updates]
            else:
                wk = [1.0 if u[f"n{arm}"] > 0 else 0.0 for u in updates]
            tot = sum(wk)
            if tot <= 0.0:
                continue
            step = np.zeros(pdim)
            for u, w in zip(updates, wk):
                if w > 0.0:
                    step += (w / tot) * np.asarray(u[f"delta{arm}"], dtype=float)
                    total_loss += (w / tot) * u[f"loss{arm}"]
            theta[arm] = [float(v) for v in (np.asarray(theta[arm]) + step)]
        trace.append(total_loss)
        rounds_run = r + 1
        if len(trace) >= 6 and trace[-1] > 10.0 * trace[-6] > 0.0:
            raise FedAvgDivergence(
                f"loss grew from {trace[-6]:.6g} to {trace[-1]:.6g} within five rounds "
                f"(fold {fold}); lower the learning rate", trace)
        if cfg.tol > 0.0 and prev is not None and \
                abs(total_loss - prev) <= cfg.tol * max(1.0, abs(prev)):
            converged = True
            break
        prev = total_loss
    info = {"rounds_run": rounds_run, "loss_trace": trace,
            "converged": converged, "learning_rate": lr}
    m1 = OutcomeModel(arm=1, psi=psi, theta=np.asarray(theta[1], dtype=float))
    m0 = OutcomeModel(arm=0, psi=psi, theta=np.asarray(theta[0], dtype=float))
    return m1, m0, info


def fedavg_train(sites, p, psi, cfg: Optional[FedConfig] = None, eta=None,
                 include=None, fold: int = 0):
    """The averaging engine without any message recording."""
    return _fedavg_engine(sites, p, psi, cfg or FedConfig(), eta=eta,
                          include=include, fold=fold)


# ---------------------------------------------------------------------------
# Server-side report assembly, shared by live runs and replay


def _report_from_log(log: MessageLog, ci_level: float = 0.95,
                     weights: Optional[Dict[int, float]] = None) -> EstimateReport:
    agg_msgs = log.by_kind("aggregates")
    if not agg_msgs:
        raise ValueError("log contains no aggregate messages")
    target_msgs = log.by_kind("target_mean_term")
    if not target_msgs:
        aggs = [SiteAggregates.from_payload(m.payload)
                for m in sorted(agg_msgs, key=lambda m: m.payload["site_id"])]
        return clb_combine(aggs, ci_level=ci_level)

    per_fold: Dict[int, list] = {}
    n_pooled = 0
    flavor = "clb"
    for m in agg_msgs:
        pay = m.payload
        f = int(pay["fold"])
        if "excluded" in pay:
            item = Excluded(pay["excluded"])
            flavor = "meta"
        elif "G1" in pay:
            item = SiteAggregates.from_payload(pay)
            n_pooled += item.n_units
        else:
            item = MetaDeltas.from_payload(pay)
            n_pooled += item.n_units
            flavor = "meta"
        per_fold.setdefault(f, []).append(item)
    if n_pooled <= 0:
        raise ValueError("aggregate messages cover no usable units")

    term_by_fold = {int(m.payload["fold"]): m.payload for m in target_msgs}
    inputs = []
    for f in sorted(per_fold):
        if f not in term_by_fold:
            raise ValueError(f"fold {f} has aggregates but no target-mean term")
        pay = term_by_fold[f]
        inputs.append(AipwInputs(target_mean_term=float(pay["value"]),
                                 target_sq_term=float(pay["target_var"]),
                                 n_target=int(pay["n_target"]),
                                 deltas=per_fold[f],
                                 lambda_hat=int(pay["n_target"]) / n_pooled,
                                 n_pooled=n_pooled, fold=f))
    return aipw_combine(inputs, flavor=flavor, weights=weights, ci_level=ci_level)


def replay(log: MessageLog, ci_level: float = 0.95,
           weights: Optional[Dict[int, float]] = None) -> EstimateReport:
    """Rebuild the estimate from a transcript alone. A live run assembles its
    report through this same parser, so replay matches it bitwise."""
    return _report_from_log(log, ci_level=ci_level, weights=weights)


# ---------------------------------------------------------------------------
# Protocol one: aggregate once, combine once


def run_algorithm1(sites: Sequence[SiteDataset], p: PropensitySet,
                   eta: Optional[Dict[int, float]] = None,
                   ci_level: float = 0.95,
                   include: Optional[Dict[int, np.ndarray]] = None
                   ) -> Tuple[EstimateReport, MessageLog]:
    """Pooled IPW over sites that only ever send aggregate sums."""
    log = MessageLog()
    for s in sorted(sites, key=lambda t: t.site_id):
        inc = None if include is None else include.get(s.site_id)
        agg = clb_site_aggregates(s, p, eta, inc)
        log.append(SiteMessage(s.site_id, "aggregates", 0,
                               _wire(agg.to_payload(), True)))
    return _report_from_log(log, ci_level=ci_level), log


# ---------------------------------------------------------------------------
# Protocol two: publish ratios, train by averaging, correct per fold


def run_algorithm2(sites: Sequence[SiteDataset], target: TargetCovariates,
                   ratios: Dict[Tuple[int, int], Optional[RatioModel]],
                   psi_om, cfg: Optional[FedConfig] = None, flavor: str = "clb",
                   F: int = 2, rng=None, eta: Optional[Dict[int, float]] = None,
                   weights: Optional[Dict[int, float]] = None,
                   include: Optional[Dict[int, np.ndarray]] = None,
                   ci_level: float = 0.95, train: bool = True,
                   init_models: Optional[Tuple[OutcomeModel, OutcomeModel]] = None,
                   fold_plan: Optional[FoldPlan] = None
                   ) -> Tuple[EstimateReport, MessageLog]:
    """Decoupled collaborative estimation as an explicit message exchange.

    ratios maps (site_id, arm) to a fitted selection-side density-ratio model;
    the target covariate table is public input the server already holds.
    With train False the outcome models are taken as given (zeros if None),
    cross-fitting collapses to a single fold, and no averaging messages flow.
    """
    return _algorithm2_impl(sites, target, ratios, psi_om, cfg, flavor, F, rng,
                            eta, weights, include, ci_level, train, init_models,
                            fold_plan, wire=True)


def centralized_algorithm2(sites, target, ratios, psi_om,
                           cfg: Optional[FedConfig] = None, flavor: str = "clb",
                           F: int = 2, rng=None, eta=None, weights=None,
                           include=None, ci_level: float = 0.95,
                           train: bool = True, init_models=None,
                           fold_plan: Optional[FoldPlan] = None):
    """The same computation with every exchange kept in memory: the reference
    the message-passing run must match bitwise."""
    return _algorithm2_impl(sites, target, ratios, psi_om, cfg, flavor, F, rng,
                            eta, weights, include, ci_level, train, init_models,
                            fold_plan, wire=False)


def _algorithm2_impl(sites, target, ratios, psi_om, cfg, flavor, F, rng, eta,
                     weights, include, ci_level, train, init_models, fold_plan,
                     wire: bool):
    sites = sorted(sites, key=lambda s: s.site_id)
    if not sites:
        raise ValueError("no sites")
    d = sites[0].d
    cfg = cfg or FedConfig()
    for pair, model in ratios.items():
        if model is not None and model.backend == "knn":
            raise PrivacyError(
                f"pair {pair}: nearest-neighbour ratio models embed raw unit "
                "records and cannot be published")

    log = MessageLog()

    # Sites publish their per-arm ratio models and arm counts.
    published = {}
    for s in sites:
        n1 = int(np.sum(s.z_vec == 1))
        n0 = s.n - n1
        m1r = ratios.get((s.site_id, 1))
        m0r = ratios.get((s.site_id, 0))
        payload = {"site_id": s.site_id, "n1": n1, "n0": n0,
                   "model1": None if m1r is None else m1r.to_json_obj(),
                   "model0": None if m0r is None else m0r.to_json_obj()}
        log.append(SiteMessage(s.site_id, "publish_ratio_model", 0, payload))
        published[s.site_id] = _wire(payload, wire)

    # The server assembles pooled scores from the published models.
    models, counts = {}, {}
    n_published = 0
    for sid in sorted(published):
        pay = published[sid]
        n_published += pay["n1"] + pay["n0"]
        for arm in (1, 0):
            obj = pay[f"model{arm}"]
            if obj is not None:
                models[(sid, arm)] = RatioModel.from_json_obj(obj)
                counts[(sid, arm)] = pay[f"n{arm}"]
    if not models:
        raise ValueError("no ratio models were published")
    p = assemble_propensity(models, counts, n_published)

    base = {s.site_id: (np.ones(s.n, dtype=bool)
                        if include is None or s.site_id not in include
                        else np.asarray(include[s.site_id], dtype=bool))
            for s in sites}

    if train:
        if fold_plan is None:
            fold_plan = crossfit_split(sites, target, F, rng)
        F_eff = fold_plan.F
    else:
        F_eff = 1

    for f in range(F_eff):
        if train:
            train_inc = {s.site_id: base[s.site_id] & fold_plan.train_mask(s.site_id, f)
                         for s in sites}
            m1, m0, _ = _fedavg_engine(sites, p, psi_om, cfg, eta=eta,
                                       include=train_inc, fold=f,
                                       emit=log.append, wire=wire)
            eval_inc = {s.site_id: base[s.site_id] & fold_plan.eval_mask(s.site_id, f)
                        for s in sites}
        else:
            if init_models is not None:
                m1, m0 = init_models
            else:
                m1 = zero_outcome_model(1, psi_om, d)
                m0 = zero_outcome_model(0, psi_om, d)
            eval_inc = base

        diff = np.atleast_1d(m1.predict(target.xs)) - np.atleast_1d(m0.predict(target.xs))
        tvar = float(np.var(diff, ddof=1)) if target.n > 1 else 0.0
        log.append(SiteMessage("server", "target_mean_term", f,
                               {"fold": f, "value": float(np.mean(diff)),
                                "target_var": tvar, "n_target": int(target.n)}))

        for s in sites:
            res = aipw_corrections(s, m1, m0, p, flavor, eta, eval_inc[s.site_id])
            if isinstance(res, Excluded):
                payload = {"fold": f, "site_id": s.site_id, "excluded": res.reason}
            else:
                payload = {"fold": f, **res.to_payload()}
            log.append(SiteMessage(s.site_id, "aggregates", f, payload))

    # the log's own parse path produces the report, so replay is exact
    wired = MessageLog([SiteMessage(m.sender, m.kind, m.round, _wire(m.payload, wire))
                        for m in log])
    report = _report_from_log(wired, ci_level=ci_level, weights=weights)
    return report, log


# ---------------------------------------------------------------------------
# Transcript auditing


_AGG_KEYS = {"site_id", "G1", "G0", "N1", "N0", "w2_1", "w2y_1", "w2y2_1",
             "w2_0", "w2y_0", "w2y2_0", "n_units", "n_floored", "fold"}
_META_KEYS = {"site_id", "d1", "d0", "n1_hat", "n0_hat", "s2_1", "s2_0",
              "n_units", "fold"}
_EXCL_KEYS = {"site_id", "fold", "excluded"}
_MODEL_KEYS = {"backend", "gamma", "psi", "M", "n_source", "n_target",
               "source_points_ref"}

_SCHEMAS = {
    "publish_ratio_model": {"site_id", "n1", "n0", "model1", "model0"},
    "aggregates": _AGG_KEYS | _META_KEYS | _EXCL_KEYS,
    "model_params": {"fold", "round", "to", "theta1", "theta0"},
    "gradient_update": {"fold", "round", "delta1", "delta0",
                        "n1", "n0", "loss1", "loss0"},
    "target_mean_term": {"fold", "value", "target_var", "n_target"},
}


def _scan_payload(value, path: str, max_len: int, out: List[str]) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _scan_payload(v, f"{path}.{k}", max_len, out)
    elif isinstance(value, (list, tuple)):
        if len(value) > max_len:
            out.append(f"{path}: array of length {len(value)} exceeds cap {max_len}")
        for v in value:
            if isinstance(v, (list, tuple, dict)):
                out.append(f"{path}: nested array shaped like raw records")
                break
    elif isinstance(value, str) and len(value) > 256:
        out.append(f"{path}: string of length {len(value)} exceeds cap 256")


def audit_messages(log: MessageLog, max_len: int = 64) -> List[str]:
    """Static checks that a transcript stays within the aggregate-only schema:
    known kinds, expected senders, whitelisted keys, no long or nested arrays.
    Returns the list of violations, empty when the log is clean."""
    violations: List[str] = []
    for i, m in enumerate(log):
        where = f"message {i} ({m.kind!r} from {m.sender!r})"
        allowed = _SCHEMAS.get(m.kind)
        if allowed is None:
            violations.append(f"{where}: unknown kind")
            continue
        if m.kind in _SERVER_KINDS:
            if m.sender != "server":
                violations.append(f"{where}: must come from the server")
        else:
            if not isinstance(m.sender, int):
                violations.append(f"{where}: must come from a site")
        if not isinstance(m.payload, dict):
            violations.append(f"{where}: payload is not an object")
            continue
        for key in m.payload:
            if key not in allowed:
                violations.append(f"{where}: unexpected key {key!r}")
        if m.kind == "publish_ratio_model":
            for slot in ("model1", "model0"):
                obj = m.payload.get(slot)
                if obj is None:
                    continue
                if not isinstance(obj, dict):
                    violations.append(f"{where}: {slot} is not an object")
                    continue
                for key in obj:
                    if key not in _MODEL_KEYS:
                        violations.append(f"{where}: unexpected model key {key!r}")
        _scan_payload(m.payload, where, max_len, violations)
    return violations
