"""End-to-end stages shared by the command line and the acceptance tests.

Every artifact records a config hash covering its own settings and the hash of
the artifacts it was built from, so a policy can be checked against the
transition files it is evaluated on.
"""

from dataclasses import asdict, dataclass, field, replace
import hashlib
import logging
import math
from typing import Optional

import numpy as np

from . import binio
from .cohort import LABS, CohortConfig, ConfigError, split_cohort
from .fqi import (FqiConfig, PolicySet, apply_budget, collapse_policy, train_mo_fqi,
                  tune_epsilon_cost)
from .mdp import (REWARD_COMPONENTS, LAB_MEAN, MdpConfig, TransitionSet, admission_states,
                  build_transitions, fit_trait_kernels, forecast_admission, order_deviations, threshold_from_training)
from .ope import (empirical_order_rate, fit_behaviour_policy, metric_info_gain,
                  metric_order_reduction, metric_time_to_treatment, ps_wis_per_lab, soften)
from .trees import TreeEnsembleParams

logger = logging.getLogger(__name__)


@dataclass
class PolicyConfig:
    trees: TreeEnsembleParams = field(default_factory=TreeEnsembleParams)
    budget_period: int = 24
    tune_epsilon: bool = True
    epsilon_tolerance: float = 0.05
    epsilon_max_iter: int = 30


@dataclass
class EvalConfig:
    behaviour_trees: TreeEnsembleParams = field(default_factory=TreeEnsembleParams)
    p_min: float = 1e-3
    smoothing: float = 0.05
    clip: float = 1e3
    gamma: float = 1.0
    random_trials: int = 10
    random_p: tuple = (0.01, "emp", 0.5)
    window_hours: float = 48.0


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    train_fraction: float = 0.6
    kernel_max_series: int = 200
    cohort: CohortConfig = field(default_factory=CohortConfig)
    mdp: MdpConfig = field(default_factory=MdpConfig)
    fqi: FqiConfig = field(default_factory=FqiConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.propagate_seed()

    def propagate_seed(self):
        """Push the run seed into every stage so one number controls the whole run."""
        s = int(self.seed)
        self.cohort = replace(self.cohort, seed=s)
        self.fqi = replace(self.fqi, seed=s)
        self.policy = replace(self.policy, trees=replace(self.policy.trees, seed=s))
        self.eval = replace(self.eval, behaviour_trees=replace(self.eval.behaviour_trees, seed=s))
        return self

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "threads": self.threads, "train_fraction": self.train_fraction,
            "kernel_max_series": self.kernel_max_series,
            "cohort": self.cohort.to_dict(), "mdp": self.mdp.to_dict(), "fqi": self.fqi.to_dict(),
            "policy": asdict(self.policy),
            "eval": {**asdict(self.eval), "random_p": list(self.eval.random_p)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {"seed", "threads", "train_fraction", "kernel_max_series", "cohort", "mdp", "fqi",
                 "policy", "eval"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            kw = {k: d[k] for k in ("seed", "threads", "train_fraction", "kernel_max_series") if k in d}
            if "cohort" in d:
                kw["cohort"] = CohortConfig.from_dict({**d["cohort"], "seed": d.get("seed", 0)})
            if "mdp" in d:
                kw["mdp"] = MdpConfig.from_dict(d["mdp"])
            if "fqi" in d:
                kw["fqi"] = FqiConfig.from_dict(d["fqi"])
            if "policy" in d:
                p = dict(d["policy"])
                if isinstance(p.get("trees"), dict):
                    p["trees"] = TreeEnsembleParams(**p["trees"])
                kw["policy"] = PolicyConfig(**p)
            if "eval" in d:
                e = dict(d["eval"])
                if isinstance(e.get("behaviour_trees"), dict):
                    e["behaviour_trees"] = TreeEnsembleParams(**e["behaviour_trees"])
                if "random_p" in e:
                    e["random_p"] = tuple(e["random_p"])
                kw["eval"] = EvalConfig(**e)
            cfg = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.policy.budget_period <= 0:
            raise ConfigError("budget_period must be positive")
        if not 0.0 < self.eval.smoothing < 0.5:
            raise ConfigError("eval.smoothing must lie in (0, 0.5)")
        for p in self.eval.random_p:
            if p != "emp" and not 0.0 < float(p) < 1.0:
                raise ConfigError(f"random order probability {p} outside (0, 1)")
        self.cohort.validate()
        return self


def bytes_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


# forecasting and transitions --------------------------------------------------------------

@dataclass
class ForecastArtifacts:
    train_ids: list
    test_ids: list
    kernels: dict
    config_hash: str


def stage_kernels(admissions, cfg: RunConfig, events_hash: str) -> ForecastArtifacts:
    train, test = split_cohort(admissions, cfg.train_fraction, cfg.seed)
    kernels = fit_trait_kernels(train, max_series=cfg.kernel_max_series)
    h = binio.config_hash({"events": events_hash, "train_fraction": cfg.train_fraction, "seed": cfg.seed,
                           "kernel_max_series": cfg.kernel_max_series})
    return ForecastArtifacts([a.admission_id for a in train], [a.admission_id for a in test], kernels, h)


@dataclass
class TransitionArtifacts:
    train: TransitionSet
    test: TransitionSet
    thresholds: np.ndarray
    config_hash: str


def stage_transitions(admissions, fa: ForecastArtifacts, cfg: RunConfig) -> TransitionArtifacts:
    by_id = {a.admission_id: a for a in admissions}
    train = [by_id[i] for i in fa.train_ids]
    test = [by_id[i] for i in fa.test_ids]
    fc_train = [forecast_admission(a, fa.kernels) for a in train]
    devs = [[] for _ in LABS]
    for a, fc in zip(train, fc_train):
        for l, g in enumerate(order_deviations(a, fc, cfg.mdp)):
            devs[l].append(g)
    thresholds = threshold_from_training([np.concatenate(g) for g in devs])
    mdp_cfg = replace(cfg.mdp, info_thresholds=tuple(float(c) for c in thresholds))
    h = binio.config_hash({"kernels": fa.config_hash, "mdp": mdp_cfg.to_dict()})
    meta = {"config_hash": h, "info_thresholds": list(mdp_cfg.info_thresholds), "mdp": mdp_cfg.to_dict()}
    tr = TransitionSet.concat([build_transitions(a, fc, mdp_cfg) for a, fc in zip(train, fc_train)], meta)
    te = TransitionSet.concat([build_transitions(a, forecast_admission(a, fa.kernels), mdp_cfg) for a in test],
                              meta)
    tr.meta = dict(meta, split="train")
    te.meta = dict(meta, split="test")
    return TransitionArtifacts(tr, te, thresholds, h)


# training ------------------------------------------------------------------------------------

@dataclass
class TrainArtifacts:
    q: object
    policy: PolicySet
    history: list
    epsilon: np.ndarray
    tuning: Optional[dict]
    config_hash: str


def train_hash(transitions_hash: str, cfg: RunConfig) -> str:
    return binio.config_hash({"transitions": transitions_hash, "fqi": cfg.fqi.to_dict(),
                              "policy": asdict(cfg.policy)})


def stage_train(train: TransitionSet, cfg: RunConfig, callback=None) -> TrainArtifacts:
    fqi_res = train_mo_fqi(train, cfg.fqi, callback=callback, n_jobs=cfg.threads)
    q = fqi_res.q
    base = np.asarray(cfg.fqi.epsilon, dtype=np.float64)
    eps = np.tile(base, (len(LABS), 1))
    tuning = None
    if cfg.policy.tune_epsilon:
        targets = train.actions.sum(axis=0).astype(np.float64)
        res = tune_epsilon_cost(q, train.states, np.maximum(targets, 1.0), base,
                                tolerance=cfg.policy.epsilon_tolerance, max_iter=cfg.policy.epsilon_max_iter)
        eps[:, 3] = res.epsilon_cost
        tuning = {"epsilon_cost": res.epsilon_cost.tolist(), "label_counts": res.counts.tolist(),
                  "targets": res.targets.tolist(), "eps_max": res.eps_max.tolist(),
                  "reached": res.reached.tolist()}
    h = train_hash(train.meta.get("config_hash", ""), cfg)
    policy = collapse_policy(q, train.states, eps, cfg.policy.trees, cfg.policy.budget_period, n_jobs=cfg.threads)
    policy.meta.update({"config_hash": h, "transitions_hash": train.meta.get("config_hash")})
    return TrainArtifacts(q, policy, fqi_res.history, eps, tuning, h)


# evaluation -----------------------------------------------------------------------------------

def _per_admission(ts: TransitionSet):
    return [(str(ts.admission_ids[s.start]), s) for s in ts.trajectory_slices()]


def policy_orders(policy: PolicySet, ts: TransitionSet):
    """Recommended (+ budget) order matrices per admission, and the inserted flags."""
    rec = policy.recommend(ts.states)
    out, inserted = [], []
    for _, s in _per_admission(ts):
        aug, ins = apply_budget(rec[s], policy.budget_period, observed=ts.actions[s])
        out.append(aug.astype(np.int8))
        inserted.append(ins)
    return out, inserted


def _lab_forecasts(adm, fa_kernels, mdp_cfg):
    fc = forecast_admission(adm, fa_kernels, smoothing=True)
    S, sigma = admission_states(adm, fc, mdp_cfg)
    return {"filtered": S[:, LAB_MEAN],
            "smoothed": np.column_stack([fc.smoothed[lab].means for lab in LABS]),
            "sigma": sigma}


def _onsets(adm, n_hours):
    t = np.array([math.ceil(iv.onset) - 1 for iv in adm.interventions], dtype=np.float64)
    return np.sort(t[(t >= 0) & (t < n_hours)])


def stage_evaluate(policy: PolicySet, train: TransitionSet, test: TransitionSet, test_admissions, kernels,
                   cfg: RunConfig):
    """PS-WIS for all policies plus the three clinical metrics on the test set.

    Returns ``(summary, distributions)``; the latter maps CSV names to row lists.
    """
    ec = cfg.eval
    mdp_cfg = MdpConfig.from_dict(test.meta["mdp"]) if "mdp" in test.meta else cfg.mdp
    labs = list(LABS)
    comps = list(REWARD_COMPONENTS)

    behaviour = fit_behaviour_policy(train, ec.behaviour_trees, ec.p_min, n_jobs=cfg.threads)
    pb = behaviour.order_proba(test.states)

    orders, inserted = policy_orders(policy, test)
    rec_flat = np.concatenate(orders) if orders else np.empty((0, len(labs)))
    pe_fqi = soften(rec_flat, ec.smoothing)

    results = {}

    def record(name, ests, stds=None):
        results[name] = {}
        for l, lab in enumerate(labs):
            e = ests[l]
            row = {"values": dict(zip(comps, map(float, e.values))),
                   "ess_min": float(e.ess.min()), "ess_mean": float(e.ess.mean()),
                   "clipped_ratios": e.diagnostics["clipped_ratios"]}
            if stds is not None:
                row["std"] = dict(zip(comps, map(float, stds[l])))
            results[name][lab] = row

    record("mo_fqi", ps_wis_per_lab(test, pe_fqi, pb, ec.gamma, ec.clip))
    record("behaviour", ps_wis_per_lab(test, pb, pb, ec.gamma, ec.clip))

    p_emp = empirical_order_rate(train.actions)
    for i, p in enumerate(ec.random_p):
        pvec = np.clip(p_emp, 1e-6, 1 - 1e-6) if p == "emp" else np.full(len(labs), float(p))
        name = "random(p_emp)" if p == "emp" else f"random({float(p):g})"
        trials, first = [], None
        for k in range(ec.random_trials):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A4D, i, k]))
            pe = soften(rng.random((len(test), len(labs))) < pvec, ec.smoothing)
            ests = ps_wis_per_lab(test, pe, pb, ec.gamma, ec.clip)
            first = first or ests
            trials.append([e.values for e in ests])
        trials = np.array(trials)  # (trials, L, d)
        # ESS columns describe the first trial; values are trial means
        mean_est = first
        for l in range(len(labs)):
            mean_est[l].values = trials[:, l].mean(axis=0)
        record(name, mean_est, trials.std(axis=0))
        results[name]["_p"] = pvec.tolist()

    best = {lab: {c: max((n for n in results), key=lambda n: results[n][lab]["values"][c]) for c in comps}
            for lab in labs}

    # clinical metrics
    by_id = {a.admission_id: a for a in test_admissions}
    per = _per_admission(test)
    clinician = [test.actions[s] for _, s in per]
    reduction = metric_order_reduction(clinician, orders, labs)

    fcs = []
    onsets = []
    for aid, s in per:
        adm = by_id.get(aid)
        n = s.stop - s.start
        if adm is None:
            fcs.append(None)
            onsets.append(np.empty(0))
            continue
        fcs.append(_lab_forecasts(adm, kernels, mdp_cfg))
        onsets.append(_onsets(adm, n))
    gain = {"mo_fqi": metric_info_gain(orders, fcs, labs), "clinician": metric_info_gain(clinician, fcs, labs)}
    ttt = {"mo_fqi": metric_time_to_treatment(orders, onsets, ec.window_hours, labs),
           "clinician": metric_time_to_treatment(clinician, onsets, ec.window_hours, labs)}

    dist = {
        "info_gain.csv": [(who, lab, float(g)) for who in gain for lab in labs for g in gain[who][lab]["gains"]],
        "time_to_treatment.csv": [(who, lab, float(v)) for who in ttt for lab in labs
                                  for v in ttt[who][lab]["intervals"]],
        "ps_wis.csv": [(name, lab, c, results[name][lab]["values"][c],
                        results[name][lab].get("std", {}).get(c, 0.0), results[name][lab]["ess_min"])
                       for name in results for lab in labs for c in comps],
    }
    summary = {
        "n_test_admissions": len(per),
        "n_test_transitions": len(test),
        "budget_insertions": [int(sum(ins[:, l].sum() for ins in inserted)) for l in range(len(labs))],
        "ps_wis": results,
        "best": best,
        "order_reduction": reduction,
        "info_gain": {w: {lab: {"mean": gain[w][lab]["mean"], "n": gain[w][lab]["n"]} for lab in labs}
                      for w in gain},
        "time_to_treatment": {w: {lab: {k: ttt[w][lab][k] for k in ("mean", "n", "excluded")} for lab in labs}
                              for w in ttt},
        "settings": {"smoothing": ec.smoothing, "clip": ec.clip, "gamma": ec.gamma, "p_min": ec.p_min,
                     "random_trials": ec.random_trials, "window_hours": ec.window_hours,
                     "p_emp": p_emp.tolist()},
    }
    return summary, dist


def directional_checks(summary: dict) -> dict:
    """The desk-scale direction checks: value vs behaviour, info gain, time to treatment."""
    out = {"value": {}, "info_gain": {}, "time_to_treatment": {}}
    ps = summary["ps_wis"]
    for lab in LABS:
        fq = ps["mo_fqi"][lab]["values"]
        bh = ps["behaviour"][lab]["values"]
        wins = sum(fq[c] >= bh[c] for c in REWARD_COMPONENTS)
        out["value"][lab] = wins
        g = summary["info_gain"]
        out["info_gain"][lab] = (g["mo_fqi"][lab]["mean"], g["clinician"][lab]["mean"])
        t = summary["time_to_treatment"]
        out["time_to_treatment"][lab] = (t["mo_fqi"][lab]["mean"], t["clinician"][lab]["mean"])
    return out
