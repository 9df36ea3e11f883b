"""Off-policy evaluation of lab-ordering policies on logged trajectories.

Value estimates use per-step weighted importance sampling (PS-WIS). The
cumulative ratio for the reward at step ``t`` includes the action taken at
``t`` itself, ratios are clipped, and the weights are normalized across
trajectories at each step. Trajectories that have already ended are padded
with zero reward and a frozen ratio, so every step is normalized over the same
set of trajectories.
"""

from dataclasses import dataclass, field
import csv
import io
import json
import logging
from typing import Optional

import numpy as np

from .mdp import N_LABS, all_actions, action_ids
from .trees import FittedEnsemble, TreeEnsembleParams, fit_classifier, predict_proba

logger = logging.getLogger(__name__)

DEFAULT_CLIP = 1e3
DEFAULT_SMOOTHING = 0.05


class EvaluationError(ValueError):
    pass


# policies ---------------------------------------------------------------------------------

class StochasticPolicy:
    """Distribution over the 2**L joint actions given a state."""

    tag = "policy"

    def __init__(self, n_labs: int = N_LABS):
        self.n_labs = n_labs
        self.actions = all_actions(n_labs)

    def proba(self, states) -> np.ndarray:
        raise NotImplementedError

    def action_proba(self, states, actions) -> np.ndarray:
        """Probability of each logged joint action (rows of a binary matrix)."""
        p = self.proba(states)
        return p[np.arange(len(p)), action_ids(actions)]

    def order_proba(self, states) -> np.ndarray:
        """Marginal probability of ordering each lab, shape (n, L)."""
        return self.proba(states) @ self.actions.astype(np.float64)


class BehaviourPolicy(StochasticPolicy):
    tag = "behaviour"

    def __init__(self, model: FittedEnsemble, p_min: float = 1e-3, n_labs: int = N_LABS):
        super().__init__(n_labs)
        self.model = model
        self.p_min = p_min

    def proba(self, states):
        return predict_proba(self.model, np.asarray(states, dtype=np.float64), p_min=self.p_min)


class ProductPolicy(StochasticPolicy):
    """Labs ordered independently; ``order_fn(states)`` gives P(order) per lab."""

    def __init__(self, order_fn, tag: str, n_labs: int = N_LABS):
        super().__init__(n_labs)
        self._order_fn = order_fn
        self.tag = tag

    def order_proba(self, states):
        return np.asarray(self._order_fn(np.asarray(states, dtype=np.float64)), dtype=np.float64)

    def proba(self, states):
        q = self.order_proba(states)
        a = self.actions.astype(np.float64)
        # (n, 1, L) against (1, A, L)
        per_lab = np.where(a[None] == 1, q[:, None, :], 1.0 - q[:, None, :])
        return per_lab.prod(axis=-1)


def fit_behaviour_policy(transitions, params: TreeEnsembleParams = TreeEnsembleParams(),
                         p_min: float = 1e-3, n_jobs: int = 1) -> BehaviourPolicy:
    """Clinician policy estimate: a 16-class tree classifier on logged (state, action) pairs."""
    if len(transitions.states) == 0:
        raise EvaluationError("cannot fit a behaviour policy on an empty dataset")
    n_labs = transitions.actions.shape[1]
    model = fit_classifier(transitions.states, action_ids(transitions.actions), params,
                           n_classes=2 ** n_labs, n_jobs=n_jobs)
    return BehaviourPolicy(model, p_min, n_labs)


def make_random_policy(p: float, n_labs: int = N_LABS) -> ProductPolicy:
    if not 0.0 < p < 1.0:
        raise EvaluationError(f"order probability must lie in (0, 1), got {p}")
    return ProductPolicy(lambda s: np.full((len(s), n_labs), p), f"random({p:.4g})", n_labs)


def soften(decisions, smoothing: float = DEFAULT_SMOOTHING) -> np.ndarray:
    """Per-lab order probabilities: the recommended bit keeps ``1 - smoothing``."""
    if not 0.0 < smoothing < 0.5:
        raise EvaluationError("smoothing must lie in (0, 0.5)")
    d = np.asarray(decisions, dtype=np.float64)
    return d * (1.0 - smoothing) + (1.0 - d) * smoothing


def as_stochastic(policy, smoothing: float = DEFAULT_SMOOTHING, tag: str = "mo_fqi") -> ProductPolicy:
    """Soften a deterministic :class:`~labpolicy.fqi.PolicySet` for importance weighting."""
    soften(np.zeros(1), smoothing)  # argument check
    return ProductPolicy(lambda s: soften(policy.recommend(s), smoothing), tag, policy.n_labs)


def empirical_order_rate(actions) -> np.ndarray:
    """Per-lab fraction of hours with an order."""
    return np.asarray(actions, dtype=np.float64).mean(axis=0)


# PS-WIS -------------------------------------------------------------------------------------

@dataclass
class ValueEstimate:
    values: np.ndarray
    ess: np.ndarray
    n_trajectories: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"values": [float(v) for v in self.values], "n_trajectories": self.n_trajectories,
                "ess_min": float(self.ess.min()) if self.ess.size else None,
                "ess_mean": float(self.ess.mean()) if self.ess.size else None,
                "diagnostics": self.diagnostics}


def _segments(trajectories, n_rows):
    if trajectories is None:
        return [slice(0, n_rows)]
    out = []
    for tr in trajectories:
        if isinstance(tr, slice):
            out.append(tr)
        else:
            lo, hi = tr
            out.append(slice(int(lo), int(hi)))
    return out


def cumulative_ratios(pe, pb, trajectories=None, clip: float = DEFAULT_CLIP):
    """Clipped cumulative ratios, shape (n_trajectories, T), padded past each end.

    Returns ``(rho, lengths, n_clipped)``.
    """
    pe = np.asarray(pe, dtype=np.float64)
    pb = np.asarray(pb, dtype=np.float64)
    if np.any(pb <= 0):
        raise EvaluationError("behaviour probabilities must be positive")
    if np.any(pe < 0):
        raise EvaluationError("target probabilities must be non-negative")
    if not clip > 0:
        raise EvaluationError("clip must be positive")
    segs = _segments(trajectories, len(pe))
    if not segs:
        raise EvaluationError("no trajectories")
    lengths = np.array([s.stop - s.start for s in segs])
    T = int(lengths.max())
    rho = np.empty((len(segs), T))
    n_clipped = 0
    with np.errstate(divide="ignore"):
        for i, s in enumerate(segs):
            L = lengths[i]
            log_r = np.cumsum(np.log(pe[s]) - np.log(pb[s]))
            n_clipped += int(np.sum(log_r > np.log(clip)))
            r = np.exp(np.minimum(log_r, np.log(clip)))
            rho[i, :L] = r
            rho[i, L:] = r[-1] if L else 1.0
    return rho, lengths, n_clipped


def step_weights(rho) -> np.ndarray:
    """Normalize ratios across trajectories at each step; all-zero steps get zero weight."""
    total = rho.sum(axis=0)
    zero = total <= 0
    return np.where(zero[None, :], 0.0, rho / np.where(zero, 1.0, total)[None, :])


def ps_wis_from_probs(pe, pb, rewards, trajectories=None, gamma: float = 1.0,
                      clip: float = DEFAULT_CLIP) -> ValueEstimate:
    """PS-WIS from per-row action probabilities.

    Parameters
    ----------
    pe, pb : array (n,)
        Target and behaviour probabilities of the logged action in each row.
    rewards : array (n,) or (n, d)
    trajectories : sequence of slices (or (start, stop) pairs) into the rows,
        each covering one trajectory in time order. ``None`` means one trajectory.
    """
    R = np.asarray(rewards, dtype=np.float64)
    if R.ndim == 1:
        R = R[:, None]
    segs = _segments(trajectories, len(R))
    rho, lengths, n_clipped = cumulative_ratios(pe, pb, segs, clip)
    n, T = rho.shape
    rew = np.zeros((n, T, R.shape[1]))
    for i, s in enumerate(segs):
        rew[i, :lengths[i]] = R[s]
    w = step_weights(rho)
    total = rho.sum(axis=0)
    zero = total <= 0
    disc = gamma ** np.arange(T)
    values = np.einsum("it,itd->d", w * disc[None, :], rew)
    sq = (rho ** 2).sum(axis=0)
    ess = np.where(zero, 0.0, total ** 2 / np.where(sq > 0, sq, 1.0))
    diag = {"n_steps": int(T), "zero_weight_steps": int(zero.sum()), "clipped_ratios": n_clipped,
            "clip": float(clip), "gamma": float(gamma)}
    if zero.any():
        logger.warning("%d time steps have zero total weight", int(zero.sum()))
    return ValueEstimate(values, ess, n, diag)


def ps_wis(transitions, pi_e: StochasticPolicy, pi_b: StochasticPolicy, gamma: float = 1.0,
           clip: float = DEFAULT_CLIP, rewards=None) -> ValueEstimate:
    """PS-WIS value of ``pi_e`` on a :class:`~labpolicy.mdp.TransitionSet` logged under ``pi_b``."""
    pe = pi_e.action_proba(transitions.states, transitions.actions)
    pb = pi_b.action_proba(transitions.states, transitions.actions)
    R = transitions.rewards if rewards is None else rewards
    return ps_wis_from_probs(pe, pb, R, transitions.trajectory_slices(), gamma, clip)


def lab_action_proba(order_p, actions):
    """Probability of each logged per-lab bit given P(order), shape (n, L)."""
    a = np.asarray(actions)
    return np.where(a == 1, order_p, 1.0 - order_p)


def ps_wis_per_lab(transitions, pe_order, pb_order, gamma: float = 1.0, clip: float = DEFAULT_CLIP):
    """One PS-WIS estimate per lab on that lab's own action bit and reward vector.

    ``pe_order`` and ``pb_order`` are (n, L) order probabilities on the logged rows.
    """
    pe = lab_action_proba(pe_order, transitions.actions)
    pb = lab_action_proba(pb_order, transitions.actions)
    slices = transitions.trajectory_slices()
    return [ps_wis_from_probs(pe[:, l], pb[:, l], transitions.lab_rewards[:, l, :], slices, gamma, clip)
            for l in range(transitions.actions.shape[1])]


def random_trial_order_proba(n_rows: int, p: float, seed, n_labs: int = N_LABS,
                             smoothing: float = DEFAULT_SMOOTHING) -> np.ndarray:
    """One random-policy trial: sampled order decisions, softened like the learned policy."""
    if not 0.0 < p < 1.0:
        raise EvaluationError(f"order probability must lie in (0, 1), got {p}")
    rng = np.random.default_rng(seed)
    return soften(rng.random((n_rows, n_labs)) < p, smoothing)


# clinical metrics ------------------------------------------------------------------------

def onset_filter(recommended, clinician) -> np.ndarray:
    """Keep a recommendation only if it is the first, or a clinician order falls
    at or after the previous recommendation and before this one."""
    rec = np.flatnonzero(np.asarray(recommended).astype(bool))
    clin = np.flatnonzero(np.asarray(clinician).astype(bool))
    keep = np.zeros(len(np.asarray(recommended)), dtype=bool)
    prev = None
    for t in rec:
        if prev is None:
            keep[t] = True
        else:
            j = np.searchsorted(clin, prev, side="left")
            if j < len(clin) and clin[j] < t:
                keep[t] = True
        prev = t
    return keep


def metric_order_reduction(clinician_series, recommended_series, labs=None) -> dict:
    """Per-lab clinician vs onset-filtered recommended counts and reduction percentage.

    Both arguments are sequences of aligned (hours, L) binary matrices, one per admission.
    """
    out = {}
    clinician_series = list(clinician_series)
    recommended_series = list(recommended_series)
    if len(clinician_series) != len(recommended_series):
        raise EvaluationError("clinician and recommended series must be aligned")
    L = clinician_series[0].shape[1] if clinician_series else N_LABS
    labs = labs or [str(i) for i in range(L)]
    for l, name in enumerate(labs):
        n_clin = n_rec = n_kept = 0
        for c, r in zip(clinician_series, recommended_series):
            c = np.asarray(c)[:, l]
            r = np.asarray(r)[:, l]
            if c.shape != r.shape:
                raise EvaluationError("series length mismatch")
            n_clin += int(c.sum())
            n_rec += int(r.sum())
            n_kept += int(onset_filter(r, c).sum())
        pct = None if n_clin == 0 else 100.0 * (1.0 - n_kept / n_clin)
        out[name] = {"clinician": n_clin, "recommended": n_rec, "recommended_filtered": n_kept,
                     "reduction_percent": pct}
    return out


def information_gain(orders, smoothed_means, filtered_means, sigma) -> np.ndarray:
    """|smoothed - filtered| / sigma at every hour with an order (one lab)."""
    idx = np.flatnonzero(np.asarray(orders).astype(bool))
    sm = np.asarray(smoothed_means)[idx]
    fm = np.asarray(filtered_means)[idx]
    return np.abs(sm - fm) / np.asarray(sigma)[idx]


def metric_info_gain(order_series, forecasts, labs=None) -> dict:
    """Gains per lab pooled over admissions.

    ``forecasts`` aligns with ``order_series``; each entry is a dict with
    (hours, L) arrays ``smoothed``, ``filtered`` and ``sigma`` (or ``None`` if missing).
    """
    order_series = list(order_series)
    forecasts = list(forecasts)
    L = order_series[0].shape[1] if order_series else N_LABS
    labs = labs or [str(i) for i in range(L)]
    gains = {name: [] for name in labs}
    skipped = 0
    for orders, fc in zip(order_series, forecasts):
        if fc is None:
            skipped += int(np.asarray(orders).sum())
            continue
        n = len(orders)
        for l, name in enumerate(labs):
            gains[name].append(information_gain(orders[:, l], fc["smoothed"][:n, l],
                                                fc["filtered"][:n, l], fc["sigma"][:n, l]))
    out = {}
    for name in labs:
        g = np.concatenate(gains[name]) if gains[name] else np.empty(0)
        out[name] = {"gains": g, "mean": float(g.mean()) if g.size else None, "n": int(g.size)}
    out["_skipped"] = skipped
    return out


def time_to_treatment(orders, onsets, window: float = 48.0):
    """Interval from the earliest order in ``[onset - window, onset]`` to each onset.

    Returns ``(intervals, n_excluded)``; onsets with no qualifying order are excluded.
    """
    if window <= 0:
        raise EvaluationError("window must be positive")
    t_orders = np.sort(np.asarray(orders, dtype=np.float64))
    out = []
    excluded = 0
    for onset in np.asarray(onsets, dtype=np.float64):
        j = np.searchsorted(t_orders, onset - window, side="left")
        if j < len(t_orders) and t_orders[j] <= onset:
            out.append(onset - t_orders[j])
        else:
            excluded += 1
    return np.array(out), excluded


def metric_time_to_treatment(order_series, onset_series, window: float = 48.0, labs=None) -> dict:
    """Per-lab intervals pooled over admissions; ``onset_series`` holds onset hour indices."""
    order_series = list(order_series)
    L = order_series[0].shape[1] if order_series else N_LABS
    labs = labs or [str(i) for i in range(L)]
    out = {}
    for l, name in enumerate(labs):
        parts, excl = [], 0
        for orders, onsets in zip(order_series, onset_series):
            iv, e = time_to_treatment(np.flatnonzero(np.asarray(orders)[:, l]), onsets, window)
            parts.append(iv)
            excl += e
        iv = np.concatenate(parts) if parts else np.empty(0)
        out[name] = {"intervals": iv, "mean": float(iv.mean()) if iv.size else None,
                     "n": int(iv.size), "excluded": excl}
    return out


# outputs -----------------------------------------------------------------------------------

def distributions_csv(rows, header, path_or_buf=None):
    """Write ``rows`` of (policy, lab, value...) tuples with ``repr`` floats."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    text = buf.getvalue()
    if path_or_buf is None:
        return text
    with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return None


def dump_json(obj, path=None) -> Optional[str]:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        return text
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return None
