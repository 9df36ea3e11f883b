"""Hourly MDP construction: states, lab-order actions and vector rewards.

State layout (21 features)::

    0        SOFA score from filtered means
    1..4     vital means            HR, RR, Temp, MeanBP
    5..8     lab means              Creatinine, BUN, WBC, Lactate
    9..12    lab predictive stds
    13..16   last measured lab values
    17..20   hours since each lab was last ordered (capped)

The action at hour ``t`` is the set of labs the clinician ordered in
``(t, t+1]``. Reward components, in order: SOFA jump, treatment onset,
information, negated cost. Transition ``t`` pairs the state at ``t`` with the
state at ``t + 1``; its SOFA and treatment terms look at that next hour.
"""

from dataclasses import dataclass, field, asdict
import csv
import io
import json
import math
from typing import Optional

import numpy as np

from . import binio
from .cohort import INTERVENTIONS, LABS, VITALS
from .forecast import FILTERING, SMOOTHING, KernelParams, TraitSeries, fit_kernel, locf, predict
from .sofa import DEFAULT_TABLE, SofaTable, sofa_array

N_LABS = len(LABS)
REWARD_COMPONENTS = ("sofa", "treat", "info", "cost")
STATE_FEATURES = (
    ("sofa",)
    + tuple(f"mean_{v}" for v in VITALS)
    + tuple(f"mean_{lab}" for lab in LABS)
    + tuple(f"std_{lab}" for lab in LABS)
    + tuple(f"last_{lab}" for lab in LABS)
    + tuple(f"elapsed_{lab}" for lab in LABS)
)
N_STATE = len(STATE_FEATURES)
SOFA_IDX = 0
LAB_MEAN = slice(5, 9)
LAB_STD = slice(9, 13)
LAB_LAST = slice(13, 17)
LAB_ELAPSED = slice(17, 21)

GP_TRAITS = VITALS + LABS + ("Bilirubin", "Platelet", "PaO2FiO2")

MAGIC = b"LTRN"
FORMAT_VERSION = 1


class BuildError(ValueError):
    pass


class ThresholdError(ValueError):
    pass


def all_actions(n_labs: int = N_LABS) -> np.ndarray:
    """Every binary action vector; row ``i`` has bit ``l`` of ``i`` in column ``l``."""
    ids = np.arange(2 ** n_labs)
    return ((ids[:, None] >> np.arange(n_labs)) & 1).astype(np.int8)


def action_ids(actions) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    return (actions << np.arange(actions.shape[-1])).sum(axis=-1)


# reward terms -------------------------------------------------------------

def reward_sofa(a, sofa_t, sofa_prev) -> int:
    """1 when any lab is ordered and SOFA rose by at least 2."""
    return int(np.any(np.asarray(a) != 0) and (sofa_t - sofa_prev) >= 2)


def reward_treat(a, interventions_next) -> int:
    """Number of distinct intervention categories starting in the next hour, if any lab is ordered."""
    cats = set(interventions_next)
    unknown = cats - set(INTERVENTIONS)
    if unknown:
        raise ValueError(f"unknown intervention categories {sorted(unknown)}")
    return len(cats) if np.any(np.asarray(a) != 0) else 0


def info_deviation(m, y, sigma, sigma_floor=1e-9):
    return np.abs(np.asarray(m, dtype=float) - np.asarray(y, dtype=float)) / np.maximum(sigma, sigma_floor)


def reward_info(a, m, y, sigma, c, sigma_floor=1e-9) -> float:
    a = np.asarray(a)
    g = info_deviation(m, y, sigma, sigma_floor)
    return float(np.sum(np.where(a == 1, np.maximum(0.0, g - np.asarray(c, dtype=float)), 0.0)))


def reward_cost(a, elapsed, decay=6.0) -> float:
    """Order penalty ``sum_l a_l exp(-elapsed_l / decay_l)`` (positive; negated in reward vectors)."""
    a = np.asarray(a)
    return float(np.sum(np.where(a == 1, np.exp(-np.asarray(elapsed, dtype=float) / np.asarray(decay, dtype=float)), 0.0)))


def threshold_from_training(deviations_per_lab, labs=LABS) -> np.ndarray:
    """Per-lab median information deviation at actual order times."""
    out = []
    for lab, g in zip(labs, deviations_per_lab):
        g = np.asarray(g, dtype=float)
        if g.size == 0:
            raise ThresholdError(f"lab {lab} is never ordered in the training data")
        out.append(float(np.median(g)))
    return np.array(out)


# configuration --------------------------------------------------------------

@dataclass
class MdpConfig:
    decay_hours: tuple = (6.0, 6.0, 6.0, 6.0)
    delta_cap_hours: float = 48.0
    sigma_floor_fraction: float = 0.05
    info_thresholds: Optional[tuple] = None
    sofa_table: SofaTable = field(default_factory=lambda: DEFAULT_TABLE)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_hours"] = list(self.decay_hours)
        d["info_thresholds"] = None if self.info_thresholds is None else list(self.info_thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MdpConfig":
        d = dict(d)
        table = d.pop("sofa_table", None)
        if table is not None:
            d["sofa_table"] = SofaTable(**{k: tuple(v) if isinstance(v, list) else v for k, v in table.items()})
        if d.get("decay_hours") is not None:
            d["decay_hours"] = tuple(d["decay_hours"])
        if d.get("info_thresholds") is not None:
            d["info_thresholds"] = tuple(d["info_thresholds"])
        return cls(**d)


# forecasts for one admission -----------------------------------------------

@dataclass
class AdmissionForecast:
    admission_id: str
    grid: np.ndarray
    filtered: dict
    smoothed: dict
    gcs: np.ndarray
    dopamine: np.ndarray
    lab_cohort_sd: np.ndarray


def forecast_admission(admission, kernels: dict, smoothing: bool = False) -> AdmissionForecast:
    """Filtered forecasts for every GP trait (plus smoothed labs if requested) on hours 0..LOS-1."""
    grid = np.arange(admission.length_of_stay, dtype=np.float64)
    filtered, smoothed = {}, {}
    for trait in GP_TRAITS:
        if trait not in kernels:
            raise BuildError(f"no kernel for trait {trait}")
        s = TraitSeries(trait, *admission.series(trait))
        filtered[trait] = predict(s, kernels[trait], grid, FILTERING)
        if smoothing and trait in LABS:
            smoothed[trait] = predict(s, kernels[trait], grid, SMOOTHING)
    gcs = locf(TraitSeries("GCS", *admission.series("GCS")), grid, default=15.0).means
    dop = locf(TraitSeries("Dopamine", *admission.series("Dopamine")), grid, default=0.0).means
    sd = np.array([kernels[lab].cohort_sd for lab in LABS])
    return AdmissionForecast(admission.admission_id, grid, filtered, smoothed, gcs, dop, sd)


# transitions ------------------------------------------------------------------

@dataclass
class TransitionSet:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    lab_rewards: np.ndarray
    admission_ids: np.ndarray
    times: np.ndarray
    done: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    @property
    def joint_actions(self) -> np.ndarray:
        return action_ids(self.actions)

    def subset(self, index) -> "TransitionSet":
        return TransitionSet(self.states[index], self.actions[index], self.next_states[index],
                             self.rewards[index], self.lab_rewards[index], self.admission_ids[index],
                             self.times[index], self.done[index], dict(self.meta))

    @classmethod
    def concat(cls, parts, meta=None) -> "TransitionSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(meta)
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return cls(cat("states"), cat("actions"), cat("next_states"), cat("rewards"), cat("lab_rewards"),
                   cat("admission_ids"), cat("times"), cat("done"), dict(meta or parts[0].meta))

    @classmethod
    def empty(cls, meta=None) -> "TransitionSet":
        return cls(np.empty((0, N_STATE)), np.empty((0, N_LABS), dtype=np.int8), np.empty((0, N_STATE)),
                   np.empty((0, 4)), np.empty((0, N_LABS, 4)), np.empty(0, dtype=object),
                   np.empty(0, dtype=np.int64), np.empty(0, dtype=bool), dict(meta or {}))

    def trajectory_slices(self):
        """Contiguous row ranges, one per admission, in storage order."""
        if len(self) == 0:
            return []
        ids = self.admission_ids
        cuts = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        bounds = np.concatenate([[0], cuts, [len(self)]])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    # persistence -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        uniq = list(dict.fromkeys(self.admission_ids.tolist()))
        lookup = {a: i for i, a in enumerate(uniq)}
        arrays = {
            "states": self.states.astype(np.float64), "actions": self.actions.astype(np.int8),
            "next_states": self.next_states.astype(np.float64), "rewards": self.rewards.astype(np.float64),
            "lab_rewards": self.lab_rewards.astype(np.float64),
            "admission_index": np.array([lookup[a] for a in self.admission_ids.tolist()], dtype=np.int64),
            "times": self.times.astype(np.int64), "done": self.done.astype(np.bool_),
        }
        return binio.dumps(MAGIC, FORMAT_VERSION, {"admissions": uniq, "meta": self.meta}, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TransitionSet":
        _, meta, a = binio.loads(data, MAGIC, FORMAT_VERSION)
        ids = np.array(meta["admissions"], dtype=object)[a["admission_index"]] if len(a["admission_index"]) \
            else np.empty(0, dtype=object)
        return cls(a["states"], a["actions"], a["next_states"], a["rewards"], a["lab_rewards"],
                   ids, a["times"], a["done"], meta["meta"])

    def schema(self) -> dict:
        return {
            "format": "labpolicy-transitions", "version": FORMAT_VERSION,
            "state_features": list(STATE_FEATURES), "labs": list(LABS),
            "reward_components": list(REWARD_COMPONENTS),
            "columns": {
                "states": ["n", N_STATE], "actions": ["n", N_LABS], "next_states": ["n", N_STATE],
                "rewards": ["n", 4], "lab_rewards": ["n", N_LABS, 4], "admission_index": ["n"],
                "times": ["n"], "done": ["n"],
            },
            "n_transitions": len(self),
            "config_hash": self.meta.get("config_hash"),
        }

    def save(self, path):
        path = str(path)
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())
        with open(path + ".schema.json", "w", encoding="utf-8") as fh:
            json.dump(self.schema(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TransitionSet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path_or_buf=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["admission_id", "time"] + [f"s_{f}" for f in STATE_FEATURES]
                   + [f"a_{lab}" for lab in LABS] + [f"r_{c}" for c in REWARD_COMPONENTS]
                   + [f"next_{f}" for f in STATE_FEATURES] + ["done"])
        for i in range(len(self)):
            w.writerow([self.admission_ids[i], int(self.times[i])]
                       + [repr(float(x)) for x in self.states[i]] + [int(x) for x in self.actions[i]]
                       + [repr(float(x)) for x in self.rewards[i]]
                       + [repr(float(x)) for x in self.next_states[i]] + [int(self.done[i])])
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return None


def hourly_orders(admission, n_hours: int) -> np.ndarray:
    """Binary (n_hours, L) matrix; row t flags labs ordered in (t, t+1]."""
    out = np.zeros((n_hours, N_LABS), dtype=np.int8)
    for o in admission.orders:
        t = math.ceil(o.timestamp) - 1
        if 0 <= t < n_hours:
            out[t, LABS.index(o.lab)] = 1
    return out


def intervention_onsets(admission, n_hours: int) -> np.ndarray:
    """Count of distinct categories starting in (t, t+1] for each hour t."""
    started = np.zeros((n_hours, len(INTERVENTIONS)), dtype=bool)
    for iv in admission.interventions:
        t = math.ceil(iv.onset) - 1
        if 0 <= t < n_hours:
            started[t, INTERVENTIONS.index(iv.category)] = True
    return started.sum(axis=1)


def admission_states(admission, fc: AdmissionForecast, config: MdpConfig):
    """Hourly state matrix (LOS, 21) and the normalizers used for the information term."""
    T = admission.length_of_stay
    if len(fc.grid) != T:
        raise BuildError(f"{admission.admission_id}: forecast grid covers {len(fc.grid)} hours, need {T}")
    S = np.zeros((T, N_STATE))
    f = fc.filtered
    for trait in GP_TRAITS:
        if trait not in f:
            raise BuildError(f"{admission.admission_id}: missing forecast for {trait}")
    S[:, SOFA_IDX] = sofa_array(f["MeanBP"].means, f["Bilirubin"].means, f["Platelet"].means,
                                f["Creatinine"].means, f["PaO2FiO2"].means,
                                np.clip(fc.gcs, 3, 15), fc.dopamine > 0.5, config.sofa_table)
    for i, v in enumerate(VITALS):
        S[:, 1 + i] = f[v].means
    grid = fc.grid
    for i, lab in enumerate(LABS):
        S[:, LAB_MEAN.start + i] = f[lab].means
        S[:, LAB_STD.start + i] = f[lab].stds
        times, values = admission.series(lab)
        pos = np.searchsorted(times, grid, side="right") - 1
        last = np.where(pos >= 0, values[np.clip(pos, 0, None)] if len(values) else 0.0,
                        f[lab].means[0])
        S[:, LAB_LAST.start + i] = last
        ot = admission.order_times(lab)
        opos = np.searchsorted(ot, grid, side="right") - 1
        elapsed = np.where(opos >= 0, grid - ot[np.clip(opos, 0, None)] if len(ot) else 0.0,
                           config.delta_cap_hours)
        S[:, LAB_ELAPSED.start + i] = np.minimum(elapsed, config.delta_cap_hours)
    sigma = np.maximum(S[:, LAB_STD], config.sigma_floor_fraction * fc.lab_cohort_sd)
    return S, sigma


def order_deviations(admission, fc: AdmissionForecast, config: MdpConfig):
    """Information deviations g at the hours where each lab was actually ordered."""
    S, sigma = admission_states(admission, fc, config)
    g = info_deviation(S[:, LAB_MEAN], S[:, LAB_LAST], sigma)
    A = hourly_orders(admission, admission.length_of_stay - 1)
    return [g[:-1][A[:, i] == 1, i] for i in range(N_LABS)]


def build_transitions(admission, fc: AdmissionForecast, config: MdpConfig) -> TransitionSet:
    """One transition per hour ``t = 0 .. LOS-2``; the last one is flagged ``done``."""
    if config.info_thresholds is None:
        raise BuildError("info_thresholds not set; derive them with threshold_from_training first")
    S, sigma = admission_states(admission, fc, config)
    n = admission.length_of_stay - 1
    A = hourly_orders(admission, n)
    any_order = A.any(axis=1)
    s, s_next = S[:-1], S[1:]

    sofa_jump = (s_next[:, SOFA_IDX] - s[:, SOFA_IDX]) >= 2
    treat = intervention_onsets(admission, n).astype(float)
    g = info_deviation(s[:, LAB_MEAN], s[:, LAB_LAST], sigma[:-1])
    info_l = np.maximum(0.0, g - np.asarray(config.info_thresholds)) * A
    cost_l = np.exp(-s[:, LAB_ELAPSED] / np.asarray(config.decay_hours)) * A

    lab_r = np.zeros((n, N_LABS, 4))
    lab_r[:, :, 0] = A * sofa_jump[:, None]
    lab_r[:, :, 1] = A * treat[:, None]
    lab_r[:, :, 2] = info_l
    lab_r[:, :, 3] = -cost_l
    R = np.column_stack([any_order & sofa_jump, any_order * treat, info_l.sum(axis=1), -cost_l.sum(axis=1)])
    R = R.astype(np.float64)

    done = np.zeros(n, dtype=bool)
    if n:
        done[-1] = True
    return TransitionSet(s.copy(), A, s_next.copy(), R, lab_r,
                         np.array([admission.admission_id] * n, dtype=object),
                         np.arange(n, dtype=np.int64), done)


def fit_trait_kernels(admissions, traits=GP_TRAITS, max_series: Optional[int] = 200) -> dict:
    """Shared per-trait kernel hyperparameters from (a prefix of) the training admissions."""
    use = sorted(admissions, key=lambda a: a.admission_id)
    if max_series is not None:
        use = use[:max_series]
    return {t: fit_kernel([TraitSeries(t, *a.series(t)) for a in use], trait_id=t) for t in traits}


def kernels_to_dict(kernels: dict) -> dict:
    return {k: v.to_dict() for k, v in sorted(kernels.items())}


def kernels_from_dict(d: dict) -> dict:
    return {k: KernelParams.from_dict(v) for k, v in d.items()}
