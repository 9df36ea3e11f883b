"""Synthetic ICU cohorts and the event CSV format.

Each simulated admission is driven by an hourly latent severity chain
(stable -> deteriorating -> septic). Severity is smoothed into a continuous
"illness load" that shifts every trait away from its baseline, raises the
clinician's lab-order rate, and (in the deteriorating/septic states) gives
interventions a chance to start. Trait noise is a per-patient offset plus an
Ornstein-Uhlenbeck residual, so the marginal distribution of a trait in a
stable patient matches the configured mean and SD.
"""

import csv
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
import io
import json
import logging
import math
from typing import Optional

import numpy as np

from . import binio

logger = logging.getLogger(__name__)

VITALS = ("HR", "RR", "Temp", "MeanBP")
LABS = ("Creatinine", "BUN", "WBC", "Lactate")
SOFA_TRAITS = ("Bilirubin", "Platelet", "PaO2FiO2", "GCS")
FLAG_TRAITS = ("Dopamine",)
REQUIRED_TRAITS = VITALS + LABS + SOFA_TRAITS
ALL_TRAITS = REQUIRED_TRAITS + FLAG_TRAITS
INTERVENTIONS = ("antibiotics", "vasopressors", "dialysis", "mechanical_ventilation")

MIN_LOS = 24
MAX_LOS = 480
CSV_HEADER = ("admission_id", "kind", "trait_or_category", "timestamp_hours", "value")
_TIME_DECIMALS = 4


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


class EmptyCohortError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ObservationEvent:
    trait_id: str
    timestamp: float
    value: float


@dataclass(frozen=True)
class OrderEvent:
    lab: str
    timestamp: float


@dataclass(frozen=True)
class InterventionEvent:
    category: str
    onset: float
    duration: float


@dataclass(frozen=True)
class Admission:
    admission_id: str
    length_of_stay: int
    events: tuple = ()
    orders: tuple = ()
    interventions: tuple = ()

    @cached_property
    def _series(self):
        out = {}
        for ev in self.events:
            out.setdefault(ev.trait_id, []).append((ev.timestamp, ev.value))
        return {k: (np.array([t for t, _ in v]), np.array([x for _, x in v]))
                for k, v in ((k, sorted(v)) for k, v in out.items())}

    def series(self, trait_id: str):
        """Sorted ``(times, values)`` arrays for one trait (empty if never recorded)."""
        return self._series.get(trait_id, (np.empty(0), np.empty(0)))

    def order_times(self, lab: str) -> np.ndarray:
        return np.array(sorted(o.timestamp for o in self.orders if o.lab == lab))


@dataclass
class TraitParams:
    mean: float
    sd: float
    lognormal: bool = False
    direction: float = 1.0
    severity_effect: float = 0.8
    tau_hours: float = 12.0
    lower: float = -math.inf
    upper: float = math.inf


def _default_traits():
    # Table-1 means/SDs for the eight core traits; auxiliary values are typical ICU figures.
    return {
        "RR": TraitParams(20.1, 5.7, False, 1.0, 0.8, 4.0, 4.0, 70.0),
        "HR": TraitParams(87.5, 18.2, False, 1.0, 0.8, 4.0, 20.0, 250.0),
        "MeanBP": TraitParams(77.9, 15.3, False, -1.0, 0.8, 4.0, 20.0, 200.0),
        "Temp": TraitParams(98.5, 1.4, False, 1.0, 0.8, 6.0, 88.0, 110.0),
        "Creatinine": TraitParams(1.5, 1.2, True, 1.0, 0.9, 24.0, 0.1, 25.0),
        "BUN": TraitParams(31.0, 21.1, True, 1.0, 0.9, 24.0, 1.0, 300.0),
        "WBC": TraitParams(11.6, 6.2, True, 1.0, 1.0, 18.0, 0.1, 200.0),
        "Lactate": TraitParams(2.4, 1.8, True, 1.0, 1.1, 8.0, 0.2, 30.0),
        "Bilirubin": TraitParams(1.2, 1.4, True, 1.0, 0.8, 24.0, 0.1, 50.0),
        "Platelet": TraitParams(210.0, 110.0, True, -1.0, 0.8, 24.0, 2.0, 1500.0),
        "PaO2FiO2": TraitParams(290.0, 110.0, True, -1.0, 1.0, 8.0, 30.0, 700.0),
    }


@dataclass
class CohortConfig:
    """Generative parameters for :func:`simulate_cohort`.

    Rates are per hour unless the name says otherwise. ``sepsis_hazard`` is
    the hourly probability of a stable patient starting to deteriorate; at 0
    every patient stays stable and no intervention is ever started.
    """

    n_admissions: int = 500
    seed: int = 0
    sepsis_hazard: float = 0.01
    traits: dict = field(default_factory=_default_traits)
    baseline_fraction: float = 0.5
    measurement_noise: float = 0.05
    los_median_hours: float = 110.0
    los_log_sd: float = 0.6
    vital_obs_prob: float = 0.92
    temp_obs_prob: float = 0.25
    gcs_obs_prob: float = 0.25
    pf_obs_prob: float = 0.15
    bilirubin_per_day: float = 0.8
    bmp_per_day: float = 2.2
    cbc_per_day: float = 2.4
    lactate_per_day: float = 1.0
    order_severity_boost: float = 1.5
    intervention_scale: float = 1.0

    def validate(self):
        if self.n_admissions < 1:
            raise ConfigError("n_admissions must be positive")
        if not 0.0 <= self.sepsis_hazard <= 1.0:
            raise ConfigError("sepsis_hazard must lie in [0, 1]")
        for name, tp in self.traits.items():
            if not tp.sd > 0:
                raise ConfigError(f"trait {name}: SD must be > 0")
            if tp.lognormal and not tp.mean > 0:
                raise ConfigError(f"trait {name}: lognormal trait needs a positive mean")
            if not tp.tau_hours > 0:
                raise ConfigError(f"trait {name}: tau_hours must be > 0")
        missing = set(REQUIRED_TRAITS) - set(self.traits) - {"GCS"}
        if missing:
            raise ConfigError(f"missing trait parameters: {sorted(missing)}")
        for name in ("vital_obs_prob", "temp_obs_prob", "gcs_obs_prob", "pf_obs_prob", "baseline_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("bilirubin_per_day", "bmp_per_day", "cbc_per_day", "lactate_per_day",
                     "order_severity_boost", "intervention_scale", "measurement_noise", "los_log_sd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.los_median_hours > 0:
            raise ConfigError("los_median_hours must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        traits = _default_traits()
        for name, tp in (d.pop("traits", None) or {}).items():
            base = dataclasses.asdict(traits[name]) if name in traits else {}
            try:
                traits[name] = TraitParams(**{**base, **tp})
            except TypeError as exc:
                raise ConfigError(f"trait {name}: {exc}") from None
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cohort config keys: {sorted(unknown)}")
        return cls(traits=traits, **d).validate()


# severity chain ------------------------------------------------------------

_SEVERITY_LOAD = np.array([0.0, 1.0, 2.2])
_LOAD_TIME_CONSTANT = 4.0

# hourly intervention hazards per severity state (stable, deteriorating, septic)
_INTERVENTION_HAZARD = {
    "antibiotics": (0.0, 0.02, 0.12),
    "vasopressors": (0.0, 0.0, 0.06),
    "dialysis": (0.0, 0.0, 0.015),
    "mechanical_ventilation": (0.0, 0.005, 0.03),
}
_INTERVENTION_DURATION = {  # (min, max) hours
    "antibiotics": (24.0, 96.0),
    "vasopressors": (6.0, 48.0),
    "dialysis": (3.0, 6.0),
    "mechanical_ventilation": (24.0, 120.0),
}


def _severity_path(rng, los, hazard):
    states = np.zeros(los + 1, dtype=np.int64)
    s = 0
    for k in range(1, los + 1):
        u = rng.random()
        if s == 0:
            s = 1 if u < hazard else 0
        elif s == 1:
            s = 2 if u < 0.08 else (0 if u < 0.13 else 1)
        else:
            s = 1 if u < 0.03 else 2
        states[k] = s
    return states


def _smooth_load(states):
    alpha = 1.0 - math.exp(-1.0 / _LOAD_TIME_CONSTANT)
    load = np.empty(len(states))
    e = 0.0
    for k, s in enumerate(states):
        e += alpha * (_SEVERITY_LOAD[s] - e)
        load[k] = e
    return load


def _poisson_times(rng, los, base_per_hour, load, boost):
    """Non-homogeneous Poisson arrivals on [0, los) by thinning."""
    if base_per_hour <= 0:
        return np.empty(0)
    lam_max = base_per_hour * (1.0 + boost * _SEVERITY_LOAD[-1])
    n = rng.poisson(lam_max * los)
    t = np.sort(rng.uniform(0.0, los, size=n))
    lam = base_per_hour * (1.0 + boost * np.interp(t, np.arange(len(load)), load))
    keep = rng.random(n) < lam / lam_max
    return t[keep]


def _hourly_times(rng, los, prob):
    hours = np.arange(los)
    hit = rng.random(los) < prob
    return hours[hit] + rng.random(int(hit.sum()))


def _trait_values(rng, tp: TraitParams, times, load, baseline_z, noise_frac):
    """Sample one trait at sorted ``times`` (hours)."""
    n = len(times)
    if n == 0:
        return np.empty(0)
    ou_sd = math.sqrt(1.0 - baseline_z[1])
    z = np.empty(n)
    x = rng.normal() * ou_sd
    prev = times[0]
    for i, t in enumerate(times):
        dt = t - prev
        if dt > 0:
            rho = math.exp(-dt / tp.tau_hours)
            x = rho * x + math.sqrt(1.0 - rho * rho) * ou_sd * rng.normal()
        z[i] = x
        prev = t
    z = z + baseline_z[0] + tp.direction * tp.severity_effect * np.interp(times, np.arange(len(load)), load)
    if tp.lognormal:
        s2 = math.log1p((tp.sd / tp.mean) ** 2)
        vals = np.exp(math.log(tp.mean) - 0.5 * s2 + math.sqrt(s2) * z)
    else:
        vals = tp.mean + tp.sd * z
    vals = vals + noise_frac * tp.sd * rng.normal(size=n)
    return np.clip(vals, tp.lower, tp.upper)


def _round_t(t):
    return float(round(float(t), _TIME_DECIMALS))


def _admission_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def simulate_admission(config: CohortConfig, index: int) -> Admission:
    rng = _admission_rng(config.seed, index)
    los = int(np.clip(round(config.los_median_hours * math.exp(config.los_log_sd * rng.normal())),
                      MIN_LOS + 1, MAX_LOS - 1))
    states = _severity_path(rng, los, config.sepsis_hazard)
    load = _smooth_load(states)

    # interventions
    interventions = []
    busy_until = {c: -1.0 for c in INTERVENTIONS}
    for k in range(los):
        for c in INTERVENTIONS:
            h = _INTERVENTION_HAZARD[c][states[k]] * config.intervention_scale
            if h > 0 and k >= busy_until[c] and rng.random() < h:
                onset = _round_t(k + rng.random())
                if onset <= 0 or onset >= los:
                    continue
                lo, hi = _INTERVENTION_DURATION[c]
                dur = _round_t(min(rng.uniform(lo, hi), los - onset))
                if dur <= 0:
                    continue
                interventions.append(InterventionEvent(c, onset, dur))
                busy_until[c] = onset + dur
    interventions.sort(key=lambda e: (e.onset, e.category))

    # lab orders: admission panel, then severity-modulated panels
    order_times = {lab: [rng.uniform(0.0, 0.5)] for lab in LABS}
    for t in _poisson_times(rng, los, config.bmp_per_day / 24.0, load, config.order_severity_boost):
        u = rng.random()
        if u < 0.85:
            order_times["Creatinine"].append(t)
            order_times["BUN"].append(t)
        else:
            order_times["Creatinine" if u < 0.925 else "BUN"].append(t)
    for t in _poisson_times(rng, los, config.cbc_per_day / 24.0, load, config.order_severity_boost):
        order_times["WBC"].append(t)
    for t in _poisson_times(rng, los, config.lactate_per_day / 24.0, load, config.order_severity_boost):
        order_times["Lactate"].append(t)

    obs_times = {}
    for lab in LABS:
        obs_times[lab] = np.unique([_round_t(t) for t in order_times[lab]])
    for v in ("HR", "RR", "MeanBP"):
        obs_times[v] = _hourly_times(rng, los, config.vital_obs_prob)
    obs_times["Temp"] = _hourly_times(rng, los, config.temp_obs_prob)
    obs_times["PaO2FiO2"] = _hourly_times(rng, los, config.pf_obs_prob)
    obs_times["GCS"] = _hourly_times(rng, los, config.gcs_obs_prob)
    obs_times["Bilirubin"] = _poisson_times(rng, los, config.bilirubin_per_day / 24.0, load, 0.0)
    obs_times["Platelet"] = obs_times["WBC"].copy()
    for name in ("HR", "RR", "MeanBP", "Temp", "PaO2FiO2", "GCS", "Bilirubin"):
        t = np.concatenate([[rng.uniform(0.0, 0.5)], obs_times[name]])
        obs_times[name] = np.unique(np.round(t, _TIME_DECIMALS))

    events = []
    for name, tp in config.traits.items():
        if name not in obs_times:
            continue
        times = obs_times[name]
        bz = (rng.normal() * math.sqrt(config.baseline_fraction), config.baseline_fraction)
        vals = _trait_values(rng, tp, times, load, bz, config.measurement_noise)
        events.extend(ObservationEvent(name, float(t), float(v)) for t, v in zip(times, vals))

    # GCS on the integer 3..15 scale
    gt = obs_times["GCS"]
    g_off = rng.normal() * 0.7
    gcs = 14.6 + g_off + 0.8 * rng.normal(size=len(gt)) - 2.8 * np.interp(gt, np.arange(len(load)), load)
    events.extend(ObservationEvent("GCS", float(t), float(v))
                  for t, v in zip(gt, np.clip(np.round(gcs), 3, 15)))

    # dopamine flag follows vasopressor courses
    events.append(ObservationEvent("Dopamine", 0.0, 0.0))
    for iv in interventions:
        if iv.category == "vasopressors":
            events.append(ObservationEvent("Dopamine", iv.onset, 1.0))
            end = _round_t(iv.onset + iv.duration)
            if end < los:
                events.append(ObservationEvent("Dopamine", end, 0.0))

    events.sort(key=lambda e: (e.timestamp, e.trait_id))
    orders = sorted((OrderEvent(lab, float(t)) for lab in LABS for t in obs_times[lab]),
                    key=lambda o: (o.timestamp, o.lab))
    return Admission(f"A{index:05d}", los, tuple(events), tuple(orders), tuple(interventions))


def simulate_cohort(config: CohortConfig, n_jobs: int = 1) -> list:
    """Simulate ``config.n_admissions`` admissions.

    Each admission has its own random stream derived from ``(seed, index)``,
    so serial and threaded runs give identical cohorts.
    """
    config.validate()
    idx = range(config.n_admissions)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(lambda i: simulate_admission(config, i), idx))
    return [simulate_admission(config, i) for i in idx]


# event CSV -------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def export_events(admissions, path_or_buf=None) -> Optional[str]:
    """Write admissions in the event CSV format.

    Besides ``obs``, ``order`` and ``intervention`` rows, each admission gets one
    ``discharge`` row whose timestamp is its length of stay.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for adm in admissions:
        aid = adm.admission_id
        w.writerow((aid, "discharge", "", _fmt(adm.length_of_stay), ""))
        for ev in adm.events:
            w.writerow((aid, "obs", ev.trait_id, _fmt(ev.timestamp), _fmt(ev.value)))
        for o in adm.orders:
            w.writerow((aid, "order", o.lab, _fmt(o.timestamp), ""))
        for iv in adm.interventions:
            w.writerow((aid, "intervention", iv.category, _fmt(iv.onset), _fmt(iv.duration)))
    text = buf.getvalue()
    if path_or_buf is None:
        return text
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return None


@dataclass
class IngestResult:
    admissions: list
    dropped: dict

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())


def _parse_float(s, lineno, what):
    try:
        x = float(s)
    except ValueError:
        raise ParseError(f"line {lineno}: bad {what} {s!r}") from None
    if not math.isfinite(x):
        raise ParseError(f"line {lineno}: non-finite {what}")
    return x


def parse_events(text: str) -> IngestResult:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or all(not r for r in rows):
        raise EmptyCohortError("event file is empty")
    if tuple(rows[0]) != CSV_HEADER:
        raise ParseError(f"line 1: expected header {','.join(CSV_HEADER)}")
    raw = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 5:
            raise ParseError(f"line {lineno}: expected 5 fields, got {len(row)}")
        aid, kind, name, ts, val = row
        if not aid:
            raise ParseError(f"line {lineno}: empty admission_id")
        t = _parse_float(ts, lineno, "timestamp")
        rec = raw.setdefault(aid, {"los": None, "events": [], "orders": [], "interventions": []})
        if kind == "obs":
            if name not in ALL_TRAITS:
                raise ParseError(f"line {lineno}: unknown trait {name!r}")
            rec["events"].append(ObservationEvent(name, t, _parse_float(val, lineno, "value")))
        elif kind == "order":
            if name not in LABS:
                raise ParseError(f"line {lineno}: unknown lab {name!r}")
            rec["orders"].append(OrderEvent(name, t))
        elif kind == "intervention":
            if name not in INTERVENTIONS:
                raise ParseError(f"line {lineno}: unknown intervention {name!r}")
            dur = _parse_float(val, lineno, "duration")
            if t < 0 or dur <= 0:
                raise ParseError(f"line {lineno}: intervention needs onset >= 0 and duration > 0")
            rec["interventions"].append(InterventionEvent(name, t, dur))
        elif kind == "discharge":
            rec["los"] = t
        else:
            raise ParseError(f"line {lineno}: unknown kind {kind!r}")
    if not raw:
        raise EmptyCohortError("event file has no admissions")

    kept, dropped = [], {}
    for aid in raw:
        rec = raw[aid]
        times = [e.timestamp for e in rec["events"]] + [o.timestamp for o in rec["orders"]] + \
                [iv.onset for iv in rec["interventions"]]
        los = rec["los"] if rec["los"] is not None else math.ceil(max(times, default=0.0))
        reason = None
        if not (MIN_LOS < los < MAX_LOS) or los != int(los):
            reason = "length_of_stay"
        elif any(t < 0 or t > los for t in times):
            reason = "event outside stay"
        else:
            present = {e.trait_id for e in rec["events"]}
            if not set(REQUIRED_TRAITS) <= present:
                reason = "missing trait"
        if reason:
            dropped[reason] = dropped.get(reason, 0) + 1
            continue
        kept.append(Admission(aid, int(los), tuple(rec["events"]), tuple(rec["orders"]),
                              tuple(rec["interventions"])))
    if dropped:
        logger.info("ingest dropped %d admissions: %s", sum(dropped.values()), dropped)
    return IngestResult(kept, dropped)


def ingest_events(path) -> IngestResult:
    """Read an event CSV, applying the length-of-stay and trait-coverage filters."""
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_events(fh.read())


def split_cohort(admissions, train_fraction: float, seed: int):
    """Partition admissions (not transitions) into train and test lists."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError("train_fraction must lie strictly between 0 and 1")
    if len(admissions) < 2:
        raise SplitError("need at least two admissions to split")
    ordered = sorted(admissions, key=lambda a: a.admission_id)
    n = len(ordered)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5A17])).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return [ordered[i] for i in train_idx], [ordered[i] for i in test_idx]


def cohort_summary(admissions, config_hash: Optional[str] = None) -> dict:
    los = np.array([a.length_of_stay for a in admissions], dtype=float)
    traits = {}
    for name in ALL_TRAITS:
        vals = np.concatenate([a.series(name)[1] for a in admissions]) if admissions else np.empty(0)
        traits[name] = {"count": int(vals.size),
                        "mean": float(vals.mean()) if vals.size else None,
                        "sd": float(vals.std(ddof=1)) if vals.size > 1 else None}
    days = los.sum() / 24.0 if len(los) else 0.0
    orders = {lab: sum(len(a.order_times(lab)) for a in admissions) for lab in LABS}
    out = {
        "n_admissions": len(admissions),
        "length_of_stay_hours": {"mean": float(los.mean()) if len(los) else None,
                                 "min": float(los.min()) if len(los) else None,
                                 "max": float(los.max()) if len(los) else None},
        "traits": traits,
        "orders": orders,
        "orders_per_day": {lab: (orders[lab] / days if days else None) for lab in LABS},
        "interventions": {c: sum(1 for a in admissions for iv in a.interventions if iv.category == c)
                          for c in INTERVENTIONS},
    }
    if config_hash is not None:
        out["config_hash"] = config_hash
    return out


def cohort_config_hash(config: CohortConfig) -> str:
    return binio.config_hash(config.to_dict())


def write_summary(summary: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
