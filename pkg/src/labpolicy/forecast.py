"""Hourly per-trait forecasts from sparse, irregular observations.

Each trait is modelled as an independent Gaussian process with an
exponential (Ornstein-Uhlenbeck) kernel

    k(t, t') = output_variance * exp(-|t - t'| / lengthscale)

plus i.i.d. observation noise. The OU process is Markov, so the exact GP
posterior is computed with a scalar Kalman filter (filtering mode, conditioning
on observations at or before each grid time) and a Rauch-Tung-Striebel pass
(smoothing mode, conditioning on everything). Reported standard deviations are
predictive for a new measurement: sqrt(latent variance + noise_variance).
"""

from dataclasses import dataclass
import csv
import io
import math

import numpy as np
from numba import njit


class FitError(ValueError):
    pass


class ForecastArgumentError(ValueError):
    pass


class ImputationError(ValueError):
    pass


FILTERING = "filtering"
SMOOTHING = "smoothing"
MODES = (FILTERING, SMOOTHING)

LENGTHSCALE_GRID = 2.0 ** np.arange(-1, 8)          # 0.5 h .. 128 h
OUTPUT_VARIANCE_RATIOS = 2.0 ** np.arange(-6, 3)     # x empirical variance
NOISE_VARIANCE_RATIOS = 4.0 ** np.arange(-7, 0)      # x empirical variance


@dataclass(frozen=True)
class TraitSeries:
    trait_id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64)
        y = np.asarray(self.values, dtype=np.float64)
        if t.shape != y.shape or t.ndim != 1:
            raise ForecastArgumentError("timestamps and values must be 1-D and equally long")
        if np.any(np.diff(t) <= 0):
            raise ForecastArgumentError(f"{self.trait_id}: timestamps must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ForecastArgumentError(f"{self.trait_id}: non-finite observation")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "values", y)

    def __len__(self):
        return len(self.timestamps)


@dataclass(frozen=True)
class KernelParams:
    output_variance: float
    lengthscale: float
    noise_variance: float
    prior_mean: float
    cohort_sd: float = float("nan")

    def __post_init__(self):
        if self.output_variance < 0 or self.noise_variance < 0:
            raise ForecastArgumentError("variances must be non-negative")
        if not self.lengthscale > 0:
            raise ForecastArgumentError("lengthscale must be positive")
        if math.isnan(self.cohort_sd):
            object.__setattr__(self, "cohort_sd", math.sqrt(self.output_variance + self.noise_variance))

    def to_dict(self) -> dict:
        return {"output_variance": self.output_variance, "lengthscale": self.lengthscale,
                "noise_variance": self.noise_variance, "prior_mean": self.prior_mean,
                "cohort_sd": self.cohort_sd}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelParams":
        return cls(**d)


@dataclass(frozen=True)
class ForecastGrid:
    trait_id: str
    grid_times: np.ndarray
    means: np.ndarray
    stds: np.ndarray


@njit(cache=True)
def _ou_pass(obs_t, obs_y, grid, s2, ell, noise, mu, smooth):
    """Kalman filter (+ optional RTS smoother) on the merged obs/grid timeline.

    Returns latent mean and variance at each grid time.
    """
    n_obs = obs_t.shape[0]
    n_grid = grid.shape[0]
    M = n_obs + n_grid
    # merged timeline; observations sort before grid points at equal times
    times = np.empty(M)
    is_obs = np.empty(M, dtype=np.bool_)
    ref = np.empty(M, dtype=np.int64)
    i = 0
    j = 0
    for k in range(M):
        if j >= n_grid or (i < n_obs and obs_t[i] <= grid[j]):
            times[k] = obs_t[i]
            is_obs[k] = True
            ref[k] = i
            i += 1
        else:
            times[k] = grid[j]
            is_obs[k] = False
            ref[k] = j
            j += 1

    m_pred = np.empty(M)
    p_pred = np.empty(M)
    m_filt = np.empty(M)
    p_filt = np.empty(M)
    m = mu
    p = s2
    prev = times[0] if M > 0 else 0.0
    for k in range(M):
        dt = times[k] - prev
        if dt > 0:
            a = math.exp(-dt / ell)
            m = mu + a * (m - mu)
            p = a * a * p + s2 * (1.0 - a * a)
        prev = times[k]
        m_pred[k] = m
        p_pred[k] = p
        if is_obs[k]:
            s = p + noise
            if s > 0:
                g = p / s
                m = m + g * (obs_y[ref[k]] - m)
                p = (1.0 - g) * p
                if p < 0:
                    p = 0.0
        m_filt[k] = m
        p_filt[k] = p

    out_m = np.empty(n_grid)
    out_p = np.empty(n_grid)
    if not smooth:
        for k in range(M):
            if not is_obs[k]:
                out_m[ref[k]] = m_filt[k]
                out_p[ref[k]] = p_filt[k]
        return out_m, out_p

    ms = m_filt.copy()
    ps = p_filt.copy()
    for k in range(M - 2, -1, -1):
        dt = times[k + 1] - times[k]
        a = math.exp(-dt / ell) if dt > 0 else 1.0
        if p_pred[k + 1] > 0:
            gain = p_filt[k] * a / p_pred[k + 1]
        else:
            gain = 0.0
        ms[k] = m_filt[k] + gain * (ms[k + 1] - m_pred[k + 1])
        ps[k] = p_filt[k] + gain * gain * (ps[k + 1] - p_pred[k + 1])
        if ps[k] < 0:
            ps[k] = 0.0
    for k in range(M):
        if not is_obs[k]:
            out_m[ref[k]] = ms[k]
            out_p[ref[k]] = ps[k]
    return out_m, out_p


@njit(cache=True)
def _loglik_grid(t_all, y_all, offsets, s2s, ells, noises, mu):
    """Summed OU marginal log-likelihood over all series, for every parameter triple."""
    G = s2s.shape[0]
    out = np.zeros(G)
    n_series = offsets.shape[0] - 1
    for g in range(G):
        s2 = s2s[g]
        ell = ells[g]
        noise = noises[g]
        ll = 0.0
        for q in range(n_series):
            m = mu
            p = s2
            lo = offsets[q]
            hi = offsets[q + 1]
            for k in range(lo, hi):
                if k > lo:
                    a = math.exp(-(t_all[k] - t_all[k - 1]) / ell)
                    m = mu + a * (m - mu)
                    p = a * a * p + s2 * (1.0 - a * a)
                s = p + noise
                r = y_all[k] - m
                ll += -0.5 * (math.log(2.0 * math.pi * s) + r * r / s)
                gk = p / s
                m = m + gk * r
                p = (1.0 - gk) * p
        out[g] = ll
    return out


def fit_kernel(series_list, trait_id=None, min_observations: int = 10) -> KernelParams:
    """Grid-search maximum marginal likelihood for one trait.

    ``prior_mean`` is fixed at the pooled mean of all observations; the
    variances are searched on logarithmic grids scaled by the pooled variance,
    the lengthscale on a fixed grid of hours (:data:`LENGTHSCALE_GRID`).
    """
    series_list = [s for s in series_list]
    name = trait_id or (series_list[0].trait_id if series_list else "<unknown>")
    n_total = sum(len(s) for s in series_list)
    if n_total < min_observations:
        raise FitError(f"trait {name}: need at least {min_observations} observations, got {n_total}")
    nonempty = [s for s in series_list if len(s)]
    y_all = np.concatenate([s.values for s in nonempty])
    t_all = np.concatenate([s.timestamps for s in nonempty])
    offsets = np.concatenate([[0], np.cumsum([len(s) for s in nonempty])]).astype(np.int64)
    mu = float(y_all.mean())
    var = float(y_all.var())
    scale = max(var, 1e-12 * max(1.0, mu * mu))

    s2g, ellg, ng = np.meshgrid(OUTPUT_VARIANCE_RATIOS * scale, LENGTHSCALE_GRID,
                                NOISE_VARIANCE_RATIOS * scale, indexing="ij")
    ll = _loglik_grid(t_all, y_all, offsets, s2g.ravel(), ellg.ravel(), ng.ravel(), mu)
    best = int(np.argmax(ll))
    return KernelParams(
        output_variance=float(s2g.ravel()[best]),
        lengthscale=float(ellg.ravel()[best]),
        noise_variance=float(ng.ravel()[best]),
        prior_mean=mu,
        cohort_sd=float(math.sqrt(var)) if var > 0 else float(math.sqrt(scale)),
    )


def _check_grid(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
        raise ForecastArgumentError("grid must be strictly increasing")
    return grid


def predict(series: TraitSeries, params: KernelParams, grid, mode: str = FILTERING) -> ForecastGrid:
    if mode not in MODES:
        raise ForecastArgumentError(f"unknown mode {mode!r}")
    grid = _check_grid(grid)
    m, p = _ou_pass(series.timestamps, series.values, grid, params.output_variance,
                    params.lengthscale, params.noise_variance, params.prior_mean, mode == SMOOTHING)
    return ForecastGrid(series.trait_id, grid, m, np.sqrt(p + params.noise_variance))


def locf(series: TraitSeries, grid, default=None) -> ForecastGrid:
    """Last observation carried forward, first observation carried backward.

    With no observations, ``default`` fills the grid (an error if not given).
    """
    grid = _check_grid(grid)
    if len(series) == 0:
        if default is None:
            raise ImputationError(f"{series.trait_id}: cannot impute from an empty series")
        vals = np.full(len(grid), float(default))
    else:
        pos = np.searchsorted(series.timestamps, grid, side="right") - 1
        vals = series.values[np.clip(pos, 0, None)]
    return ForecastGrid(series.trait_id, grid, vals, np.zeros(len(grid)))


def impute_gcs(series: TraitSeries, grid) -> ForecastGrid:
    return locf(series, grid)


def export_forecasts_csv(rows, path_or_buf=None):
    """``rows`` yields ``(admission_id, mode, ForecastGrid)`` triples."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("admission_id", "trait_id", "time", "mean", "std", "mode"))
    for aid, mode, fg in rows:
        for t, m, s in zip(fg.grid_times, fg.means, fg.stds):
            w.writerow((aid, fg.trait_id, repr(float(t)), repr(float(m)), repr(float(s)), mode))
    text = buf.getvalue()
    if path_or_buf is None:
        return text
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return None
