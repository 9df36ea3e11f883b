"""Six-organ SOFA score from point estimates of the relevant traits."""

from dataclasses import dataclass

import numpy as np


class SofaArgumentError(ValueError):
    pass


@dataclass(frozen=True)
class SofaInputs:
    mean_bp: float
    bilirubin: float
    platelet: float
    creatinine: float
    fio2_pao2_ratio: float  # PaO2/FiO2, mmHg
    gcs: float
    dopamine_flag: bool = False


@dataclass(frozen=True)
class SofaTable:
    """Organ thresholds; each crossed threshold adds one point (0-4 per organ).

    ``*_below`` rows score when the value is strictly below the threshold,
    ``*_at_least`` rows when it is at or above it.
    """

    respiration_below: tuple = (400.0, 300.0, 200.0, 100.0)
    coagulation_below: tuple = (150.0, 100.0, 50.0, 20.0)
    liver_at_least: tuple = (1.2, 2.0, 6.0, 12.0)
    renal_at_least: tuple = (1.2, 2.0, 3.5, 5.0)
    cns_below: tuple = (15.0, 13.0, 10.0, 6.0)
    map_below: float = 70.0
    dopamine_points: int = 2


DEFAULT_TABLE = SofaTable()


def _below(x, thresholds):
    x = np.asarray(x, dtype=np.float64)
    return sum((x < t).astype(np.int64) for t in thresholds)


def _at_least(x, thresholds):
    x = np.asarray(x, dtype=np.float64)
    return sum((x >= t).astype(np.int64) for t in thresholds)


def sofa_components(mean_bp, bilirubin, platelet, creatinine, pf_ratio, gcs, dopamine,
                    table: SofaTable = DEFAULT_TABLE) -> dict:
    """Per-organ subscores; every argument may be a scalar or an array."""
    gcs = np.asarray(gcs, dtype=np.float64)
    if np.any((gcs < 3) | (gcs > 15)) or np.any(np.isnan(gcs)):
        raise SofaArgumentError("GCS must lie in [3, 15]")
    cardio = np.where(np.asarray(dopamine, dtype=bool), table.dopamine_points,
                      (np.asarray(mean_bp, dtype=np.float64) < table.map_below).astype(np.int64))
    return {
        "respiration": _below(pf_ratio, table.respiration_below),
        "coagulation": _below(np.maximum(platelet, 0.0), table.coagulation_below),
        "liver": _at_least(bilirubin, table.liver_at_least),
        "cardiovascular": cardio.astype(np.int64),
        "cns": _below(gcs, table.cns_below),
        "renal": _at_least(creatinine, table.renal_at_least),
    }


def sofa_array(mean_bp, bilirubin, platelet, creatinine, pf_ratio, gcs, dopamine,
               table: SofaTable = DEFAULT_TABLE) -> np.ndarray:
    parts = sofa_components(mean_bp, bilirubin, platelet, creatinine, pf_ratio, gcs, dopamine, table)
    return sum(parts.values())


def compute_sofa(inputs: SofaInputs, table: SofaTable = DEFAULT_TABLE) -> int:
    return int(sofa_array(inputs.mean_bp, inputs.bilirubin, inputs.platelet, inputs.creatinine,
                          inputs.fio2_pao2_ratio, inputs.gcs, inputs.dopamine_flag, table))
