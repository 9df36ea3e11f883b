import numpy as np
import pytest

from labpolicy.cohort import CohortConfig, simulate_cohort
from labpolicy.mdp import (MdpConfig, TransitionSet, build_transitions, fit_trait_kernels,
                           forecast_admission, order_deviations, threshold_from_training)
from dataclasses import replace


@pytest.fixture(scope="session")
def small_cohort():
    return simulate_cohort(CohortConfig(n_admissions=40, seed=3))


@pytest.fixture(scope="session")
def kernels(small_cohort):
    return fit_trait_kernels(small_cohort)


@pytest.fixture(scope="session")
def mdp_setup(small_cohort, kernels):
    """(config with thresholds, forecasts, transitions) for the small cohort."""
    fcs = [forecast_admission(a, kernels) for a in small_cohort]
    devs = [[] for _ in range(4)]
    base = MdpConfig()
    for a, fc in zip(small_cohort, fcs):
        for l, g in enumerate(order_deviations(a, fc, base)):
            devs[l].append(g)
    c = threshold_from_training([np.concatenate(g) for g in devs])
    cfg = replace(base, info_thresholds=tuple(c))
    ts = TransitionSet.concat([build_transitions(a, fc, cfg) for a, fc in zip(small_cohort, fcs)],
                              {"config_hash": "test"})
    return cfg, fcs, ts


# acceptance summary -------------------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number: int, ok: bool, detail: str):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
