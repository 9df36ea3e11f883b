import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from labpolicy.cohort import INTERVENTIONS, Admission, CohortConfig, ObservationEvent, simulate_cohort
from labpolicy.mdp import (LAB_ELAPSED, LAB_LAST, LAB_MEAN, N_STATE, SOFA_IDX, BuildError, MdpConfig,
                           ThresholdError, TransitionSet, action_ids, admission_states, all_actions,
                           build_transitions, forecast_admission, info_deviation, intervention_onsets,
                           reward_cost, reward_info, reward_sofa, reward_treat, threshold_from_training)
from labpolicy.sofa import SofaArgumentError, SofaInputs, compute_sofa
from labpolicy import binio

HEALTHY = dict(mean_bp=80.0, bilirubin=0.8, platelet=250.0, creatinine=0.9, fio2_pao2_ratio=450.0, gcs=15)


def rel(a, b):
    return abs(a - b) <= 1e-12 * max(abs(b), 1e-300)


def test_sofa_examples():
    assert compute_sofa(SofaInputs(**HEALTHY)) == 0
    assert compute_sofa(SofaInputs(**{**HEALTHY, "platelet": 90.0})) == 2
    assert compute_sofa(SofaInputs(**{**HEALTHY, "gcs": 8, "creatinine": 4.0})) == 6
    assert compute_sofa(SofaInputs(**{**HEALTHY, "mean_bp": 60.0})) == 1
    assert compute_sofa(SofaInputs(**HEALTHY, dopamine_flag=True)) == 2
    with pytest.raises(SofaArgumentError):
        compute_sofa(SofaInputs(**{**HEALTHY, "gcs": 2}))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1000), st.floats(0, 1000))
def test_sofa_monotone_in_platelets(p1, p2):
    lo, hi = sorted((p1, p2))
    assert compute_sofa(SofaInputs(**{**HEALTHY, "platelet": lo})) >= \
        compute_sofa(SofaInputs(**{**HEALTHY, "platelet": hi}))


def test_action_encoding():
    A = all_actions()
    assert A.shape == (16, 4)
    np.testing.assert_array_equal(action_ids(A), np.arange(16))
    assert action_ids([1, 0, 1, 0]) == 5


def test_reward_examples():
    assert reward_sofa([1, 0, 0, 0], 5, 3) == 1
    assert reward_sofa([0, 0, 0, 0], 10, 3) == 0
    assert reward_sofa([1, 1, 1, 1], 6, 5) == 0
    assert reward_treat([0, 0, 1, 0], ["mechanical_ventilation"]) == 1
    assert reward_treat([0, 0, 0, 0], ["dialysis"]) == 0
    assert reward_treat([1, 0, 0, 0], ["vasopressors", "antibiotics"]) == 2
    m, y, s = [10, 0, 0, 0], [8, 0, 0, 0], [1, 1, 1, 1]
    assert rel(reward_info([1, 0, 0, 0], m, y, s, 1.0), 1.0)
    assert reward_info([0, 0, 0, 0], m, y, s, 1.0) == 0.0
    assert reward_info([1, 0, 0, 0], [0.5, 0, 0, 0], [0, 0, 0, 0], s, 1.0) == 0.0
    assert rel(reward_cost([1, 0, 0, 0], [0, 0, 0, 0]), 1.0)
    assert rel(reward_cost([1, 0, 0, 0], [6, 0, 0, 0], 6.0), math.exp(-1))
    assert reward_cost([0, 0, 0, 0], [6, 0, 0, 0]) == 0.0


def test_info_sigma_floor():
    g = info_deviation(3.0, 1.0, 0.0, sigma_floor=0.5)
    assert g == pytest.approx(4.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 48), min_size=4, max_size=4), st.floats(1e-3, 10))
def test_cost_strictly_decreasing_and_bounded(elapsed, dt):
    a = [1, 1, 1, 1]
    c = reward_cost(a, elapsed)
    assert 0 < c <= 4
    later = np.asarray(elapsed) + np.array([dt, 0, 0, 0])
    assert reward_cost(a, later) < c


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 10), st.floats(0.01, 100))
def test_info_scale_invariant(m, y, s, k):
    a = [1, 0, 0, 0]
    z = [0.0, 0.0, 0.0]
    base = reward_info(a, [m] + z, [y] + z, [s, 1, 1, 1], 0.5)
    scaled = reward_info(a, [k * m] + z, [k * y] + z, [k * s, 1, 1, 1], 0.5)
    assert scaled == pytest.approx(base, rel=1e-9, abs=1e-9)


def test_thresholds():
    np.testing.assert_array_equal(threshold_from_training([[0.2, 1.0, 3.0], [0.7], [1.0, 3.0], [5.0]]),
                                  [1.0, 0.7, 2.0, 5.0])
    with pytest.raises(ThresholdError, match="Lactate"):
        threshold_from_training([[1.0], [1.0], [1.0], []])


def _quiet_admission(los=48):
    """Every trait observed once, no orders and no interventions."""
    ev = [ObservationEvent(t, 0.5, v) for t, v in
          [("HR", 80.0), ("RR", 18.0), ("Temp", 98.6), ("MeanBP", 80.0), ("Creatinine", 1.0), ("BUN", 20.0),
           ("WBC", 9.0), ("Lactate", 1.5), ("Bilirubin", 0.8), ("Platelet", 250.0), ("PaO2FiO2", 400.0),
           ("GCS", 15.0)]]
    return Admission("Q1", los, tuple(ev))


def test_no_order_admission(kernels):
    cfg = MdpConfig(info_thresholds=(1.0, 1.0, 1.0, 1.0))
    adm = _quiet_admission()
    ts = build_transitions(adm, forecast_admission(adm, kernels), cfg)
    assert len(ts) == 47
    assert ts.done.tolist() == [False] * 46 + [True]
    assert np.all(ts.actions == 0) and np.all(ts.rewards == 0) and np.all(ts.lab_rewards == 0)
    assert ts.states.shape == (47, N_STATE)
    np.testing.assert_array_equal(ts.states[1:], ts.next_states[:-1])
    # never-ordered labs sit at the elapsed cap
    np.testing.assert_array_equal(ts.states[:, LAB_ELAPSED], 48.0)


def test_build_requires_thresholds_and_kernels(kernels):
    adm = _quiet_admission()
    with pytest.raises(BuildError):
        build_transitions(adm, forecast_admission(adm, kernels), MdpConfig())
    with pytest.raises(BuildError):
        forecast_admission(adm, {k: v for k, v in kernels.items() if k != "WBC"})


def test_rewards_match_scalar_formulas(small_cohort, mdp_setup):
    cfg, fcs, ts = mdp_setup
    adm, fc = small_cohort[0], fcs[0]
    part = ts.subset(ts.admission_ids == adm.admission_id)
    _, sigma = admission_states(adm, fc, cfg)
    onsets = {}
    for iv in adm.interventions:
        onsets.setdefault(math.ceil(iv.onset) - 1, set()).add(iv.category)
    for i in range(len(part)):
        a, s, s2 = part.actions[i], part.states[i], part.next_states[i]
        exp = [reward_sofa(a, s2[SOFA_IDX], s[SOFA_IDX]),
               reward_treat(a, onsets.get(i, ())),
               reward_info(a, s[LAB_MEAN], s[LAB_LAST], sigma[i], cfg.info_thresholds),
               -reward_cost(a, s[LAB_ELAPSED])]
        np.testing.assert_allclose(part.rewards[i], exp, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(part.lab_rewards[i].sum(axis=0)[2:], exp[2:], rtol=1e-12, atol=1e-15)


def test_zero_action_means_zero_reward(mdp_setup):
    _, _, ts = mdp_setup
    idle = ~ts.actions.any(axis=1)
    assert idle.sum() > 0 and np.all(ts.rewards[idle] == 0)
    lab_idle = ts.actions == 0
    assert np.all(ts.lab_rewards[lab_idle] == 0)
    assert np.all(ts.states[:, LAB_ELAPSED] <= 48.0)
    assert np.all(ts.rewards[:, 3] <= 0) and np.all(ts.rewards[:, 2] >= 0)


def test_zero_hazard_has_no_treat_reward(kernels):
    adms = simulate_cohort(CohortConfig(n_admissions=5, seed=2, sepsis_hazard=0.0))
    cfg = MdpConfig(info_thresholds=(1.0, 1.0, 1.0, 1.0))
    for a in adms:
        assert np.all(build_transitions(a, forecast_admission(a, kernels), cfg).rewards[:, 1] == 0)


def test_intervention_onset_counting():
    from labpolicy.cohort import InterventionEvent
    adm = Admission("I", 30, interventions=(InterventionEvent("dialysis", 4.5, 2.0),
                                            InterventionEvent("antibiotics", 4.9, 2.0),
                                            InterventionEvent("vasopressors", 5.0, 1.0)))
    counts = intervention_onsets(adm, 29)
    assert counts[4] == 3 and counts.sum() == 3
    assert len(INTERVENTIONS) == 4


def test_transition_set_round_trip(mdp_setup, tmp_path):
    _, _, ts = mdp_setup
    back = TransitionSet.from_bytes(ts.to_bytes())
    for name in ("states", "actions", "next_states", "rewards", "lab_rewards", "times", "done"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ts, name))
    assert back.admission_ids.tolist() == ts.admission_ids.tolist()
    assert back.meta == ts.meta
    ts.save(tmp_path / "t.bin")
    assert TransitionSet.load(tmp_path / "t.bin").to_bytes() == ts.to_bytes()
    assert (tmp_path / "t.bin.schema.json").exists()
    assert ts.schema()["columns"]["lab_rewards"] == ["n", 4, 4]
    with pytest.raises(binio.FormatError):
        TransitionSet.from_bytes(b"XXXX" + ts.to_bytes()[4:])
    lines = ts.subset(slice(0, 3)).to_csv().strip().split("\n")
    assert len(lines) == 4 and lines[0].startswith("admission_id,time,s_")


def test_trajectory_slices(mdp_setup):
    _, _, ts = mdp_setup
    sl = ts.trajectory_slices()
    assert len(sl) == len(set(ts.admission_ids.tolist()))
    for s in sl:
        assert ts.done[s][-1] and not ts.done[s][:-1].any()
        np.testing.assert_array_equal(ts.times[s], np.arange(s.stop - s.start))
