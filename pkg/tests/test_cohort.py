import json

import numpy as np
import pytest

from labpolicy.cohort import (ALL_TRAITS, CSV_HEADER, INTERVENTIONS, LABS, MAX_LOS, MIN_LOS, REQUIRED_TRAITS,
                              Admission, CohortConfig, ConfigError, EmptyCohortError, ParseError, SplitError,
                              cohort_summary, export_events, parse_events, simulate_cohort, split_cohort)


def _csv(rows):
    return "\n".join([",".join(CSV_HEADER)] + [",".join(map(str, r)) for r in rows]) + "\n"


def _admission_rows(aid, los, skip=()):
    rows = [(aid, "discharge", "", float(los), "")]
    for i, name in enumerate(REQUIRED_TRAITS):
        if name not in skip:
            rows.append((aid, "obs", name, 1.0 + i * 0.1, 10.0))
    rows.append((aid, "order", "WBC", 1.0, ""))
    return rows


def test_simulation_is_deterministic():
    a = simulate_cohort(CohortConfig(n_admissions=10, seed=7))
    b = simulate_cohort(CohortConfig(n_admissions=10, seed=7))
    assert export_events(a) == export_events(b)
    assert export_events(a) != export_events(simulate_cohort(CohortConfig(n_admissions=10, seed=8)))


def test_threaded_simulation_matches_serial():
    cfg = CohortConfig(n_admissions=6, seed=2)
    assert export_events(simulate_cohort(cfg)) == export_events(simulate_cohort(cfg, n_jobs=3))


def test_creatinine_mean_matches_configuration():
    cfg = CohortConfig(n_admissions=300, seed=11, sepsis_hazard=0.0)
    adms = simulate_cohort(cfg)
    per_adm = np.array([a.series("Creatinine")[1].mean() for a in adms])
    se = per_adm.std(ddof=1) / np.sqrt(len(per_adm))
    assert abs(per_adm.mean() - 1.5) < 3 * se


def test_zero_hazard_has_no_interventions():
    adms = simulate_cohort(CohortConfig(n_admissions=40, seed=1, sepsis_hazard=0.0))
    assert sum(len(a.interventions) for a in adms) == 0


def test_simulated_admissions_are_well_formed():
    adms = simulate_cohort(CohortConfig(n_admissions=25, seed=4))
    for a in adms:
        assert MIN_LOS < a.length_of_stay < MAX_LOS
        assert {e.trait_id for e in a.events} >= set(REQUIRED_TRAITS)
        assert all(0 <= e.timestamp <= a.length_of_stay for e in a.events)
        assert all(0 <= o.timestamp <= a.length_of_stay for o in a.orders)
        assert all(iv.category in INTERVENTIONS and iv.duration > 0 for iv in a.interventions)
        for lab in LABS:
            # lab values are only ever observed where an order was placed
            assert set(a.series(lab)[0]) <= set(a.order_times(lab))
        g = a.series("GCS")[1]
        assert g.min() >= 3 and g.max() <= 15 and np.all(g == np.round(g))


def test_export_ingest_round_trip():
    adms = simulate_cohort(CohortConfig(n_admissions=5, seed=9))
    text = export_events(adms)
    res = parse_events(text)
    assert res.n_dropped == 0
    assert export_events(res.admissions) == text


def test_ingest_keeps_48h_admission():
    res = parse_events(_csv(_admission_rows("X1", 48)))
    assert len(res.admissions) == 1 and res.admissions[0].length_of_stay == 48


def test_ingest_drops_short_stay():
    res = parse_events(_csv(_admission_rows("X1", 12)))
    assert res.admissions == [] and res.dropped == {"length_of_stay": 1}


def test_ingest_drops_missing_trait():
    res = parse_events(_csv(_admission_rows("X1", 48, skip=("WBC",)) + _admission_rows("X2", 48)))
    assert [a.admission_id for a in res.admissions] == ["X2"]
    assert res.dropped == {"missing trait": 1}


def test_ingest_errors():
    rows = _admission_rows("X1", 48)
    rows.insert(3, ("X1", "obs", "HR", "soon", 80.0))
    with pytest.raises(ParseError, match="line 5"):
        parse_events(_csv(rows))
    with pytest.raises(ParseError, match="line 2"):
        parse_events(_csv([("X1", "teleport", "", 1.0, "")]))
    with pytest.raises(EmptyCohortError):
        parse_events("")
    with pytest.raises(EmptyCohortError):
        parse_events(_csv([]))


def test_split_sizes():
    adms = [Admission(f"A{i:05d}", 48) for i in range(6060)]
    train, test = split_cohort(adms, 0.6, seed=0)
    assert (len(train), len(test)) == (3636, 2424)
    assert not {a.admission_id for a in train} & {a.admission_id for a in test}
    t1, _ = split_cohort(adms, 0.6, seed=0)
    assert [a.admission_id for a in t1] == [a.admission_id for a in train]
    # input order does not matter
    t2, _ = split_cohort(adms[::-1], 0.6, seed=0)
    assert [a.admission_id for a in t2] == [a.admission_id for a in train]
    tr, te = split_cohort(adms[:2], 0.5, seed=3)
    assert (len(tr), len(te)) == (1, 1)


def test_split_errors():
    with pytest.raises(SplitError):
        split_cohort([Admission("A", 48)], 0.5, 0)
    with pytest.raises(SplitError):
        split_cohort([Admission("A", 48), Admission("B", 48)], 1.0, 0)


def test_config_validation_and_dict_round_trip():
    with pytest.raises(ConfigError):
        CohortConfig(n_admissions=0).validate()
    with pytest.raises(ConfigError):
        CohortConfig.from_dict({"traits": {"HR": {"sd": -1.0}}})
    with pytest.raises(ConfigError):
        CohortConfig.from_dict({"colour": "blue"})
    cfg = CohortConfig.from_dict({"n_admissions": 3, "traits": {"WBC": {"mean": 9.0}}})
    assert cfg.traits["WBC"].mean == 9.0 and cfg.traits["WBC"].sd == 6.2
    assert CohortConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_summary_counts():
    adms = simulate_cohort(CohortConfig(n_admissions=4, seed=5))
    s = cohort_summary(adms, config_hash="abc")
    assert s["n_admissions"] == 4 and s["config_hash"] == "abc"
    assert set(s["traits"]) == set(ALL_TRAITS)
    assert s["orders"]["WBC"] == sum(len(a.order_times("WBC")) for a in adms)
