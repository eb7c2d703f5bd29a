import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from busdensity.density import one_hot
from busdensity.evaluation import auroc
from busdensity.risk import (
    RiskModel, RiskModelError, RiskSubject, assign_folds, cv_risk_auroc, design_matrix, fit_odds_model,
    fit_risk_model, odds_ratios, simulate_density_draws, standardize_age, write_risk_report,
)
from busdensity.synth import SynthConfig, simulate_risk_subjects


def test_standardize_two_points():
    z, mean, sd = standardize_age([40, 60])
    assert mean == 50 and sd == pytest.approx(math.sqrt(200))
    assert z == pytest.approx([-1 / math.sqrt(2), 1 / math.sqrt(2)])


def test_standardize_constant_raises():
    with pytest.raises(ValueError):
        standardize_age([50, 50, 50])


@given(st.lists(st.floats(20, 100), min_size=2, max_size=50).filter(lambda a: len(set(a)) > 1 and np.std(a) > 1e-3))
def test_standardize_identity(ages):
    z, _, _ = standardize_age(ages)
    assert abs(z.mean()) < 1e-12 and abs(z.std(ddof=1) - 1) < 1e-12


def test_draws_point_mass():
    assert simulate_density_draws([1, 0, 0, 0], 50, seed=1).tolist() == [0] * 50


def test_draws_law_of_large_numbers():
    d = simulate_density_draws([0.25] * 4, 100_000, seed=2)
    assert np.all(np.abs(np.bincount(d, minlength=4) / d.size - 0.25) < 0.01)
    assert np.array_equal(d, simulate_density_draws([0.25] * 4, 100_000, seed=2))


def test_design_matrix_reference_is_all_zero():
    X, names = design_matrix([0.0, 1.0], one_hot([1, 3]))
    assert names == ["intercept", "age", "A", "C", "D"]
    assert X[0, 2:].tolist() == [0, 0, 0] and X[1, 2:].tolist() == [0, 0, 1]
    assert design_matrix([0.0], None)[1] == ["intercept", "age"]


def test_intercept_only_closed_form():
    y = np.r_[np.ones(30), np.zeros(70)]
    m = fit_risk_model(np.ones((100, 1)), y, ["intercept"])
    assert m.coef[0] == pytest.approx(math.log(0.3 / 0.7), abs=1e-10)
    assert m.converged


def test_fit_matches_score_equations(rng):
    X = np.column_stack([np.ones(300), rng.normal(size=300)])
    y = (rng.random(300) < 1 / (1 + np.exp(-(0.3 + 0.8 * X[:, 1])))).astype(float)
    m = fit_risk_model(X, y, ["intercept", "age"])
    p = m.predict_risk(X)
    assert np.max(np.abs(X.T @ (y - p))) < 1e-8
    assert np.allclose(m.cov, m.cov.T) and np.all(np.linalg.eigvalsh(m.cov) >= 0)


def test_single_outcome_rejected():
    with pytest.raises(RiskModelError) as exc:
        fit_risk_model(np.ones((5, 1)), np.zeros(5), ["intercept"])
    assert exc.value.reason == "single_outcome"


def test_rank_deficiency_names_column(rng):
    X = np.column_stack([np.ones(20), rng.normal(size=20), np.ones(20)])
    with pytest.raises(RiskModelError, match="'dup'") as exc:
        fit_risk_model(X, np.r_[np.ones(10), np.zeros(10)], ["intercept", "age", "dup"])
    assert exc.value.reason == "rank_deficient"


def test_separation_detected():
    x = np.arange(20.0)
    X = np.column_stack([np.ones(20), x])
    with pytest.raises(RiskModelError) as exc:
        fit_risk_model(X, (x >= 10).astype(float), ["intercept", "age"])
    assert exc.value.reason == "quasi_separation"


def test_empty_class_indicator_is_separation(rng):
    # no cases among women with density A
    k = np.r_[np.zeros(10, int), rng.integers(1, 4, 190)]
    y = np.where(k == 0, 0, rng.random(200) < 0.3).astype(float)
    X, names = design_matrix(rng.normal(size=200), one_hot(k))
    with pytest.raises(RiskModelError) as exc:
        fit_risk_model(X, y, names)
    assert exc.value.reason == "quasi_separation"


BALANCED = SynthConfig(density_prior=(0.25, 0.25, 0.25, 0.25), baseline_log_odds=0.0)


def test_null_coefficients_small():
    # balanced classes and outcomes keep every SE near 0.08
    subjects = simulate_risk_subjects(5000, BALANCED, seed=0, null=True)
    m = fit_odds_model(subjects, "clinical", seed=0)
    assert np.all(np.abs(m.coef[1:]) < 0.1)


def test_planted_coefficients_recovered():
    cfg = SynthConfig(baseline_log_odds=-1.0)
    subjects = simulate_risk_subjects(5000, cfg, seed=12)
    m = fit_odds_model(subjects, "clinical")
    truth = dict(zip(["age", "A", "C", "D"], cfg.true_log_odds))
    for name, beta in truth.items():
        j = m.names.index(name)
        assert abs(m.coef[j] - beta) < 3 * m.se[j], name


# --- odds ratios ---------------------------------------------------------------------------


def _model(beta_d, se_d):
    names = ["intercept", "age", "A", "C", "D"]
    cov = np.diag([0.01, 0.01, 0.01, 0.01, se_d**2])
    return RiskModel(np.array([0, 0, 0, 0, beta_d]), cov, names)


def test_or_null_straddles_one():
    d = odds_ratios(_model(0.0, 0.2))[3]
    assert d.covariate == "D" and d.odds_ratio == 1.0 and d.lower < 1 < d.upper


def test_or_degenerate_se():
    d = odds_ratios(_model(math.log(2), 0.0))[3]
    assert d.odds_ratio == pytest.approx(2.0) and d.lower == pytest.approx(2.0) and d.upper == pytest.approx(2.0)


def test_or_table_order_and_reference():
    rows = odds_ratios(_model(0.1, 0.1))
    assert [r.covariate for r in rows] == ["A", "B", "C", "D", "age"]
    assert rows[1].reference and rows[1].odds_ratio == 1.0 and rows[1].lower is None


def test_reference_class_identity():
    subjects = simulate_risk_subjects(3000, SynthConfig(baseline_log_odds=-1.0), seed=5)
    by_b = {r.covariate: r.odds_ratio for r in odds_ratios(fit_odds_model(subjects, "clinical"))}
    by_a = {r.covariate: r.odds_ratio for r in odds_ratios(fit_odds_model(subjects, "clinical", reference="A"))}
    assert by_a["A"] == 1.0
    for d in ("B", "C", "D"):
        assert by_a[d] == pytest.approx(by_b[d] / by_b["A"], abs=1e-6)


# --- cross-validated AUROC -----------------------------------------------------------------


def test_folds_are_stratified_partition():
    y = np.r_[np.ones(20), np.zeros(100)].astype(int)
    f = assign_folds(y, 3, 0)
    assert set(f.tolist()) == {0, 1, 2}
    for k in range(3):
        assert 6 <= y[f == k].sum() <= 7


def test_cv_scores_every_woman_once_without_leakage():
    subjects = simulate_risk_subjects(300, SynthConfig(baseline_log_odds=-1.0), seed=3)
    res = cv_risk_auroc(subjects, folds=3, seed=1, density_source="predicted", draws=20)
    assert sorted(res.patient_ids) == sorted(s.patient_id for s in subjects)
    for f in range(3):
        held = {p for p, k in zip(res.patient_ids, res.fold_of) if k == f}
        train = {p for p, k in zip(res.patient_ids, res.fold_of) if k != f}
        assert held and not held & train
    assert res.fold_models[0].n_obs == 20 * int(np.sum(res.fold_of != 0))


def test_cv_auroc_same_on_probability_scale():
    subjects = simulate_risk_subjects(300, BALANCED, seed=4)
    res = cv_risk_auroc(subjects, seed=0, density_source="clinical")
    assert auroc(1 / (1 + np.exp(-res.scores)), res.outcomes) == res.ci.auc


def test_planted_deterministic_density_outcome():
    rng = np.random.default_rng(0)
    subjects = []
    for i in range(600):
        k = int(rng.integers(0, 4))
        y = int(k >= 2)
        subjects.append(RiskSubject(f"w{i}", float(rng.normal(50, 10)), k, y, 0.9 * np.eye(4)[k] + 0.025))
    res = cv_risk_auroc(subjects, seed=0, density_source="predicted", draws=10)
    assert res.ci.auc > 0.95


def test_null_cv_ci_contains_half():
    subjects = simulate_risk_subjects(1200, SynthConfig(baseline_log_odds=-1.5), seed=1000, null=True)
    res = cv_risk_auroc(subjects, seed=0, density_source="predicted")
    assert res.ci.lower <= 0.5 <= res.ci.upper


def test_cv_single_outcome_fold():
    subjects = [RiskSubject(f"w{i}", 40.0 + i, i % 4, int(i == 0), None) for i in range(12)]
    with pytest.raises(RiskModelError) as exc:
        cv_risk_auroc(subjects, density_source="clinical")
    assert exc.value.reason == "single_outcome_fold"


def test_cv_deterministic():
    subjects = simulate_risk_subjects(200, SynthConfig(baseline_log_odds=-1.0), seed=9)
    a = cv_risk_auroc(subjects, seed=2, draws=5)
    b = cv_risk_auroc(list(reversed(subjects)), seed=2, draws=5)
    assert np.array_equal(a.scores, b.scores)


def test_risk_report_files(tmp_path):
    subjects = simulate_risk_subjects(400, SynthConfig(baseline_log_odds=-1.0), seed=10)
    cv = {"clinical": cv_risk_auroc(subjects, density_source="clinical"), "predicted": RiskModelError("quasi_separation")}
    ors = {"clinical": odds_ratios(fit_odds_model(subjects)), "predicted": RiskModelError("quasi_separation")}
    write_risk_report(cv, ors, tmp_path / "r.json", tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["auroc"]["predicted"] == {"error": "quasi_separation"}
    assert [r["covariate"] for r in doc["odds_ratios"]["clinical"]] == ["A", "B", "C", "D", "age"]
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "covariate,clinical_or,clinical_lower,clinical_upper"
    assert rows[2].startswith("B,1.0000,,")
