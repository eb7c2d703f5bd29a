"""Five-year cancer-risk logistic models from age and density."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .density import DENSITIES, N_CLASSES, check_distribution, one_hot
from .evaluation import AucCI, delong_ci

DENSITY_SOURCES = ("clinical", "predicted", "age_only")
WALD_Z = 1.96
SEPARATION_LIMIT = 30.0
SEPARATION_SE_LIMIT = 100.0  # an SE this large on the log-odds scale only arises from separation


class RiskModelError(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class RiskSubject:
    """One woman in the risk cohort. ``predicted`` is her aggregated density distribution, if any."""

    patient_id: str
    age: float
    clinical_density: int
    outcome: int
    predicted: np.ndarray | None = None


def standardize_age(ages) -> tuple[np.ndarray, float, float]:
    """z-scores with the sample (n - 1) standard deviation; returns (z, mean, sd)."""
    a = np.asarray(ages, dtype=np.float64)
    if a.size < 2 or np.unique(a).size < 2:
        raise ValueError("age standardization needs at least two distinct ages")
    mean = float(a.mean())
    sd = float(a.std(ddof=1))
    return (a - mean) / sd, mean, sd


def simulate_density_draws(dist, n: int = 100, seed=0) -> np.ndarray:
    """``n`` independent categorical draws (class indices) from a density distribution."""
    p = check_distribution(dist)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = np.clip(p, 0.0, None)
    return rng.choice(N_CLASSES, size=n, p=p / p.sum())


def design_matrix(age_std, density=None, reference: str = "B") -> tuple[np.ndarray, list[str]]:
    """Intercept, standardized age and density indicators with ``reference`` dropped.

    ``density`` is an (n, 4) array of indicator weights: one-hot rows for
    observed classes, or probability rows for expected-indicator scoring.
    """
    age_std = np.asarray(age_std, dtype=np.float64)
    cols = [np.ones_like(age_std), age_std]
    names = ["intercept", "age"]
    if density is not None:
        density = np.asarray(density, dtype=np.float64)
        ref = DENSITIES.index(reference)
        for k, name in enumerate(DENSITIES):
            if k != ref:
                cols.append(density[:, k])
                names.append(name)
    return np.column_stack(cols), names


@dataclass(eq=False)
class RiskModel:
    coef: np.ndarray
    cov: np.ndarray
    names: list[str]
    reference: str = "B"
    n_iter: int = 0
    converged: bool = True
    loglik: float = float("nan")
    n_obs: int = 0

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def linear_predictor(self, X) -> np.ndarray:
        return np.asarray(X) @ self.coef

    def predict_risk(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.linear_predictor(X)))


def _collinear_column(X: np.ndarray, names: Sequence[str]) -> str | None:
    rank = 0
    for j in range(X.shape[1]):
        r = np.linalg.matrix_rank(X[:, : j + 1])
        if r == rank:
            return names[j]
        rank = r
    return None


def _loglik(X, y, beta) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_risk_model(X, y, names: Sequence[str], reference: str = "B", tol: float = 1e-8, max_iter: int = 100) -> RiskModel:
    """Maximum-likelihood logistic regression by Newton-Raphson with step halving.

    Iterates until the max-norm of the score (log-likelihood gradient) is below
    ``tol``. The covariance is the inverse observed information at the optimum.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ValueError("design matrix and outcome differ in length")
    if np.unique(y).size < 2:
        raise RiskModelError("single_outcome", "both cases and controls are required")
    bad = _collinear_column(X, names)
    if bad is not None:
        raise RiskModelError("rank_deficient", f"column {bad!r} is collinear with earlier columns")

    beta = np.zeros(X.shape[1])
    ll = _loglik(X, y, beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(X @ beta)))
        grad = X.T @ (y - p)
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        H = (X * (p * (1 - p))[:, None]).T @ X
        step = np.linalg.solve(H, grad)
        scale = 1.0
        while True:
            cand = beta + scale * step
            ll_new = _loglik(X, y, cand)
            if ll_new >= ll - 1e-12 * abs(ll) or scale < 1e-10:
                break
            scale *= 0.5
        if np.max(np.abs(cand - beta)) < 1e-15 * (1 + np.max(np.abs(beta))):
            converged = True
            beta = cand
            break
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > SEPARATION_LIMIT:
            raise RiskModelError("quasi_separation", f"coefficient magnitude exceeded {SEPARATION_LIMIT}")
    if not converged:
        warnings.warn(f"risk model did not reach |score| < {tol} in {max_iter} iterations", stacklevel=2)
    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    H = (X * (p * (1 - p))[:, None]).T @ X
    cov = np.linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if np.max(np.abs(beta)) > SEPARATION_LIMIT or np.max(se) > SEPARATION_SE_LIMIT:
        worst = names[int(np.argmax(se))]
        raise RiskModelError("quasi_separation", f"coefficient for {worst!r} is not identifiable (outcome separated)")
    return RiskModel(beta, cov, list(names), reference, it, converged, _loglik(X, y, beta), X.shape[0])


@dataclass(frozen=True)
class OddsRatio:
    covariate: str
    odds_ratio: float
    lower: float | None
    upper: float | None
    reference: bool = False


def odds_ratios(model: RiskModel, z: float = WALD_Z) -> list[OddsRatio]:
    """exp(beta) with Wald intervals exp(beta +/- z*SE), ordered A, B, C, D, age."""
    se = model.se
    by_name = {n: i for i, n in enumerate(model.names)}
    has_density = any(d in by_name for d in DENSITIES)
    rows = []
    for name in (list(DENSITIES) if has_density else []) + ["age"]:
        if name not in by_name:
            if name == model.reference:
                rows.append(OddsRatio(name, 1.0, None, None, reference=True))
            continue
        b, s = model.coef[by_name[name]], se[by_name[name]]
        rows.append(OddsRatio(name, math.exp(b), math.exp(b - z * s), math.exp(b + z * s)))
    return rows


# --- cross-validated risk AUROC -------------------------------------------------------------


def assign_folds(outcomes, folds: int, seed) -> np.ndarray:
    """Fold index per woman, shuffled within each outcome class and dealt round-robin."""
    outcomes = np.asarray(outcomes)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(outcomes.size, dtype=np.int64)
    offset = 0
    for cls in (0, 1):
        idx = np.flatnonzero(outcomes == cls)
        idx = idx[rng.permutation(idx.size)]
        fold_of[idx] = (np.arange(idx.size) + offset) % folds
        offset += idx.size
    return fold_of


def _density_weights(subjects: Sequence[RiskSubject], source: str) -> np.ndarray | None:
    if source == "age_only":
        return None
    if source == "clinical":
        return one_hot([s.clinical_density for s in subjects])
    if any(s.predicted is None for s in subjects):
        raise ValueError("predicted density source needs a predicted distribution for every woman")
    return np.vstack([check_distribution(s.predicted) for s in subjects])


def training_rows(subjects, source: str, age_mean: float, age_sd: float, draws: int, rng, reference="B"):
    """Design rows for fitting: ``draws`` simulated densities per woman when source is predicted."""
    ages = np.array([s.age for s in subjects], dtype=np.float64)
    y = np.array([s.outcome for s in subjects], dtype=np.float64)
    z = (ages - age_mean) / age_sd
    if source == "predicted":
        sampled = np.concatenate([simulate_density_draws(s.predicted, draws, rng) for s in subjects])
        X, names = design_matrix(np.repeat(z, draws), one_hot(sampled), reference)
        return X, np.repeat(y, draws), names
    X, names = design_matrix(z, _density_weights(subjects, source), reference)
    return X, y, names


@dataclass
class CvRiskResult:
    density_source: str
    ci: AucCI
    scores: np.ndarray
    outcomes: np.ndarray
    fold_of: np.ndarray
    patient_ids: list[str]
    fold_models: list[RiskModel] = field(default_factory=list)


def cv_risk_auroc(
    subjects: Sequence[RiskSubject],
    folds: int = 3,
    seed: int = 0,
    density_source: str = "predicted",
    draws: int = 100,
    alpha: float = 0.05,
    reference: str = "B",
) -> CvRiskResult:
    """Cross-validated AUROC of age(+density) logistic risk scores, split by woman.

    Each fold fits on the other folds' women (simulated rows for predicted
    density) with age standardized on those training women, then scores its
    held-out women by the linear predictor, using their expected indicators
    (the predicted distribution) or clinical one-hot. Pooled held-out scores
    give the AUROC and its DeLong interval.
    """
    if density_source not in DENSITY_SOURCES:
        raise ValueError(f"unknown density source {density_source!r}")
    subjects = sorted(subjects, key=lambda s: s.patient_id)
    y = np.array([s.outcome for s in subjects], dtype=np.int64)
    fold_of = assign_folds(y, folds, np.random.SeedSequence([seed, 0]))
    scores = np.empty(len(subjects))
    models = []
    for f in range(folds):
        train = [s for s, k in zip(subjects, fold_of) if k != f]
        test_idx = np.flatnonzero(fold_of == f)
        test = [subjects[i] for i in test_idx]
        if len({s.outcome for s in train}) < 2 or len({s.outcome for s in test}) < 2:
            raise RiskModelError("single_outcome_fold", f"fold {f} has a single outcome class")
        _, mean, sd = standardize_age([s.age for s in train])
        rng = np.random.default_rng([seed, 1, f])
        X, yt, names = training_rows(train, density_source, mean, sd, draws, rng, reference)
        model = fit_risk_model(X, yt, names, reference)
        z = (np.array([s.age for s in test]) - mean) / sd
        Xt, _ = design_matrix(z, _density_weights(test, density_source), reference)
        scores[test_idx] = model.linear_predictor(Xt)
        models.append(model)
    ci = delong_ci(scores, y, alpha)
    return CvRiskResult(density_source, ci, scores, y, fold_of, [s.patient_id for s in subjects], models)


def fit_odds_model(subjects: Sequence[RiskSubject], density_source: str = "clinical", seed: int = 0, reference="B") -> RiskModel:
    """One model on all women for odds-ratio reporting; predicted density uses a single draw per woman."""
    if density_source not in DENSITY_SOURCES:
        raise ValueError(f"unknown density source {density_source!r}")
    subjects = sorted(subjects, key=lambda s: s.patient_id)
    _, mean, sd = standardize_age([s.age for s in subjects])
    rng = np.random.default_rng([seed, 2])
    X, y, names = training_rows(subjects, density_source, mean, sd, 1, rng, reference)
    return fit_risk_model(X, y, names, reference)


# --- reporting -------------------------------------------------------------------------------


def write_risk_report(cv_results: dict, or_tables: dict, json_path, csv_path) -> None:
    """JSON with AUROC lines and OR tables; CSV shaped like an OR table (rows A-D + age, one column set per source)."""
    doc = {"auroc": {}, "odds_ratios": {}}
    for src, res in cv_results.items():
        if isinstance(res, CvRiskResult):
            doc["auroc"][src] = {"auc": res.ci.auc, "lower": res.ci.lower, "upper": res.ci.upper,
                                 "n": int(res.outcomes.size), "cases": int(res.outcomes.sum())}
        else:
            doc["auroc"][src] = {"error": str(res)}
    for src, rows in or_tables.items():
        if isinstance(rows, list):
            doc["odds_ratios"][src] = [
                {"covariate": r.covariate, "or": r.odds_ratio, "lower": r.lower, "upper": r.upper,
                 "reference": r.reference} for r in rows
            ]
        else:
            doc["odds_ratios"][src] = {"error": str(rows)}
    with open(json_path, "w") as fh:
        json.dump(_round(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")

    sources = [s for s in or_tables if isinstance(or_tables[s], list)]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate"] + [f"{s}_{c}" for s in sources for c in ("or", "lower", "upper")])
        for cov in list(DENSITIES) + ["age"]:
            row = [cov]
            for s in sources:
                hit = [r for r in or_tables[s] if r.covariate == cov]
                if not hit:
                    row += ["", "", ""]
                    continue
                r = hit[0]
                row += [f"{r.odds_ratio:.4f}", "" if r.lower is None else f"{r.lower:.4f}",
                        "" if r.upper is None else f"{r.upper:.4f}"]
            w.writerow(row)


def _round(obj):
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v) for v in obj]
    if isinstance(obj, float):
        return round(obj, 12)
    return obj
