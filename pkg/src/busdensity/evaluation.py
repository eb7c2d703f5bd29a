"""Patient-level aggregation and evaluation statistics.

AUROC is computed from midranks (Mann-Whitney U); its variance follows
DeLong's structural components in the sort-based form of Sun & Xu (2014).
Kendall's tau-b uses Knight's O(n log n) merge-sort count.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Mapping, Sequence

import numpy as np

from .density import DENSITIES, N_CLASSES, argmax_class, check_distribution, one_hot


class DegenerateLabelsError(ValueError):
    """Labels do not contain both classes (or enough of each) for the requested statistic."""


# --- aggregation -------------------------------------------------------------------------


def aggregate_mean(probs) -> np.ndarray:
    """Component-wise mean of one patient's per-image distributions."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if p.shape[0] == 0:
        raise ValueError("cannot aggregate zero images")
    check_distribution(p)
    return p.mean(axis=0)


def aggregate_vote_round(probs) -> int:
    """Mean of per-image argmax classes (A=0..D=3), rounded half away from zero."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if p.shape[0] == 0:
        raise ValueError("cannot aggregate zero images")
    votes = argmax_class(p)
    s, k = int(votes.sum()), votes.size
    # floor(s/k + 1/2) in integers; s/k >= 0 so this is half-away-from-zero
    return int(min(max((2 * s + k) // (2 * k), 0), N_CLASSES - 1))


def group_by_patient(patient_ids: Sequence[str], probs) -> tuple[list[str], np.ndarray, list[int]]:
    """Mean-aggregate rows per patient; returns (sorted patient ids, (m, 4) means, image counts)."""
    probs = np.asarray(probs, dtype=np.float64)
    rows: dict[str, list[int]] = {}
    for i, pid in enumerate(patient_ids):
        rows.setdefault(pid, []).append(i)
    ids = sorted(rows)
    means = np.array([aggregate_mean(probs[rows[p]]) for p in ids]).reshape(-1, N_CLASSES)
    return ids, means, [len(rows[p]) for p in ids]


def vote_by_patient(patient_ids: Sequence[str], probs) -> dict[str, int]:
    probs = np.asarray(probs, dtype=np.float64)
    rows: dict[str, list[int]] = {}
    for i, pid in enumerate(patient_ids):
        rows.setdefault(pid, []).append(i)
    return {p: aggregate_vote_round(probs[idx]) for p, idx in sorted(rows.items())}


# --- rank statistics ---------------------------------------------------------------------


def midranks(x) -> np.ndarray:
    """1-based ranks with ties given the average of their positions."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = xs.size
    boundaries = np.flatnonzero(np.concatenate(([True], xs[1:] != xs[:-1], [True])))
    a, b = boundaries[:-1], boundaries[1:]
    ranks_sorted = np.repeat(0.5 * (a + b - 1) + 1.0, b - a)
    out = np.empty(n, dtype=np.float64)
    out[order] = ranks_sorted
    return out


def _split_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite scores")
    pos = y.astype(bool)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary 0/1")
    return s, pos


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count one half)."""
    s, pos = _split_labels(scores, labels)
    n1 = int(pos.sum())
    n0 = pos.size - n1
    if n1 == 0 or n0 == 0:
        raise DegenerateLabelsError("degenerate labels: both classes are required")
    # Twice the U statistic is an exact integer: sum of doubled midranks minus n1(n1+1).
    r2 = 2.0 * midranks(s)[pos].sum()
    return (r2 - n1 * (n1 + 1)) / (2.0 * n1 * n0)


@dataclass(frozen=True)
class AucCI:
    auc: float
    lower: float
    upper: float
    variance: float
    n_pos: int
    n_neg: int

    def as_tuple(self) -> tuple[float, float, float]:
        return self.auc, self.lower, self.upper


def delong_components(scores, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """AUC and the structural components V10 (per positive) and V01 (per negative)."""
    s, pos = _split_labels(scores, labels)
    x, y = s[pos], s[~pos]
    m, n = x.size, y.size
    if m == 0 or n == 0:
        raise DegenerateLabelsError("degenerate labels: both classes are required")
    tz = midranks(np.concatenate([x, y]))
    tx, ty = midranks(x), midranks(y)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    return auroc(s, pos), v10, v01


def delong_variance(scores, labels) -> tuple[float, float]:
    auc, v10, v01 = delong_components(scores, labels)
    if v10.size < 2 or v01.size < 2:
        raise DegenerateLabelsError("DeLong variance needs at least 2 positives and 2 negatives")
    var = np.var(v10, ddof=1) / v10.size + np.var(v01, ddof=1) / v01.size
    return auc, float(var)


def delong_ci(scores, labels, alpha: float = 0.05) -> AucCI:
    """AUROC with a normal-approximation DeLong interval clamped to [0, 1]."""
    _, pos = _split_labels(scores, labels)
    auc, var = delong_variance(scores, labels)
    z = NormalDist().inv_cdf(1 - alpha / 2)
    half = z * math.sqrt(max(var, 0.0))
    return AucCI(auc, max(0.0, auc - half), min(1.0, auc + half), var, int(pos.sum()), int((~pos).sum()))


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) for every distinct score, from the strictest threshold down."""
    s, pos = _split_labels(scores, labels)
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise DegenerateLabelsError("degenerate labels: both classes are required")
    order = np.argsort(-s, kind="mergesort")
    ss, pp = s[order], pos[order]
    last = np.flatnonzero(np.concatenate((ss[1:] != ss[:-1], [True])))
    tp = np.cumsum(pp)[last]
    fp = (last + 1) - tp
    fpr = np.concatenate(([0.0], fp / n0))
    tpr = np.concatenate(([0.0], tp / n1))
    thr = np.concatenate(([np.inf], ss[last]))
    return fpr, tpr, thr


def _merge_count(a: list) -> tuple[list, int]:
    """Sort ``a`` and count strict inversions (pairs i < j with a[i] > a[j])."""
    n = len(a)
    if n < 2:
        return a, 0
    mid = n // 2
    left, inv_l = _merge_count(a[:mid])
    right, inv_r = _merge_count(a[mid:])
    merged = []
    inv = inv_l + inv_r
    i = j = 0
    while i < len(left) and j < len(right):
        if right[j] < left[i]:
            merged.append(right[j])
            inv += len(left) - i
            j += 1
        else:
            merged.append(left[i])
            i += 1
    merged.extend(left[i:])
    merged.extend(right[j:])
    return merged, inv


def _tie_pairs(values) -> int:
    """Number of tied pairs; rows of a 2-D array tie when they are equal in every column."""
    _, counts = np.unique(values, axis=0, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def kendall_tau_b(x, y) -> float:
    """Kendall's tau-b with tie correction in both variables."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    n = x.size
    if n < 2:
        raise ValueError("need at least 2 observations")
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(x)
    n2 = _tie_pairs(y)
    if n0 == n1 or n0 == n2:
        raise DegenerateLabelsError("tau-b undefined: all values tied in x or y")
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    joint = _tie_pairs(np.stack([xs, ys], axis=1))
    # y sorted within tied x, so inversions are exactly the discordant pairs
    _, discordant = _merge_count(ys.tolist())
    concordant_minus_discordant = n0 - n1 - n2 + joint - 2 * discordant
    return concordant_minus_discordant / math.sqrt((n0 - n1) * (n0 - n2))


# --- multi-class AUROCs -------------------------------------------------------------------


def _truth_onehot(truth) -> np.ndarray:
    return one_hot(np.asarray(truth, dtype=np.int64), N_CLASSES)


def micro_ovr_auroc(probs, truth) -> float:
    """Pool all (p_k, truth == k) pairs over instances and classes into one binary AUROC."""
    probs = check_distribution(np.atleast_2d(probs))
    truth = np.asarray(truth, dtype=np.int64)
    if np.unique(truth).size < 2:
        raise DegenerateLabelsError("degenerate labels: micro AUROC needs >= 2 density classes")
    return auroc(probs.ravel(), _truth_onehot(truth).ravel())


def micro_ovr_delong(probs, truth, alpha: float = 0.05) -> AucCI:
    """DeLong interval on the pooled pairs, treating the 4 rows of an instance as independent."""
    probs = check_distribution(np.atleast_2d(probs))
    truth = np.asarray(truth, dtype=np.int64)
    if np.unique(truth).size < 2:
        raise DegenerateLabelsError("degenerate labels: micro AUROC needs >= 2 density classes")
    return delong_ci(probs.ravel(), _truth_onehot(truth).ravel(), alpha)


# --- report ------------------------------------------------------------------------------


@dataclass
class PredictionSet:
    image_ids: list[str]
    patient_ids: list[str]
    probs: np.ndarray
    truth: Mapping[str, int]  # patient_id -> density index
    tags: Mapping[str, Mapping[str, str]] = field(default_factory=dict)  # tag -> patient_id -> value

    def __post_init__(self):
        self.probs = check_distribution(np.atleast_2d(np.asarray(self.probs, dtype=np.float64)).reshape(-1, 4))
        if not (len(self.image_ids) == len(self.patient_ids) == self.probs.shape[0]):
            raise ValueError("image ids, patient ids and probabilities must align")
        missing = sorted(set(self.patient_ids) - set(self.truth))
        if missing:
            raise ValueError(f"patients without ground-truth density: {missing[:5]}")

    def restrict(self, patients) -> "PredictionSet":
        keep = set(patients)
        idx = [i for i, p in enumerate(self.patient_ids) if p in keep]
        return PredictionSet(
            [self.image_ids[i] for i in idx], [self.patient_ids[i] for i in idx],
            self.probs[idx], self.truth, self.tags,
        )

    def level_view(self, level: str) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
        """(row patient ids, probs, truth indices, vote classes) at image or patient level."""
        if level == "image":
            truth = np.array([self.truth[p] for p in self.patient_ids], dtype=np.int64)
            return list(self.patient_ids), self.probs, truth, argmax_class(self.probs)
        if level == "patient":
            ids, means, _ = group_by_patient(self.patient_ids, self.probs)
            votes = vote_by_patient(self.patient_ids, self.probs)
            truth = np.array([self.truth[p] for p in ids], dtype=np.int64)
            return ids, means, truth, np.array([votes[p] for p in ids], dtype=np.int64)
        raise ValueError(f"unknown level {level!r}")


@dataclass
class EvalCell:
    n: int
    classes_present: list[str]
    micro: AucCI | None = None
    per_class: dict[str, AucCI | None] = field(default_factory=dict)
    dense_vs_nondense: AucCI | None = None
    kendall_tau_b: float | None = None
    estimable: bool = True
    note: str = ""


@dataclass
class EvalReport:
    level: str
    overall: EvalCell
    subgroups: dict[str, dict[str, EvalCell]] = field(default_factory=dict)
    model: str = ""

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return round(float(obj), 12)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _safe_ci(scores, labels, alpha) -> AucCI | None:
    y = np.asarray(labels)
    if y.sum() < 2 or (y.size - y.sum()) < 2:
        return None
    return delong_ci(scores, y, alpha)


def evaluate_cell(probs, truth, votes, alpha: float = 0.05) -> EvalCell:
    truth = np.asarray(truth, dtype=np.int64)
    present = [DENSITIES[k] for k in np.unique(truth)]
    cell = EvalCell(n=int(truth.size), classes_present=present)
    if len(present) < 2:
        cell.estimable = False
        cell.note = "not estimable: fewer than 2 density classes"
        return cell
    cell.micro = micro_ovr_delong(probs, truth, alpha)
    for k, name in enumerate(DENSITIES):
        cell.per_class[name] = _safe_ci(probs[:, k], (truth == k).astype(int), alpha)
    cell.dense_vs_nondense = _safe_ci(probs[:, 2] + probs[:, 3], (truth >= 2).astype(int), alpha)
    try:
        cell.kendall_tau_b = kendall_tau_b(truth, votes)
    except DegenerateLabelsError:
        cell.kendall_tau_b = None
    return cell


def evaluate(
    preds: PredictionSet,
    level: str = "patient",
    subgroups: Sequence[str] = (),
    alpha: float = 0.05,
    model: str = "",
) -> EvalReport:
    """Micro, per-class and dense-vs-non-dense AUROCs with DeLong CIs, plus tau-b, overall and per subgroup.

    Patient level averages each woman's image distributions (tau-b then uses
    the rounded mean of argmax votes); image level treats each image as a row.
    """
    if len(preds.image_ids) == 0:
        raise ValueError("empty prediction set")
    ids, probs, truth, votes = preds.level_view(level)
    if np.unique(truth).size < 2:
        raise DegenerateLabelsError("degenerate labels: predictions cover a single density class")
    report = EvalReport(level=level, overall=evaluate_cell(probs, truth, votes, alpha), model=model)
    for tag in subgroups:
        values = preds.tags.get(tag)
        if values is None:
            raise KeyError(f"unknown subgroup tag {tag!r}")
        row_vals = np.array([values.get(p, "") for p in ids], dtype=object)
        report.subgroups[tag] = {}
        for v in sorted(set(row_vals.tolist())):
            m = row_vals == v
            report.subgroups[tag][str(v)] = evaluate_cell(probs[m], truth[m], votes[m], alpha)
    return report


TABLE_COLUMNS = (
    ["model", "level", "subgroup", "value", "n", "micro_auc", "micro_lower", "micro_upper"]
    + [f"{d}_{s}" for d in DENSITIES for s in ("auc", "lower", "upper")]
    + ["dense_auc", "dense_lower", "dense_upper", "kendall_tau_b"]
)


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def _cell_row(model, level, subgroup, value, cell: EvalCell) -> list[str]:
    def ci(c):
        return ["", "", ""] if c is None else [_fmt(c.auc), _fmt(c.lower), _fmt(c.upper)]

    row = [model, level, subgroup, value, str(cell.n)] + ci(cell.micro)
    for d in DENSITIES:
        row += ci(cell.per_class.get(d))
    return row + ci(cell.dense_vs_nondense) + [_fmt(cell.kendall_tau_b)]


def write_table_csv(reports: Sequence[EvalReport], path) -> None:
    """Table-2 style rows: model x level (x subgroup), overall micro and per-class AUROC with CI."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in reports:
            w.writerow(_cell_row(r.model, r.level, "overall", "", r.overall))
            for tag in sorted(r.subgroups):
                for value, cell in sorted(r.subgroups[tag].items()):
                    w.writerow(_cell_row(r.model, r.level, tag, value, cell))


def write_roc_csv(probs, truth, path, label: str = "") -> None:
    """Micro-pooled ROC points for plotting."""
    probs = np.atleast_2d(probs)
    fpr, tpr, thr = roc_points(probs.ravel(), _truth_onehot(truth).ravel())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "threshold", "fpr", "tpr"])
        for t, f, tp in zip(thr, fpr, tpr):
            w.writerow([label, "inf" if np.isinf(t) else f"{t:.12g}", f"{f:.12g}", f"{tp:.12g}"])
