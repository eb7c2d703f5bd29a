"""Women, exams and outcomes: manifest ingestion, eligibility, labeling, splitting and matching."""

from __future__ import annotations

import csv
import dataclasses
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .density import DENSITIES

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = (
    "patient_id",
    "birth_year",
    "mammogram_date",
    "bus_date",
    "clinical_density",
    "bus_birads",
    "negative_screen",
    "four_views",
    "prior_cancer",
    "diagnosis_date",
    "image_dir",
)
IMAGE_SUFFIXES = (".png", ".pgm")

CASE_MIN_DAYS = 183
FOLLOWUP_YEARS = 5
MAX_MAMMO_BUS_GAP_DAYS = 365

# Exclusion reasons in evaluation order; criteria (a)-(e), criterion (b) has two parts.
EXCLUSION_REASONS = (
    "no_negative_screen",
    "bus_not_benign",
    "bus_gap_over_one_year",
    "missing_density",
    "missing_views",
    "prior_history",
)

SPLITS = ("train", "validation", "test")
MATCHING_KEYS = ("birth_year", "mammogram_year")


class ManifestError(ValueError):
    """The cohort manifest cannot be ingested."""


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    birth_year: int
    mammogram_date: date
    bus_date: date
    clinical_density: str | None
    bus_birads: int
    negative_screen: bool = True
    four_views: bool = True
    prior_cancer: bool = False
    diagnosis_date: date | None = None
    image_dir: str = ""
    image_ids: tuple[str, ...] = ()
    outcome: str | None = None
    inconsistent: bool = False

    def __post_init__(self):
        if self.clinical_density is not None and self.clinical_density not in DENSITIES:
            raise ValueError(f"{self.patient_id}: invalid density {self.clinical_density!r}")
        if self.outcome not in (None, "case", "control", "undetermined"):
            raise ValueError(f"{self.patient_id}: invalid outcome {self.outcome!r}")
        if self.outcome == "case":
            if self.diagnosis_date is None:
                raise ValueError(f"{self.patient_id}: case without diagnosis date")
            if not _in_case_window(self.bus_date, self.diagnosis_date):
                raise ValueError(f"{self.patient_id}: case diagnosis outside the 6-month to 5-year window")

    @property
    def age_at_bus(self) -> int:
        return self.bus_date.year - self.birth_year

    @property
    def mammogram_year(self) -> int:
        return self.mammogram_date.year

    def key(self, name: str) -> int:
        if name == "birth_year":
            return self.birth_year
        if name == "mammogram_year":
            return self.mammogram_year
        raise ValueError(f"unknown matching key {name!r}")


@dataclass(frozen=True)
class Rejection:
    row: int
    patient_id: str
    reason: str


@dataclass(frozen=True)
class Cohort:
    records: Mapping[str, PatientRecord]
    provenance: str = ""
    rejections: tuple[Rejection, ...] = ()

    def __post_init__(self):
        owner: dict[str, str] = {}
        for pid, rec in self.records.items():
            if pid != rec.patient_id:
                raise ValueError(f"record keyed as {pid!r} has patient_id {rec.patient_id!r}")
            for image_id in rec.image_ids:
                if image_id in owner:
                    raise ValueError(f"image {image_id!r} belongs to both {owner[image_id]} and {pid}")
                owner[image_id] = pid

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records.values())

    def __getitem__(self, patient_id: str) -> PatientRecord:
        return self.records[patient_id]

    def ids(self) -> list[str]:
        return sorted(self.records)

    def subset(self, patient_ids: Iterable[str]) -> "Cohort":
        keep = set(patient_ids)
        return dataclasses.replace(self, records={p: r for p, r in self.records.items() if p in keep})

    def image_owner(self) -> dict[str, str]:
        return {i: r.patient_id for r in self for i in r.image_ids}

    @classmethod
    def from_records(cls, records: Iterable[PatientRecord], provenance: str = "") -> "Cohort":
        out: dict[str, PatientRecord] = {}
        for rec in records:
            if rec.patient_id in out:
                raise ValueError(f"duplicate patient_id {rec.patient_id!r}")
            out[rec.patient_id] = rec
        return cls(records=out, provenance=provenance)


@dataclass
class ExclusionReport:
    counts: dict[str, int]
    excluded: list[tuple[str, str]] = field(default_factory=list)
    n_input: int = 0
    n_retained: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "reason"])
            w.writerows(self.excluded)


@dataclass(frozen=True)
class SplitAssignment:
    assignment: Mapping[str, str]
    seed: int
    fractions: tuple[float, ...]

    def members(self, split: str) -> list[str]:
        return sorted(p for p, s in self.assignment.items() if s == split)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "split"])
            for pid in sorted(self.assignment):
                w.writerow([pid, self.assignment[pid]])

    @classmethod
    def read_csv(cls, path, seed: int = 0, fractions: tuple[float, ...] = ()) -> "SplitAssignment":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls({r["patient_id"]: r["split"] for r in rows}, seed, fractions)


@dataclass(frozen=True)
class MatchedSet:
    pairs: Mapping[str, tuple[str, ...]]
    matching_key: str
    ratio: int
    # (case_id, control_id) -> |key(case) - key(control)|
    widening: Mapping[tuple[str, str], int] = field(default_factory=dict)

    @property
    def controls(self) -> list[str]:
        return sorted(c for cs in self.pairs.values() for c in cs)

    @property
    def cases(self) -> list[str]:
        return sorted(self.pairs)

    def patient_ids(self) -> list[str]:
        return sorted(set(self.cases) | set(self.controls))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "control_id", "key_distance", "matching_key"])
            for case in sorted(self.pairs):
                if not self.pairs[case]:
                    w.writerow([case, "", "", self.matching_key])
                for ctrl in self.pairs[case]:
                    w.writerow([case, ctrl, self.widening[(case, ctrl)], self.matching_key])

    @classmethod
    def read_csv(cls, path, ratio: int = 5) -> "MatchedSet":
        pairs: dict[str, list[str]] = {}
        widening = {}
        key = "birth_year"
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = row["matching_key"]
                controls = pairs.setdefault(row["case_id"], [])
                if row["control_id"]:
                    controls.append(row["control_id"])
                    widening[(row["case_id"], row["control_id"])] = int(row["key_distance"])
        return cls({c: tuple(v) for c, v in pairs.items()}, key, ratio, widening)


# --- ingestion ---------------------------------------------------------------------------


def _parse_date(text: str) -> date:
    return date.fromisoformat(text.strip())


def _parse_flag(text: str) -> bool:
    t = text.strip()
    if t not in ("0", "1"):
        raise ValueError(f"flag must be 0 or 1, got {text!r}")
    return t == "1"


def _list_images(image_dir: Path) -> tuple[str, ...]:
    if not image_dir.is_dir():
        return ()
    return tuple(sorted(p.stem for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES))


def _parse_row(row: dict, base: Path, resolve_images: bool) -> PatientRecord:
    """Build a record from one manifest row; raises (reason, message) on bad fields."""
    density = row["clinical_density"].strip().upper()
    if density == "":
        raise _RowError("missing_density")
    if density not in DENSITIES:
        raise _RowError("unknown_density")
    try:
        birth_year = int(row["birth_year"])
    except ValueError:
        raise _RowError("bad_birth_year") from None
    try:
        mammo = _parse_date(row["mammogram_date"])
        bus = _parse_date(row["bus_date"])
        dx = _parse_date(row["diagnosis_date"]) if row["diagnosis_date"].strip() else None
    except ValueError:
        raise _RowError("unparseable_date") from None
    try:
        birads = int(row["bus_birads"])
    except ValueError:
        raise _RowError("bad_birads") from None
    try:
        flags = [_parse_flag(row[c]) for c in ("negative_screen", "four_views", "prior_cancer")]
    except ValueError:
        raise _RowError("bad_flag") from None
    image_dir = row["image_dir"].strip()
    image_ids = _list_images(base / image_dir) if (resolve_images and image_dir) else ()
    return PatientRecord(
        patient_id=row["patient_id"].strip(),
        birth_year=birth_year,
        mammogram_date=mammo,
        bus_date=bus,
        clinical_density=density,
        bus_birads=birads,
        negative_screen=flags[0],
        four_views=flags[1],
        prior_cancer=flags[2],
        diagnosis_date=dx,
        image_dir=image_dir,
        image_ids=image_ids,
    )


class _RowError(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def ingest_cohort(manifest_path, resolve_images: bool = True) -> Cohort:
    """Read a cohort manifest CSV.

    Rows with unknown density codes, missing density or unparseable fields are
    kept on ``Cohort.rejections`` with a reason code. Repeated identical rows for
    one patient collapse to one record; conflicting repeats raise ManifestError.
    Image references are the file stems found under each row's ``image_dir``
    (relative to the manifest's directory).
    """
    path = Path(manifest_path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"manifest header mismatch; missing columns: {', '.join(missing)}")
        rows = list(reader)

    records: dict[str, PatientRecord] = {}
    rejections: list[Rejection] = []
    for lineno, row in enumerate(rows, start=2):
        pid = (row.get("patient_id") or "").strip()
        if not pid:
            rejections.append(Rejection(lineno, "", "missing_patient_id"))
            continue
        try:
            rec = _parse_row(row, path.parent, resolve_images)
        except _RowError as err:
            rejections.append(Rejection(lineno, pid, err.reason))
            continue
        prev = records.get(pid)
        if prev is not None:
            if prev != rec:
                raise ManifestError(f"duplicate patient_id {pid!r} with conflicting fields (line {lineno})")
            continue
        records[pid] = rec
    try:
        return Cohort(records=records, provenance=str(path), rejections=tuple(rejections))
    except ValueError as err:
        raise ManifestError(str(err)) from None


def write_rejections(cohort: Cohort, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "patient_id", "reason"])
        for r in cohort.rejections:
            w.writerow([r.row, r.patient_id, r.reason])


def write_manifest(records: Iterable[PatientRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            w.writerow([
                r.patient_id,
                r.birth_year,
                r.mammogram_date.isoformat(),
                r.bus_date.isoformat(),
                r.clinical_density or "",
                r.bus_birads,
                int(r.negative_screen),
                int(r.four_views),
                int(r.prior_cancer),
                r.diagnosis_date.isoformat() if r.diagnosis_date else "",
                r.image_dir,
            ])


# --- eligibility and outcomes ------------------------------------------------------------


def exclusion_reason(rec: PatientRecord) -> str | None:
    """First failing inclusion criterion, or None when the record is eligible."""
    if not rec.negative_screen:
        return "no_negative_screen"
    if rec.bus_birads not in (1, 2, 3):
        return "bus_not_benign"
    if abs((rec.bus_date - rec.mammogram_date).days) > MAX_MAMMO_BUS_GAP_DAYS:
        return "bus_gap_over_one_year"
    if rec.clinical_density is None:
        return "missing_density"
    if not rec.four_views:
        return "missing_views"
    if rec.prior_cancer:
        return "prior_history"
    return None


def apply_inclusion_criteria(cohort: Cohort) -> tuple[Cohort, ExclusionReport]:
    counts = {r: 0 for r in EXCLUSION_REASONS}
    excluded = []
    kept = {}
    for pid in cohort.ids():
        rec = cohort[pid]
        reason = exclusion_reason(rec)
        if reason is None:
            kept[pid] = rec
        else:
            counts[reason] += 1
            excluded.append((pid, reason))
    report = ExclusionReport(counts, excluded, n_input=len(cohort), n_retained=len(kept))
    return dataclasses.replace(cohort, records=kept), report


def add_years(d: date, years: int) -> date:
    try:
        return d.replace(year=d.year + years)
    except ValueError:  # 29 February
        return d.replace(year=d.year + years, day=28)


def _in_case_window(bus: date, dx: date) -> bool:
    return bus + timedelta(days=CASE_MIN_DAYS) <= dx <= add_years(bus, FOLLOWUP_YEARS)


def classify_outcome(bus: date, dx: date | None) -> tuple[str, bool]:
    """Return (outcome, inconsistent) for a BUS exam date and optional diagnosis date."""
    if dx is None:
        return "control", False
    if dx < bus:
        return "undetermined", True
    if dx > add_years(bus, FOLLOWUP_YEARS):
        return "control", False
    if dx < bus + timedelta(days=CASE_MIN_DAYS):
        return "undetermined", False
    return "case", False


def label_cases_controls(cohort: Cohort) -> Cohort:
    """Assign case/control/undetermined from diagnosis dates relative to the BUS exam.

    A diagnosis before the BUS exam marks the record ``inconsistent`` (and
    undetermined). Undetermined women must not enter risk modeling.
    """
    out = {}
    for pid, rec in cohort.records.items():
        outcome, bad = classify_outcome(rec.bus_date, rec.diagnosis_date)
        if bad:
            logger.warning("patient %s: diagnosis date precedes BUS exam", pid)
        out[pid] = dataclasses.replace(rec, outcome=outcome, inconsistent=bad)
    return dataclasses.replace(cohort, records=out)


# --- splitting ---------------------------------------------------------------------------


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of n items to the given fractions."""
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    rest = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def stratified_split(
    cohort: Cohort,
    fractions: Sequence[float] = (0.8, 0.2),
    seed: int = 0,
    strata: Mapping[str, str] | None = None,
) -> SplitAssignment:
    """Partition women into train/validation[/test], stratified by clinical density.

    Within each stratum the allocation is the largest-remainder rounding of
    ``fraction * n``, so every split is within one woman of its target. A
    stratum with fewer women than splits goes entirely to train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) not in (2, 3) or any(f < 0 for f in fractions):
        raise ValueError("fractions must be 2 or 3 non-negative proportions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    if len(cohort) == 0:
        raise ValueError("cannot split an empty cohort")
    if strata is None:
        strata = {r.patient_id: r.clinical_density or "" for r in cohort}

    rng = np.random.default_rng(seed)
    by_stratum: dict[str, list[str]] = {}
    for pid in cohort.ids():
        by_stratum.setdefault(strata[pid], []).append(pid)

    assignment = {}
    for stratum in sorted(by_stratum):
        members = by_stratum[stratum]
        perm = [members[i] for i in rng.permutation(len(members))]
        if len(members) < len(fractions):
            warnings.warn(f"stratum {stratum!r} has {len(members)} women; all assigned to train", stacklevel=2)
            counts = [len(members)] + [0] * (len(fractions) - 1)
        else:
            counts = _allocate(len(members), fractions)
        start = 0
        for split, k in zip(SPLITS, counts):
            for pid in perm[start:start + k]:
                assignment[pid] = split
            start += k
    return SplitAssignment(assignment, seed, fractions)


# --- case-control matching ---------------------------------------------------------------


def match_case_control(
    cohort: Cohort,
    ratio: int = 5,
    key: str = "birth_year",
    seed: int = 0,
    max_widening: int = 5,
) -> MatchedSet:
    """Sample up to ``ratio`` controls per case without replacement.

    Controls are drawn from those with an identical key first; if the exact
    pool runs short, the window widens one year at a time (|difference| = 1,
    then 2, ...) up to ``max_widening``. Cases are processed in a seeded
    random order so that pool depletion is not biased by patient_id.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    if key not in MATCHING_KEYS:
        raise ValueError(f"unknown matching key {key!r}")
    cases = sorted(r.patient_id for r in cohort if r.outcome == "case")
    pool: dict[int, list[str]] = {}
    for r in sorted(cohort, key=lambda r: r.patient_id):
        if r.outcome == "control":
            pool.setdefault(r.key(key), []).append(r.patient_id)
    if not cases:
        warnings.warn("no cases in cohort; matched set is empty", stacklevel=2)
        return MatchedSet({}, key, ratio, {})

    rng = np.random.default_rng(seed)
    pairs: dict[str, tuple[str, ...]] = {}
    widening: dict[tuple[str, str], int] = {}
    for ci in rng.permutation(len(cases)):
        case = cases[ci]
        k0 = cohort[case].key(key)
        chosen: list[str] = []
        for w in range(max_widening + 1):
            need = ratio - len(chosen)
            if need == 0:
                break
            keys = [k0] if w == 0 else [k0 - w, k0 + w]
            candidates = [(k, p) for k in keys for p in pool.get(k, [])]
            if not candidates:
                continue
            take = min(need, len(candidates))
            picked = [candidates[i] for i in sorted(rng.choice(len(candidates), size=take, replace=False))]
            for k, p in picked:
                pool[k].remove(p)
                chosen.append(p)
                widening[(case, p)] = w
            if w > 0:
                logger.info("case %s: widened %s window to +/-%d for %d control(s)", case, key, w, take)
        if len(chosen) < ratio:
            logger.warning("case %s: only %d of %d controls available", case, len(chosen), ratio)
        pairs[case] = tuple(chosen)
    return MatchedSet(pairs, key, ratio, widening)


def development_and_test(cohort: Cohort, matched: MatchedSet) -> tuple[Cohort, Cohort]:
    """Split the eligible cohort into the matched test set and the remaining development pool."""
    test_ids = set(matched.patient_ids())
    dev = [p for p in cohort.ids() if p not in test_ids]
    return cohort.subset(dev), cohort.subset(test_ids)


def density_counts(cohort: Cohort) -> dict[str, int]:
    c = Counter(r.clinical_density for r in cohort)
    return {d: c.get(d, 0) for d in DENSITIES}
