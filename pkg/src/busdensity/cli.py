"""Command-line pipeline: synth -> clean -> featurize -> match -> split -> train -> predict -> aggregate -> evaluate -> risk.

Every stage reads its predecessors' artifacts from the run directory (``--out``)
and writes its own, plus ``meta/<stage>.json``. Exit status is 0 on success,
1 on validation errors (bad config, missing or mismatched inputs, degenerate
labels) and 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .classifiers import (
    ModelFileError, load_model, predict_proba, read_predictions, save_model, train_forest, train_logreg,
    train_mlp, write_predictions,
)
from .cohort import (
    IMAGE_SUFFIXES, ManifestError, MatchedSet, SplitAssignment, apply_inclusion_criteria, development_and_test, ingest_cohort,
    label_cases_controls, match_case_control, stratified_split, write_rejections,
)
from .config import ConfigError, RunConfig
from .density import DENSITIES, one_hot
from .evaluation import (
    DegenerateLabelsError, PredictionSet, evaluate, group_by_patient, vote_by_patient, write_roc_csv,
    write_table_csv,
)
from .features import feature_matrix, gray_level_histogram, read_features, write_features
from .imaging import CleaningVerdict, ImageError, clean_image, load_image, save_png, write_cleaning_log
from .risk import (
    DENSITY_SOURCES, RiskModelError, RiskSubject, cv_risk_auroc, fit_odds_model, odds_ratios, write_risk_report,
)
from .synth import generate_cohort

logger = logging.getLogger("busdensity")

STAGES = ("synth", "clean", "featurize", "match", "split", "train", "predict", "aggregate", "evaluate", "risk", "report")
PATIENT_COLUMNS = (
    "patient_id", "birth_year", "mammogram_year", "age_at_bus", "clinical_density", "bus_birads",
    "outcome", "inconsistent", "n_images",
)
IMAGE_MAP_COLUMNS = ("image_id", "patient_id", "source_id")
PATIENT_PREDICTION_COLUMNS = ("patient_id", "pA", "pB", "pC", "pD", "n_images", "vote_class")


class StageInputError(ValueError):
    """A stage's input artifact is missing or does not match the expected schema."""


VALIDATION_ERRORS = (
    ConfigError, StageInputError, DegenerateLabelsError, ManifestError, ModelFileError, ImageError,
)


# --- helpers -------------------------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BUSDENSITY_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    items = list(items)
    if _threads() > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageInputError(f"{path} not found; run the '{stage}' stage first")
    return path


def _read_rows(path: Path, columns) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise StageInputError(f"{path}: schema mismatch, missing columns {missing}")
        return list(reader)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _rel(path: Path, out) -> str:
    try:
        return Path(path).resolve().relative_to(Path(out).resolve()).as_posix()
    except ValueError:
        return Path(path).name


def _write_meta(cfg: RunConfig, stage: str, inputs: list[Path], outputs: list[Path]) -> None:
    meta = {
        "stage": stage,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "versions": {"busdensity": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "inputs": {_rel(p, cfg.out): _sha256(p) for p in inputs if p.is_file()},
        "outputs": sorted(_rel(p, cfg.out) for p in outputs),
    }
    d = Path(cfg.out) / "meta"
    d.mkdir(parents=True, exist_ok=True)
    with open(d / f"{stage}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _patients(out: Path) -> dict[str, dict]:
    rows = _read_rows(_need(out / "clean" / "patients.csv", "clean"), PATIENT_COLUMNS)
    return {r["patient_id"]: r for r in rows}


def _age_bin(age: int) -> str:
    if age < 40:
        return "<40"
    if age >= 70:
        return "70+"
    lo = (age // 10) * 10
    return f"{lo}-{lo + 9}"


# --- stages --------------------------------------------------------------------------------


def stage_synth(cfg: RunConfig) -> None:
    out = Path(cfg.out) / "synth"
    if out.exists():
        shutil.rmtree(out)
    sc = generate_cohort(cfg.synth_config())
    paths = sc.write(out)
    logger.info("synthetic cohort: %d women, %d images", len(sc.cohort), len(sc.image_specs))
    _write_meta(cfg, "synth", [], [paths["manifest"], paths["truth"]])


def _eligible_cohort(cfg: RunConfig):
    manifest = cfg.manifest_path()
    if not manifest.is_file():
        raise StageInputError(f"manifest not found: {manifest}")
    cohort = ingest_cohort(manifest)
    eligible, report = apply_inclusion_criteria(cohort)
    return cohort, label_cases_controls(eligible), report


def stage_clean(cfg: RunConfig) -> None:
    out = Path(cfg.out) / "clean"
    manifest = cfg.manifest_path()
    cohort, labeled, report = _eligible_cohort(cfg)
    if out.exists():
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True)
    write_rejections(cohort, out / "rejections.csv")
    report.write_csv(out / "exclusions.csv")

    ccfg = cfg.cleaning_config()
    jobs = sorted(
        (image_id, rec.patient_id, manifest.parent / rec.image_dir) for rec in labeled for image_id in rec.image_ids
    )

    def run(job):
        image_id, pid, src = job
        path = next((src / f"{image_id}{ext}" for ext in IMAGE_SUFFIXES if (src / f"{image_id}{ext}").exists()), None)
        if path is None:
            return CleaningVerdict("invalid", "missing_file")
        try:
            img = load_image(path, image_id=image_id, patient_id=pid)
        except ImageError as err:
            logger.warning("image %s unreadable (%s); logged as invalid", image_id, err.reason)
            return CleaningVerdict("invalid", err.reason)
        verdict = clean_image(img, ccfg)
        for sub in verdict.sub_images:
            save_png(sub, out / "images" / f"{sub.image_id}.png")
        return verdict

    verdicts = _pmap(run, jobs)
    write_cleaning_log([(j[0], v) for j, v in zip(jobs, verdicts)], out / "cleaning_log.csv")

    n_valid: dict[str, int] = {}
    with open(out / "images.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMAGE_MAP_COLUMNS)
        for (image_id, pid, _), v in zip(jobs, verdicts):
            for sub in v.sub_images:
                w.writerow([sub.image_id, pid, image_id])
            n_valid[pid] = n_valid.get(pid, 0) + len(v.sub_images)
    with open(out / "patients.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PATIENT_COLUMNS)
        for pid in labeled.ids():
            if n_valid.get(pid, 0) == 0:
                logger.info("clean: %s dropped, no valid image", pid)
                continue
            r = labeled[pid]
            w.writerow([pid, r.birth_year, r.mammogram_year, r.age_at_bus, r.clinical_density, r.bus_birads,
                        r.outcome, int(r.inconsistent), n_valid[pid]])
    logger.info("clean: %d of %d women eligible; exclusions %s", report.n_retained, report.n_input, report.counts)
    _write_meta(cfg, "clean", [manifest], [out / "patients.csv", out / "cleaning_log.csv", out / "images.csv"])


def stage_featurize(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    rows = _read_rows(_need(out / "clean" / "images.csv", "clean"), IMAGE_MAP_COLUMNS)
    patients = _patients(out)
    rows = [r for r in rows if r["patient_id"] in patients]

    def featurize(row):
        path = out / "clean" / "images" / f"{row['image_id']}.png"
        if not path.is_file():
            raise StageInputError(f"cleaned image missing: {path}")
        img = load_image(path, image_id=row["image_id"], patient_id=row["patient_id"])
        return gray_level_histogram(img, cfg.normalize)

    feats = _pmap(featurize, rows)
    write_features(feats, out / "features.csv")
    _write_meta(cfg, "featurize", [out / "clean" / "images.csv"], [out / "features.csv"])


def _labels_for(patient_ids, patients) -> np.ndarray:
    return np.array([DENSITIES.index(patients[p]["clinical_density"]) for p in patient_ids], dtype=np.int64)


def stage_match(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    patients = _patients(out)
    cohort = _eligible_cohort(cfg)[1].subset(patients)
    matched = match_case_control(cohort, cfg.matching_ratio, cfg.matching_key, cfg.seed)
    matched.write_csv(out / "matched.csv")
    logger.info("matched %d cases to %d controls on %s", len(matched.cases), len(matched.controls), cfg.matching_key)
    _write_meta(cfg, "match", [out / "clean" / "patients.csv"], [out / "matched.csv"])


def stage_split(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    patients = _patients(out)
    matched = MatchedSet.read_csv(_need(out / "matched.csv", "match"), cfg.matching_ratio)
    cohort = _eligible_cohort(cfg)[1].subset(patients)
    dev, test = development_and_test(cohort, matched)
    if len(dev) == 0:
        raise StageInputError("no development women left after removing the matched test set")
    assignment = dict(stratified_split(dev, cfg.split_fractions, cfg.seed).assignment)
    assignment.update({p: "test" for p in test.ids()})
    SplitAssignment(assignment, cfg.seed, tuple(cfg.split_fractions)).write_csv(out / "split.csv")
    _write_meta(cfg, "split", [out / "matched.csv", out / "clean" / "patients.csv"], [out / "split.csv"])


def _load_split(out: Path) -> SplitAssignment:
    rows = _read_rows(_need(out / "split.csv", "split"), ("patient_id", "split"))
    return SplitAssignment({r["patient_id"]: r["split"] for r in rows}, 0, ())


def stage_train(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    patients = _patients(out)
    feats = read_features(_need(out / "features.csv", "featurize"))
    split = _load_split(out).assignment

    def subset(name):
        fs = [f for f in feats if split.get(f.patient_id) == name]
        return feature_matrix(fs), _labels_for([f.patient_id for f in fs], patients)

    X, y = subset("train")
    if X.shape[0] == 0:
        raise StageInputError("no training images")
    if np.unique(y).size < 2:
        raise DegenerateLabelsError("degenerate labels: training data covers a single density class")
    mcfg = cfg.model_config()
    if cfg.model == "logreg":
        model = train_logreg(X, y, mcfg, seed=cfg.seed)
    elif cfg.model == "forest":
        model = train_forest(X, y, mcfg)
    else:
        Xv, yv = subset("validation")
        if Xv.shape[0] == 0:
            raise StageInputError("MLP training needs a non-empty validation split")
        model = train_mlp(X, y, Xv, yv, mcfg)
    save_model(model, out / "model.json")
    _write_meta(cfg, "train", [out / "features.csv", out / "split.csv"], [out / "model.json"])


def stage_predict(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    model = load_model(_need(out / "model.json", "train"), expected_kind=cfg.model)
    feats = read_features(_need(out / "features.csv", "featurize"))
    split = _load_split(out).assignment
    if cfg.predict_split != "all":
        feats = [f for f in feats if split.get(f.patient_id) == cfg.predict_split]
    if not feats:
        raise StageInputError(f"no images in split {cfg.predict_split!r}")
    probs = predict_proba(model, feature_matrix(feats))
    write_predictions([f.image_id for f in feats], [f.patient_id for f in feats], probs, out / "predictions.csv")
    _write_meta(cfg, "predict", [out / "model.json", out / "features.csv"], [out / "predictions.csv"])


def _prediction_file(cfg: RunConfig, override: str | None) -> Path:
    if override:
        p = Path(override)
        if not p.is_file():
            raise StageInputError(f"prediction file not found: {p}")
        return p
    return _need(Path(cfg.out) / "predictions.csv", "predict")


def _read_prediction_csv(path: Path):
    try:
        return read_predictions(path)
    except ValueError as err:
        raise StageInputError(str(err)) from None


def stage_aggregate(cfg: RunConfig, predictions: str | None = None) -> None:
    out = Path(cfg.out)
    src = _prediction_file(cfg, predictions)
    _, pids, probs = _read_prediction_csv(src)
    if not pids:
        raise StageInputError("prediction file has no rows")
    ids, means, counts = group_by_patient(pids, probs)
    votes = vote_by_patient(pids, probs)
    if cfg.aggregation == "vote":
        means = one_hot([votes[p] for p in ids])
    with open(out / "patient_predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PATIENT_PREDICTION_COLUMNS)
        for pid, p, n in zip(ids, means, counts):
            w.writerow([pid] + [repr(float(v)) for v in p] + [n, DENSITIES[votes[pid]]])
    _write_meta(cfg, "aggregate", [src], [out / "patient_predictions.csv"])


def stage_evaluate(cfg: RunConfig, predictions: str | None = None) -> None:
    out = Path(cfg.out)
    patients = _patients(out)
    src = _prediction_file(cfg, predictions)
    image_ids, pids, probs = _read_prediction_csv(src)
    unknown = sorted(set(pids) - set(patients))
    if unknown:
        raise StageInputError(f"predictions reference unknown patients: {unknown[:5]}")
    truth = {p: DENSITIES.index(patients[p]["clinical_density"]) for p in set(pids)}
    tags = {
        "age_bin": {p: _age_bin(int(patients[p]["age_at_bus"])) for p in patients},
        "cancer_status": {p: patients[p]["outcome"] for p in patients},
        "bus_birads": {p: patients[p]["bus_birads"] for p in patients},
    }
    bad = [t for t in cfg.subgroups if t not in tags]
    if bad:
        raise ConfigError(f"unknown subgroup tags {bad}")
    ps = PredictionSet(image_ids, pids, probs, truth, tags)
    reports = [evaluate(ps, level, cfg.subgroups, model=cfg.model) for level in ("image", "patient")]
    with open(out / "eval.json", "w") as fh:
        json.dump({r.level: r.to_dict() for r in reports}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_table_csv(reports, out / "eval.csv")
    _, means, t_pat, _ = ps.level_view("patient")
    write_roc_csv(ps.probs, [truth[p] for p in pids], out / "roc_points_image.csv", label="image")
    write_roc_csv(means, t_pat, out / "roc_points_patient.csv", label="patient")
    micro = reports[1].overall.micro
    logger.info("patient-level micro AUROC %.3f (%.3f, %.3f)", micro.auc, micro.lower, micro.upper)
    _write_meta(cfg, "evaluate", [src, out / "clean" / "patients.csv"],
                [out / "eval.json", out / "eval.csv", out / "roc_points_patient.csv"])


def stage_risk(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    patients = _patients(out)
    matched = MatchedSet.read_csv(_need(out / "matched.csv", "match"), cfg.matching_ratio)
    rows = _read_rows(_need(out / "patient_predictions.csv", "aggregate"), PATIENT_PREDICTION_COLUMNS)
    predicted = {r["patient_id"]: np.array([float(r[c]) for c in ("pA", "pB", "pC", "pD")]) for r in rows}
    subjects = []
    for pid in matched.patient_ids():
        if pid not in patients or pid not in predicted:
            continue
        p = patients[pid]
        if p["outcome"] not in ("case", "control"):
            continue
        subjects.append(RiskSubject(pid, float(p["age_at_bus"]), DENSITIES.index(p["clinical_density"]),
                                    int(p["outcome"] == "case"), predicted[pid]))
    if not subjects:
        raise StageInputError("no matched women with predictions for risk modeling")
    cv, ors = {}, {}
    for src in DENSITY_SOURCES:
        try:
            cv[src] = cv_risk_auroc(subjects, cfg.risk_folds, cfg.seed, src, cfg.risk_draws)
        except (RiskModelError, DegenerateLabelsError, ValueError) as err:
            logger.warning("risk AUROC (%s) not estimable: %s", src, err)
            cv[src] = err
        try:
            ors[src] = odds_ratios(fit_odds_model(subjects, src, cfg.seed))
        except (RiskModelError, ValueError) as err:
            logger.warning("odds ratios (%s) not estimable: %s", src, err)
            ors[src] = err
    write_risk_report(cv, ors, out / "risk.json", out / "risk.csv")
    _write_meta(cfg, "risk", [out / "matched.csv", out / "patient_predictions.csv"], [out / "risk.json", out / "risk.csv"])


def stage_report(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    with open(_need(out / "eval.json", "evaluate")) as fh:
        ev = json.load(fh)
    with open(_need(out / "risk.json", "risk")) as fh:
        rk = json.load(fh)
    lines = ["# Run report", "", f"seed: {cfg.seed}, model: {cfg.model}", "", "## Density prediction", ""]
    lines += ["| level | micro AUROC (95% CI) | A | B | C | D | dense vs non-dense | tau-b |", "|---|---|---|---|---|---|---|---|"]

    def ci(c):
        return "n/e" if not c else f"{c['auc']:.3f} ({c['lower']:.3f}, {c['upper']:.3f})"

    for level in ("image", "patient"):
        o = ev[level]["overall"]
        tau = "n/e" if o["kendall_tau_b"] is None else f"{o['kendall_tau_b']:.3f}"
        lines.append(f"| {level} | {ci(o['micro'])} | " + " | ".join(ci(o["per_class"].get(d)) for d in DENSITIES)
                     + f" | {ci(o['dense_vs_nondense'])} | {tau} |")
    lines += ["", "## Five-year risk (cross-validated AUROC)", ""]
    for src, v in rk["auroc"].items():
        lines.append(f"- {src}: " + (v["error"] if "error" in v else ci(v)))
    lines += ["", "## Odds ratios", ""]
    for src, rows in rk["odds_ratios"].items():
        if isinstance(rows, dict):
            lines.append(f"- {src}: {rows['error']}")
            continue
        cells = [f"{r['covariate']} {r['or']:.2f}" + ("" if r["reference"] else f" ({r['lower']:.2f}, {r['upper']:.2f})")
                 for r in rows]
        lines.append(f"- {src}: " + "; ".join(cells))
    (out / "report.md").write_text("\n".join(lines) + "\n")
    _write_meta(cfg, "report", [out / "eval.json", out / "risk.json"], [out / "report.md"])


# --- entry point ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="run directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="busdensity", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGES + ("all",):
        p = sub.add_parser(name, parents=[common])
        if name in ("aggregate", "evaluate"):
            p.add_argument("--predictions", help="image-level prediction CSV (e.g. from an external model)")
        if name == "clean":
            p.add_argument("--manifest", help="cohort manifest CSV (overrides config)")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if getattr(args, "manifest", None):
        cfg.manifest = args.manifest
    cfg.validate()
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    return cfg


def run_stage(cfg: RunConfig, name: str, predictions: str | None = None) -> None:
    if name in ("aggregate", "evaluate"):
        {"aggregate": stage_aggregate, "evaluate": stage_evaluate}[name](cfg, predictions)
    else:
        globals()[f"stage_{name}"](cfg)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args)
        names = STAGES if args.command == "all" else (args.command,)
        for name in names:
            logger.info("stage %s", name)
            run_stage(cfg, name, getattr(args, "predictions", None))
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
