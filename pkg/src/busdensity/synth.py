"""Synthetic BUS-like images and cohorts with planted density signal and outcome risk."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterator

import numpy as np

from .cohort import Cohort, PatientRecord, write_manifest
from .density import DENSITIES, N_CLASSES, density_index
from .imaging import GrayImage, save_png

# Fractions of women per density in the full study sample.
STUDY_DENSITY_PRIOR = (0.034, 0.390, 0.447, 0.129)
STUDY_AGE_MEAN, STUDY_AGE_SD = 53.4, 11.9


@dataclass(frozen=True)
class SynthConfig:
    n_women: int = 200
    images_per_woman_mean: float = 4.0
    images_per_woman_sd: float = 1.5
    density_prior: tuple[float, float, float, float] = STUDY_DENSITY_PRIOR
    class_intensity_means: tuple[float, float, float, float] = (70.0, 100.0, 130.0, 160.0)
    noise_sd: float = 30.0
    offset_fraction: float = 0.3  # per-image brightness shift sd, as a fraction of noise_sd
    image_shape: tuple[int, int] = (96, 128)
    baseline_log_odds: float = -3.0  # about 5% cases at 5 years
    true_log_odds: tuple[float, float, float, float] = (0.3, 0.2, 0.1, math.log(1.5))  # age, A, C, D
    age_mean: float = STUDY_AGE_MEAN
    age_sd: float = STUDY_AGE_SD
    age_range: tuple[float, float] = (25.0, 95.0)
    first_exam_year: int = 2010
    last_exam_year: int = 2017
    dual_view_rate: float = 0.05
    invalid_rate: float = 0.03
    ineligible_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.density_prior, dtype=float)
        if p.shape != (N_CLASSES,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("density_prior must be 4 probabilities summing to 1")
        for name in ("dual_view_rate", "invalid_rate", "ineligible_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.dual_view_rate + self.invalid_rate > 1.0:
            raise ValueError("dual_view_rate + invalid_rate exceeds 1")
        if self.n_women < 0:
            raise ValueError("n_women must be non-negative")
        if list(self.class_intensity_means) != sorted(self.class_intensity_means):
            raise ValueError("class_intensity_means must increase from A to D")


def _box_blur(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="reflect")
    return sum(p[i:i + a.shape[0], j:j + a.shape[1]] for i in range(3) for j in range(3)) / 9.0


def speckle_field(shape, rng: np.random.Generator) -> np.ndarray:
    """Spatially correlated unit-variance noise (blurred Gaussian)."""
    f = _box_blur(rng.standard_normal(shape))
    return (f - f.mean()) / f.std()


def render_texture(mean: float, shape, noise_sd: float, rng: np.random.Generator) -> np.ndarray:
    if noise_sd == 0:
        return np.full(shape, np.clip(np.floor(mean + 0.5), 0, 255), dtype=np.uint8)
    return np.clip(np.floor(mean + noise_sd * speckle_field(shape, rng) + 0.5), 0, 255).astype(np.uint8)


def generate_image(density, seed, config: SynthConfig = SynthConfig(), image_id: str = "", patient_id: str = "") -> GrayImage:
    """One valid single-view image whose mean intensity encodes the density class."""
    k = density_index(density)
    rng = np.random.default_rng(seed)
    offset = config.offset_fraction * config.noise_sd * rng.standard_normal()
    pixels = render_texture(config.class_intensity_means[k] + offset, config.image_shape, config.noise_sd, rng)
    return GrayImage(pixels, image_id, patient_id)


def render_dual_view(density, seed, config: SynthConfig, image_id="", patient_id="", band: int = 8) -> GrayImage:
    h, w = config.image_shape
    half = max(w // 2, 64)
    rng = np.random.default_rng(seed)
    k = density_index(density)
    panels = []
    for _ in range(2):
        offset = config.offset_fraction * config.noise_sd * rng.standard_normal()
        mean = max(config.class_intensity_means[k] + offset, 40.0)
        panels.append(render_texture(mean, (h, half), max(config.noise_sd, 1.0), rng))
    pixels = np.hstack([panels[0], np.zeros((h, band), dtype=np.uint8), panels[1]])
    return GrayImage(pixels, image_id, patient_id)


def render_invalid(seed, config: SynthConfig, image_id="", patient_id="") -> GrayImage:
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        pixels = rng.integers(0, 4, size=config.image_shape).astype(np.uint8)  # blank frame
    else:
        pixels = render_texture(100.0, (32, 48), 20.0, rng)  # thumbnail
    return GrayImage(pixels, image_id, patient_id)


@dataclass(frozen=True)
class ImageSpec:
    image_id: str
    patient_id: str
    density: int
    kind: str  # single | dual_view | invalid
    seed: tuple[int, ...]


@dataclass
class SyntheticCohort:
    cohort: Cohort
    image_specs: dict[str, ImageSpec]
    truth: list[dict]
    config: SynthConfig = field(default_factory=SynthConfig)

    def render(self, image_id: str) -> GrayImage:
        s = self.image_specs[image_id]
        if s.kind == "invalid":
            return render_invalid(s.seed, self.config, s.image_id, s.patient_id)
        if s.kind == "dual_view":
            return render_dual_view(s.density, s.seed, self.config, s.image_id, s.patient_id)
        return generate_image(s.density, s.seed, self.config, s.image_id, s.patient_id)

    def images(self) -> Iterator[GrayImage]:
        for image_id in sorted(self.image_specs):
            yield self.render(image_id)

    def write(self, outdir) -> dict[str, Path]:
        """Write manifest.csv, images/<patient>/<image>.png, truth.csv and image_truth.csv."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest([self.cohort[p] for p in self.cohort.ids()], out / "manifest.csv")
        for image_id in sorted(self.image_specs):
            spec = self.image_specs[image_id]
            rec = self.cohort[spec.patient_id]
            d = out / rec.image_dir
            d.mkdir(parents=True, exist_ok=True)
            save_png(self.render(image_id), d / f"{image_id}.png")
        cols = ["patient_id", "latent_density", "age_at_bus", "latent_risk", "outcome", "n_images"]
        with open(out / "truth.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.truth:
                w.writerow({k: (f"{row[k]:.12g}" if isinstance(row[k], float) else row[k]) for k in cols})
        with open(out / "image_truth.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "patient_id", "latent_density", "kind"])
            for image_id in sorted(self.image_specs):
                s = self.image_specs[image_id]
                w.writerow([s.image_id, s.patient_id, DENSITIES[s.density], s.kind])
        return {"manifest": out / "manifest.csv", "truth": out / "truth.csv"}


def _truncated_normal(rng, mean, sd, lo, hi) -> float:
    while True:
        v = rng.normal(mean, sd)
        if lo <= v <= hi:
            return float(v)


def _make_ineligible(rng, fields: dict) -> None:
    which = int(rng.integers(0, 5))
    if which == 0:
        fields["negative_screen"] = False
    elif which == 1:
        fields["bus_birads"] = 4
    elif which == 2:
        fields["mammogram_date"] = fields["bus_date"] - timedelta(days=400)
    elif which == 3:
        fields["four_views"] = False
    else:
        fields["prior_cancer"] = True


def generate_cohort(config: SynthConfig = SynthConfig()) -> SyntheticCohort:
    """Draw women, exams, outcomes and image specs; each woman uses her own derived seed."""
    coefs = np.asarray(config.true_log_odds, dtype=float)
    prior = np.asarray(config.density_prior, dtype=float)
    width = len(str(max(config.n_women, 1)))
    records, specs, truth = [], {}, []
    for i in range(config.n_women):
        rng = np.random.default_rng([config.seed, i])
        pid = f"P{i + 1:0{max(width, 5)}d}"
        k = int(rng.choice(N_CLASSES, p=prior))
        age = _truncated_normal(rng, config.age_mean, config.age_sd, *config.age_range)
        year = int(rng.integers(config.first_exam_year, config.last_exam_year + 1))
        bus = date(year, 1, 1) + timedelta(days=int(rng.integers(0, 365)))
        age_at_bus = int(np.floor(age + 0.5))
        birth_year = bus.year - age_at_bus
        mammo = bus - timedelta(days=int(rng.integers(0, 60)))
        birads = int(rng.choice([1, 2, 3], p=[0.5, 0.4, 0.1]))

        age_std = (age_at_bus - config.age_mean) / config.age_sd
        indicators = np.array([k == 0, k == 2, k == 3], dtype=float)
        eta = config.baseline_log_odds + coefs[0] * age_std + coefs[1:] @ indicators
        risk = 1.0 / (1.0 + math.exp(-eta))
        is_case = bool(rng.random() < risk)
        dx = bus + timedelta(days=int(rng.integers(183, 5 * 365))) if is_case else None

        n_img = max(1, int(np.floor(rng.normal(config.images_per_woman_mean, config.images_per_woman_sd) + 0.5)))
        image_ids = []
        for j in range(n_img):
            iid = f"{pid}_{j:02d}"
            u = rng.random()
            kind = "invalid" if u < config.invalid_rate else (
                "dual_view" if u < config.invalid_rate + config.dual_view_rate else "single")
            specs[iid] = ImageSpec(iid, pid, k, kind, (config.seed, i, j))
            image_ids.append(iid)

        fields = dict(
            patient_id=pid, birth_year=birth_year, mammogram_date=mammo, bus_date=bus,
            clinical_density=DENSITIES[k], bus_birads=birads, negative_screen=True, four_views=True,
            prior_cancer=False, diagnosis_date=dx, image_dir=f"images/{pid}", image_ids=tuple(image_ids),
        )
        if config.ineligible_rate and rng.random() < config.ineligible_rate:
            _make_ineligible(rng, fields)
        records.append(PatientRecord(**fields))
        truth.append({
            "patient_id": pid, "latent_density": DENSITIES[k], "age_at_bus": age_at_bus,
            "latent_risk": risk, "outcome": "case" if is_case else "control", "n_images": n_img,
        })
    return SyntheticCohort(Cohort.from_records(records, provenance="synthetic"), specs, truth, config)


def simulate_risk_subjects(
    n: int,
    config: SynthConfig = SynthConfig(),
    seed: int = 0,
    null: bool = False,
    predicted_confidence: float = 0.7,
):
    """Women for the risk model only (no images): age, clinical density, outcome and a noisy predicted distribution.

    Outcomes follow the same logistic model as ``generate_cohort``; with
    ``null=True`` they are drawn at the baseline rate regardless of covariates.
    The predicted distribution mixes the true one-hot with Dirichlet noise.
    """
    from .risk import RiskSubject

    rng = np.random.default_rng(seed)
    k = rng.choice(N_CLASSES, size=n, p=np.asarray(config.density_prior))
    ages = np.array([_truncated_normal(rng, config.age_mean, config.age_sd, *config.age_range) for _ in range(n)])
    age_std = (ages - config.age_mean) / config.age_sd
    coefs = np.zeros(4) if null else np.asarray(config.true_log_odds, dtype=float)
    ind = np.column_stack([k == 0, k == 2, k == 3]).astype(float)
    eta = config.baseline_log_odds + coefs[0] * age_std + ind @ coefs[1:]
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(int)
    noise = rng.dirichlet(np.ones(N_CLASSES), size=n)
    pred = predicted_confidence * np.eye(N_CLASSES)[k] + (1 - predicted_confidence) * noise
    return [RiskSubject(f"R{i:06d}", float(ages[i]), int(k[i]), int(y[i]), pred[i]) for i in range(n)]
