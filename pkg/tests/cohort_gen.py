"""Random labeled cohorts for property tests."""

from datetime import date, timedelta

import numpy as np

from busdensity.cohort import Cohort, PatientRecord, label_cases_controls
from busdensity.density import DENSITIES


def random_cohort(seed: int, n: int | None = None, case_rate: float = 0.15, prior=(0.034, 0.39, 0.447, 0.129)) -> Cohort:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 300)) if n is None else n
    records = []
    for i in range(n):
        bus = date(2012, 1, 1) + timedelta(days=int(rng.integers(0, 2000)))
        dx = None
        if rng.random() < case_rate:
            dx = bus + timedelta(days=int(rng.integers(183, 1800)))
        records.append(PatientRecord(
            patient_id=f"W{i:04d}",
            birth_year=int(rng.integers(1950, 1965)),
            mammogram_date=bus - timedelta(days=int(rng.integers(0, 30))),
            bus_date=bus,
            clinical_density=DENSITIES[int(rng.choice(4, p=prior))],
            bus_birads=int(rng.integers(1, 4)),
            diagnosis_date=dx,
            image_ids=(f"W{i:04d}_00",),
        ))
    return label_cases_controls(Cohort.from_records(records))
