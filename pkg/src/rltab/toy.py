"""Synthetic clinical-style fixture used by the tests, demos and CLI smoke runs.

300 rows, six columns, a 1:4 positive:negative outcome, one strong
continuous pair (age, bmi) and one categorical pair (sex, smoker).
"""

from __future__ import annotations

import csv
from importlib import resources
from pathlib import Path

import numpy as np

from .data import Dataset, load_csv

N_ROWS = 300
N_POSITIVE = 60


def make_toy_rows(seed: int = 2024, n: int = N_ROWS, n_positive: int = N_POSITIVE) -> list:
    rng = np.random.default_rng(seed)
    outcome = np.array([1] * n_positive + [0] * (n - n_positive))
    rng.shuffle(outcome)
    age = np.clip(rng.normal(55, 12, n) + 6 * outcome, 20, 90).round()
    bmi = (27 + 0.25 * (age - 55) + rng.normal(0, 2.5, n)).round(1)
    glucose = (95 + 28 * outcome + 0.8 * (bmi - 27) + rng.normal(0, 12, n)).round()
    sex = np.where(rng.random(n) < 0.5, "F", "M")
    p_smoke = np.where(sex == "M", 0.6, 0.15)
    smoker = np.where(rng.random(n) < p_smoke, "yes", "no")
    rows = []
    for i in range(n):
        rows.append([f"{age[i]:.0f}", f"{bmi[i]:.1f}", f"{glucose[i]:.0f}", sex[i], smoker[i],
                     str(outcome[i])])
    return rows


HEADER = ["age", "bmi", "glucose", "sex", "smoker", "outcome"]


def write_toy_csv(path, seed: int = 2024) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        writer.writerows(make_toy_rows(seed))
    return path


def toy_csv_path() -> Path:
    return Path(resources.files("rltab") / "data" / "toy.csv")


def load_toy() -> Dataset:
    return load_csv(toy_csv_path())
