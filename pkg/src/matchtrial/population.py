"""Patient-level data-generating model (age, cytogenetic risk, latent residual)."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .stats_core import RngStream, expit


@dataclass(frozen=True)
class OutcomeModel:
    """Logit(Y) = beta0 + theta*treated + beta_age*age + beta_cyto*cyto + eps, eps ~ N(0, sigma^2)."""

    beta0: float = 2.0
    theta: float = 0.0
    beta_age: float = -0.05
    beta_cyto: float = -0.5
    sigma: float = 0.0
    age_mean: float = 55.0
    age_sd: float = 15.0
    cyto_prev: float = 0.34

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma: must be >= 0")
        if self.age_sd < 0:
            raise ValueError("age_sd: must be >= 0")
        if not 0.0 <= self.cyto_prev <= 1.0:
            raise ValueError("cyto_prev: must lie in [0, 1]")

    def linear_predictor(self, treated, age, cyto, eps=0.0):
        return self.beta0 + self.theta * treated + self.beta_age * age + self.beta_cyto * cyto + eps

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Patient:
    id: int
    age: float
    cyto: int
    treated: bool
    response: int
    epsilon: float


@dataclass
class Cohort:
    """Column-oriented block of patients sharing one treatment status."""

    ids: np.ndarray
    age: np.ndarray
    cyto: np.ndarray
    epsilon: np.ndarray
    response: np.ndarray
    treated: bool

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def covariates(self) -> np.ndarray:
        return np.column_stack([self.age, self.cyto])

    def take(self, idx) -> "Cohort":
        return Cohort(self.ids[idx], self.age[idx], self.cyto[idx], self.epsilon[idx], self.response[idx], self.treated)

    def head(self, n: int) -> "Cohort":
        return self.take(slice(0, n))

    def patients(self) -> list[Patient]:
        return [
            Patient(int(i), float(a), int(c), self.treated, int(r), float(e))
            for i, a, c, r, e in zip(self.ids, self.age, self.cyto, self.response, self.epsilon)
        ]

    @staticmethod
    def concat(parts: list["Cohort"]) -> "Cohort":
        treated = parts[0].treated
        if any(p.treated != treated for p in parts):
            raise ValueError("cannot mix treated and control cohorts")
        return Cohort(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.age for p in parts]),
            np.concatenate([p.cyto for p in parts]),
            np.concatenate([p.epsilon for p in parts]),
            np.concatenate([p.response for p in parts]),
            treated,
        )


def generate_cohort(s: RngStream, model: OutcomeModel, n: int, treated: bool, id_start: int = 0) -> Cohort:
    """Draw ``n`` patients: ages, then cytogenetics, residuals, responses."""
    age = s.normal(model.age_mean, model.age_sd, n)
    cyto = (s.uniform(n) < model.cyto_prev).astype(np.int64)
    eps = s.normal(0.0, model.sigma, n)
    eta = model.linear_predictor(1.0 if treated else 0.0, age, cyto, eps)
    response = (s.uniform(n) < expit(eta)).astype(np.int64)
    return Cohort(np.arange(id_start, id_start + n, dtype=np.int64), age, cyto, eps, response, treated)


def generate_patient(s: RngStream, model: OutcomeModel, treated: bool, patient_id: int = 0) -> Patient:
    return generate_cohort(s, model, 1, treated, patient_id).patients()[0]


def response_probability(model: OutcomeModel, treated: bool, age: float, cyto: int, eps: float = 0.0) -> float:
    eta = model.linear_predictor(1.0 if treated else 0.0, age, cyto, eps)
    return 1.0 / (1.0 + math.exp(-eta))
