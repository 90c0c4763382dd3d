"""Engineered baseline features and prospective risk-score labels.

The 21 baseline features per patient come from base-year claims only:
demographics, a weighted comorbidity index, utilization counts by care
setting, drug-class breadth, ten condition flags driven by a pluggable
code-set map, and total base-year cost. Labels annualize target-year
allowed cost by enrollment months and rescale to a population mean of 1.

Everything here is a pure function of the cohort; rows can be computed
per patient in parallel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .claims_data import CareSetting, CodeSystem, Cohort, Sex

FEATURE_NAMES = [
    "age", "sex", "zip3_black_pct", "charlson_index",
    "n_inpatient", "n_outpatient", "n_ed", "n_pharmacy", "n_specialty_rx",
    "n_distinct_drug_classes",
    "chemo_flag", "psychotherapy_flag", "obesity_flag", "cvd_flag",
    "hypertension_flag", "t2dm_flag", "mental_flag", "substance_flag",
    "lowback_flag", "asthma_flag",
    "base_year_cost",
]

# flag column -> concept name looked up in the code-set map
FLAG_CONCEPTS = {
    "chemo_flag": "chemotherapy",
    "psychotherapy_flag": "psychotherapy",
    "obesity_flag": "obesity",
    "cvd_flag": "cardiovascular",
    "hypertension_flag": "hypertension",
    "t2dm_flag": "type2_diabetes",
    "mental_flag": "mental_disorders",
    "substance_flag": "substance_abuse",
    "lowback_flag": "low_back_pain",
    "asthma_flag": "asthma",
}

_SETTING_COUNTS = {
    CareSetting.INPATIENT: "n_inpatient",
    CareSetting.OUTPATIENT: "n_outpatient",
    CareSetting.ED: "n_ed",
    CareSetting.PHARMACY: "n_pharmacy",
    CareSetting.SPECIALTY_RX: "n_specialty_rx",
}

# Distinct leading NDC segment length used as the drug-class proxy.
NDC_CLASS_PREFIX_LEN = 5


@dataclass(frozen=True)
class CodeSetMap:
    """Named code sets: concept -> (code_system, code prefix) patterns, plus
    weighted Charlson condition sets."""

    concepts: dict[str, tuple[tuple[CodeSystem, str], ...]]
    charlson: dict[str, tuple[int, tuple[tuple[CodeSystem, str], ...]]]

    def validate_for_features(self) -> None:
        for concept in FLAG_CONCEPTS.values():
            if concept not in self.concepts:
                raise ValueError(f"code-set map is missing concept {concept!r}")


def load_code_map(path) -> CodeSetMap:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    concepts = {
        name: tuple((CodeSystem(system), prefix) for system, prefix in patterns)
        for name, patterns in raw["concepts"].items()
    }
    charlson = {
        name: (int(entry["weight"]),
               tuple((CodeSystem(system), prefix) for system, prefix in entry["patterns"]))
        for name, entry in raw.get("charlson", {}).items()
    }
    return CodeSetMap(concepts=concepts, charlson=charlson)


@dataclass
class FeatureRow:
    patient_id: str
    values: dict[str, float]

    def __post_init__(self):
        if set(self.values) != set(FEATURE_NAMES):
            missing = set(FEATURE_NAMES) - set(self.values)
            extra = set(self.values) - set(FEATURE_NAMES)
            raise ValueError(f"feature row must have exactly the 21 features; "
                             f"missing={sorted(missing)} extra={sorted(extra)}")


@dataclass(frozen=True)
class RiskLabel:
    patient_id: str
    annualized_cost: float
    risk_score: float

    def __post_init__(self):
        if self.risk_score < 0:
            raise ValueError("risk_score must be >= 0")


def _matches(claim, patterns) -> bool:
    return any(claim.code_system is system and claim.code.startswith(prefix)
               for system, prefix in patterns)


def extract_features(cohort: Cohort, code_map: CodeSetMap) -> list[FeatureRow]:
    """Compute the 21 baseline features from each document's base-year claims."""
    code_map.validate_for_features()
    rows = []
    for doc in cohort.documents:
        member = doc.member
        values = dict.fromkeys(FEATURE_NAMES, 0.0)
        values["age"] = float(cohort.base_year - member.birth_year)
        values["sex"] = 1.0 if member.sex is Sex.FEMALE else 0.0
        values["zip3_black_pct"] = member.zip3_black_pct
        drug_classes = set()
        for claim in doc.claims:
            values[_SETTING_COUNTS[claim.setting]] += 1.0
            if claim.code_system is CodeSystem.NDC:
                drug_classes.add(claim.code[:NDC_CLASS_PREFIX_LEN])
        values["n_distinct_drug_classes"] = float(len(drug_classes))
        for column, concept in FLAG_CONCEPTS.items():
            patterns = code_map.concepts[concept]
            values[column] = 1.0 if any(_matches(c, patterns) for c in doc.claims) else 0.0
        charlson = 0
        for weight, patterns in code_map.charlson.values():
            if any(_matches(c, patterns) for c in doc.claims):
                charlson += weight
        values["charlson_index"] = float(charlson)
        values["base_year_cost"] = float(doc.cost_by_year.get(cohort.base_year, 0))
        rows.append(FeatureRow(patient_id=doc.patient_id, values=values))
    return rows


def compute_risk_labels(cohort: Cohort, target_year: int | None = None) -> list[RiskLabel]:
    """Annualize target-year cost by enrollment months, then rescale so the
    population mean risk score is exactly 1.
    """
    year = cohort.target_year if target_year is None else target_year
    annualized = []
    for doc in cohort.documents:
        months = doc.member.enrollment_months.get(year, 0)
        if months < 1:
            raise ValueError(f"patient {doc.patient_id!r} has no enrollment months in {year}")
        annualized.append(float(doc.cost_by_year.get(year, 0)) * 12.0 / months)
    mean = sum(annualized) / len(annualized) if annualized else 0.0
    if mean <= 0:
        raise ValueError("mean annualized cost must be positive to define risk scores")
    return [
        RiskLabel(patient_id=doc.patient_id, annualized_cost=a, risk_score=a / mean)
        for doc, a in zip(cohort.documents, annualized)
    ]


def split_train_test(patients: list[str], fraction: float = 0.7, seed: int = 0) -> tuple[list[str], list[str]]:
    """Deterministic shuffled split; train gets floor(fraction * N) patients.

    Returned id lists are sorted; together they partition the input.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    n_train = int(math.floor(round(fraction * len(patients), 9)))
    train = sorted(patients[i] for i in order[:n_train])
    test = sorted(patients[i] for i in order[n_train:])
    return train, test


def write_features_csv(rows: list[FeatureRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id"] + FEATURE_NAMES)
        for row in rows:
            writer.writerow([row.patient_id] + [repr(row.values[name]) for name in FEATURE_NAMES])


def read_features_csv(path) -> list[FeatureRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["patient_id"] + FEATURE_NAMES:
            raise ValueError(f"{path}: unexpected feature columns")
        return [
            FeatureRow(patient_id=row[0],
                       values={name: float(v) for name, v in zip(FEATURE_NAMES, row[1:])})
            for row in reader
        ]


def write_labels_csv(labels: list[RiskLabel], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "annualized_cost", "risk_score"])
        for lab in labels:
            writer.writerow([lab.patient_id, repr(lab.annualized_cost), repr(lab.risk_score)])


def read_labels_csv(path) -> list[RiskLabel]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [RiskLabel(patient_id=r[0], annualized_cost=float(r[1]), risk_score=float(r[2]))
                for r in reader]
