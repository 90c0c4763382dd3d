"""Synthetic claims population with planted latent-condition structure.

Each patient independently draws a set of conditions; every active
condition emits claims whose codes come from that condition's code pool,
so codes from the same pool co-occur inside patient documents. The
planted pool structure gives downstream embedding tests a ground truth:
codes sharing a pool should embed closer together than codes from
different pools.

Generation is deterministic under (spec, seed). Each patient uses an
independent random stream derived from (seed, patient index), so
generation could be parallelized per patient without changing output;
claims are emitted in patient-index order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from decimal import Decimal
from math import exp, log

import numpy as np

from .claims_data import CareSetting, ClaimRecord, CodeSystem, MemberRecord, Sex, write_claims, write_members
from .evaluation import AGE_BAND_LABELS

# Log-odds age adjustment is anchored here: a condition with age_shift s has
# its stated prevalence at this age and logit-shifted s per decade away from it.
REFERENCE_AGE = 40


@dataclass(frozen=True)
class ConditionSpec:
    name: str
    prevalence: float
    age_shift: float
    code_pool: tuple[tuple[CodeSystem, str], ...]
    visits_per_year: float
    cost_per_claim: tuple[float, float]  # lognormal (mu, sigma) in USD
    chronic: bool

    def __post_init__(self):
        if not 0.0 <= self.prevalence <= 1.0:
            raise ValueError(f"{self.name}: prevalence must be in [0, 1]")
        if self.visits_per_year < 0:
            raise ValueError(f"{self.name}: visits_per_year must be >= 0")
        if not self.code_pool:
            raise ValueError(f"{self.name}: code_pool must be non-empty")


@dataclass(frozen=True)
class PopulationSpec:
    n_patients: int
    seed: int
    conditions: tuple[ConditionSpec, ...]
    background_visit_rate: float
    background_code_pool: tuple[tuple[CodeSystem, str], ...]
    background_cost_per_claim: tuple[float, float] = (4.7, 0.5)
    age_distribution: dict[str, float] = field(default_factory=dict)
    female_fraction: float = 0.5
    churn: float = 0.1
    comorbidity_factor: float = 1.5
    base_year: int = 2015
    target_year: int = 2016

    def __post_init__(self):
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if not 0.0 <= self.female_fraction <= 1.0:
            raise ValueError("female_fraction must be in [0, 1]")
        unknown = set(self.age_distribution) - set(AGE_BAND_LABELS)
        if unknown:
            raise ValueError(f"unknown age bands in age_distribution: {sorted(unknown)}")


def _pool_from_json(raw) -> tuple[tuple[CodeSystem, str], ...]:
    return tuple((CodeSystem(system), code) for system, code in raw)


def load_population_spec(path) -> PopulationSpec:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    conditions = tuple(
        ConditionSpec(
            name=c["name"],
            prevalence=c["prevalence"],
            age_shift=c.get("age_shift", 0.0),
            code_pool=_pool_from_json(c["code_pool"]),
            visits_per_year=c["visits_per_year"],
            cost_per_claim=tuple(c["cost_per_claim"]),
            chronic=c["chronic"],
        )
        for c in raw.get("conditions", [])
    )
    return PopulationSpec(
        n_patients=raw["n_patients"],
        seed=raw["seed"],
        conditions=conditions,
        background_visit_rate=raw["background_visit_rate"],
        background_code_pool=_pool_from_json(raw["background_code_pool"]),
        background_cost_per_claim=tuple(raw.get("background_cost_per_claim", (4.7, 0.5))),
        age_distribution=dict(raw.get("age_distribution", {})),
        female_fraction=raw.get("female_fraction", 0.5),
        churn=raw.get("churn", 0.1),
        comorbidity_factor=raw.get("comorbidity_factor", 1.5),
        base_year=raw.get("base_year", 2015),
        target_year=raw.get("target_year", 2016),
    )


# Age range sampled for each band label; the open-ended top band is capped.
_BAND_AGE_RANGE = {
    "(0, 1]": (1, 1), "(1, 2]": (2, 2), "(2, 4]": (3, 4), "(4, 9]": (5, 9),
    "(9, 14]": (10, 14), "(14, 18]": (15, 18), "(18, 20]": (19, 20), "(20, 24]": (21, 24),
    "(24, 29]": (25, 29), "(29, 34]": (30, 34), "(34, 39]": (35, 39), "(39, 44]": (40, 44),
    "(44, 49]": (45, 49), "(49, 54]": (50, 54), "(54, 59]": (55, 59), "(59, 64]": (60, 64),
    "(64, 69]": (65, 69), "(69, 74]": (70, 74), "(74, 79]": (75, 79), "(79, 84]": (80, 84),
    "84+": (85, 95),
}


def _age_sampler(spec: PopulationSpec):
    labels = list(AGE_BAND_LABELS)
    weights = np.array([spec.age_distribution.get(b, 1.0) for b in labels], dtype=np.float64)
    if weights.sum() <= 0:
        raise ValueError("age_distribution weights must sum to a positive value")
    probs = weights / weights.sum()

    def draw(rng: np.random.Generator) -> int:
        band = labels[int(rng.choice(len(labels), p=probs))]
        lo, hi = _BAND_AGE_RANGE[band]
        return int(rng.integers(lo, hi + 1))

    return draw


def _condition_probability(cond: ConditionSpec, age: int) -> float:
    if cond.prevalence <= 0.0:
        return 0.0
    if cond.prevalence >= 1.0:
        return 1.0
    logit = log(cond.prevalence / (1.0 - cond.prevalence))
    logit += cond.age_shift * (age - REFERENCE_AGE) / 10.0
    return 1.0 / (1.0 + exp(-logit))


def _setting_for(system: CodeSystem, rng: np.random.Generator) -> CareSetting:
    if system is CodeSystem.NDC:
        return CareSetting.SPECIALTY_RX if rng.random() < 0.05 else CareSetting.PHARMACY
    r = rng.random()
    if r < 0.05:
        return CareSetting.INPATIENT
    if r < 0.15:
        return CareSetting.ED
    return CareSetting.OUTPATIENT


def _random_date(rng: np.random.Generator, year: int, months_enrolled: int) -> date:
    # Enrollment is taken as the first `months_enrolled` calendar months.
    start = date(year, 1, 1)
    if months_enrolled >= 12:
        end = date(year, 12, 31)
    else:
        end = date(year, months_enrolled + 1, 1) - timedelta(days=1)
    span = (end - start).days + 1
    return start + timedelta(days=int(rng.integers(span)))


def _emit_claims(rng, pid, year, months, rate, pool, mu, sigma, factor, out):
    n = int(rng.poisson(rate * months / 12.0))
    for _ in range(n):
        system, code = pool[int(rng.integers(len(pool)))]
        cost = factor * float(rng.lognormal(mu, sigma))
        out.append(ClaimRecord(
            patient_id=pid,
            service_date=_random_date(rng, year, months),
            code_system=system,
            code=code,
            allowed_cost=Decimal(f"{cost:.2f}"),
            setting=_setting_for(system, rng),
        ))


def generate_population(spec: PopulationSpec) -> tuple[list[ClaimRecord], list[MemberRecord]]:
    """Draw the full population in memory; deterministic under (spec, seed)."""
    draw_age = _age_sampler(spec)
    claims: list[ClaimRecord] = []
    members: list[MemberRecord] = []
    years = (spec.base_year, spec.target_year)
    for i in range(spec.n_patients):
        rng = np.random.default_rng([spec.seed, i])
        pid = f"P{i:06d}"
        sex = Sex.FEMALE if rng.random() < spec.female_fraction else Sex.MALE
        age = draw_age(rng)
        zip3 = round(float(rng.beta(2.0, 40.0)), 4)
        months = {
            y: (int(rng.integers(1, 13)) if rng.random() < spec.churn else 12)
            for y in years
        }
        members.append(MemberRecord(
            patient_id=pid,
            birth_year=spec.base_year - age,
            sex=sex,
            zip3_black_pct=zip3,
            enrollment_months=months,
        ))
        active = [c for c in spec.conditions if rng.random() < _condition_probability(c, age)]
        n_chronic = sum(1 for c in active if c.chronic)
        for year in years:
            m = months[year]
            # The comorbidity surcharge compounds prospectively: patients
            # carrying two or more chronic conditions into the target year
            # cost more per claim there than their base-year spend implies,
            # which keeps the burden-to-cost relationship non-linear.
            factor = spec.comorbidity_factor if (n_chronic >= 2 and year == spec.target_year) else 1.0
            for cond in active:
                if year != spec.base_year and not cond.chronic:
                    continue
                mu, sigma = cond.cost_per_claim
                _emit_claims(rng, pid, year, m, cond.visits_per_year, cond.code_pool, mu, sigma, factor, claims)
            mu, sigma = spec.background_cost_per_claim
            _emit_claims(rng, pid, year, m, spec.background_visit_rate, spec.background_code_pool,
                         mu, sigma, factor, claims)
    return claims, members


def generate(spec: PopulationSpec, claims_path, members_path) -> tuple[int, int]:
    """Generate and write the claims and members CSV files.

    Returns (number of claim rows, number of member rows). Output files
    are byte-identical across runs with the same spec and seed.
    """
    claims, members = generate_population(spec)
    write_claims(claims, claims_path)
    write_members(members, members_path)
    return len(claims), len(members)


def planted_pairs(spec: PopulationSpec) -> list[tuple[str, str, bool]]:
    """Labeled code pairs for embedding-similarity tests.

    Pairs within one condition's pool are labeled True; pairs across
    different condition pools, or condition-vs-background, are labeled
    False. Codes appearing in more than one pool count as same-condition
    when they share any pool; background-background pairs are not emitted.
    """
    pools = [sorted({code for _, code in c.code_pool}) for c in spec.conditions]
    membership: dict[str, set[int]] = {}
    for idx, pool in enumerate(pools):
        for code in pool:
            membership.setdefault(code, set()).add(idx)

    pairs: dict[tuple[str, str], bool] = {}

    def add(a: str, b: str, same: bool):
        if a == b:
            return
        key = (a, b) if a < b else (b, a)
        pairs.setdefault(key, same)

    for pool in pools:
        for a, b in itertools.combinations(pool, 2):
            add(a, b, True)
    for i, j in itertools.combinations(range(len(pools)), 2):
        for a in pools[i]:
            for b in pools[j]:
                if membership[a] & membership[b]:
                    continue
                add(a, b, False)
    background = sorted({code for _, code in spec.background_code_pool} - set(membership))
    for pool in pools:
        for a in pool:
            for z in background:
                add(a, z, False)
    return [(a, b, same) for (a, b), same in sorted(pairs.items())]
