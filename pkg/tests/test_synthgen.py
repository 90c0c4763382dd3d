"""Synthetic population generator: determinism, planted structure, statistics."""

from dataclasses import replace

import numpy as np
import pytest

from claimvec.claims_data import CodeSystem, build_cohort, parse_claims, parse_members
from claimvec.synthgen import (ConditionSpec, PopulationSpec, generate,
                               generate_population, planted_pairs)


def one_condition_spec(n=10_000, prevalence=0.2, visits=6.0, churn=0.0, seed=99):
    cond = ConditionSpec(
        name="cond_a", prevalence=prevalence, age_shift=0.0,
        code_pool=((CodeSystem.ICD10, "A01"), (CodeSystem.ICD10, "A02")),
        visits_per_year=visits, cost_per_claim=(5.0, 0.5), chronic=True)
    return PopulationSpec(
        n_patients=n, seed=seed, conditions=(cond,),
        background_visit_rate=2.0,
        background_code_pool=((CodeSystem.CPT, "99213"), (CodeSystem.ICD10, "Z00")),
        churn=churn)


class TestGenerate:
    def test_empty_population_writes_headers_only(self, tmp_path):
        spec = replace(one_condition_spec(), n_patients=0)
        n_claims, n_members = generate(spec, tmp_path / "c.csv", tmp_path / "m.csv")
        assert (n_claims, n_members) == (0, 0)
        assert parse_claims(tmp_path / "c.csv") == []
        assert parse_members(tmp_path / "m.csv") == []

    def test_same_seed_byte_identical(self, tmp_path):
        spec = one_condition_spec(n=150)
        generate(spec, tmp_path / "c1.csv", tmp_path / "m1.csv")
        generate(spec, tmp_path / "c2.csv", tmp_path / "m2.csv")
        assert (tmp_path / "c1.csv").read_bytes() == (tmp_path / "c2.csv").read_bytes()
        assert (tmp_path / "m1.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()

    def test_different_seed_differs(self, tmp_path):
        generate(one_condition_spec(n=150, seed=1), tmp_path / "c1.csv", tmp_path / "m1.csv")
        generate(one_condition_spec(n=150, seed=2), tmp_path / "c2.csv", tmp_path / "m2.csv")
        assert (tmp_path / "c1.csv").read_bytes() != (tmp_path / "c2.csv").read_bytes()

    def test_output_parses_and_references_known_patients(self, small_population):
        spec, claims, members = small_population
        ids = {m.patient_id for m in members}
        assert all(c.patient_id in ids for c in claims)

    def test_observed_prevalence_within_binomial_interval(self):
        # prevalence 0.2, n=10,000, age_shift 0: 99% binomial interval is
        # 0.2 +- 2.576*sqrt(0.2*0.8/10000) ~±0.0103; the checked bounds are wider.
        spec = one_condition_spec(n=10_000, prevalence=0.2)
        claims, members = generate_population(spec)
        pool = {"A01", "A02"}
        with_cond = {c.patient_id for c in claims if c.code in pool}
        observed = len(with_cond) / spec.n_patients
        assert 0.18 <= observed <= 0.22

    def test_claim_count_mean_within_three_standard_errors(self):
        # With prevalence 1 and no churn every patient is enrolled 12 months,
        # so per-year condition claim counts are Poisson(visits).
        visits = 6.0
        spec = one_condition_spec(n=10_000, prevalence=1.0, visits=visits, churn=0.0)
        claims, members = generate_population(spec)
        pool = {"A01", "A02"}
        base_counts = np.zeros(spec.n_patients)
        index = {m.patient_id: i for i, m in enumerate(members)}
        for c in claims:
            if c.code in pool and c.service_date.year == spec.base_year:
                base_counts[index[c.patient_id]] += 1
        se = np.sqrt(visits / spec.n_patients)
        assert abs(base_counts.mean() - visits) <= 3 * se

    def test_generated_patients_satisfy_cohort_inclusion(self, small_population):
        spec, claims, members = small_population
        cohort = build_cohort(claims, members, spec.base_year, spec.target_year)
        years_with_claims = {}
        for c in claims:
            years_with_claims.setdefault(c.patient_id, set()).add(c.service_date.year)
        expected = {
            m.patient_id for m in members
            if m.enrollment_months.get(spec.base_year, 0) >= 1
            and m.enrollment_months.get(spec.target_year, 0) >= 1
            and {spec.base_year, spec.target_year} <= years_with_claims.get(m.patient_id, set())
        }
        assert set(cohort.patient_ids()) == expected

    def test_claims_fall_inside_enrolled_months(self, small_population):
        spec, claims, members = small_population
        months = {m.patient_id: m.enrollment_months for m in members}
        for c in claims[:2000]:
            assert c.service_date.month <= months[c.patient_id][c.service_date.year]


def pool(*codes):
    return tuple((CodeSystem.ICD10, c) for c in codes)


def spec_with_pools(condition_pools, background=None):
    conds = tuple(
        ConditionSpec(name=f"c{i}", prevalence=0.1, age_shift=0.0, code_pool=p,
                      visits_per_year=1.0, cost_per_claim=(4.0, 0.3), chronic=True)
        for i, p in enumerate(condition_pools))
    return PopulationSpec(n_patients=10, seed=1, conditions=conds,
                          background_visit_rate=1.0,
                          background_code_pool=pool("ZBG") if background is None else background)


class TestPlantedPairs:
    def test_single_condition_with_background(self):
        spec = spec_with_pools([pool("A", "B")], background=pool("Z"))
        assert planted_pairs(spec) == [("A", "B", True), ("A", "Z", False), ("B", "Z", False)]

    def test_no_conditions_gives_empty(self):
        spec = PopulationSpec(n_patients=5, seed=1, conditions=(),
                              background_visit_rate=1.0, background_code_pool=pool("Z1", "Z2"))
        assert planted_pairs(spec) == []

    def test_two_conditions_pair_counts(self):
        spec = spec_with_pools([pool("A", "B"), pool("C", "D")], background=())
        pairs = planted_pairs(spec)
        same = [p for p in pairs if p[2]]
        cross = [p for p in pairs if not p[2]]
        assert len(same) == 2
        assert len(cross) == 4

    def test_shared_code_is_not_cross_labeled(self):
        spec = spec_with_pools([pool("A", "S"), pool("S", "B")], background=())
        pairs = {(a, b): same for a, b, same in planted_pairs(spec)}
        assert pairs[("A", "S")] is True
        assert pairs[("B", "S")] is True
        assert ("S", "S") not in pairs


class TestSpecValidation:
    def test_prevalence_bounds(self):
        with pytest.raises(ValueError, match="prevalence"):
            ConditionSpec("x", 1.4, 0.0, pool("A"), 1.0, (4.0, 0.3), True)

    def test_empty_pool(self):
        with pytest.raises(ValueError, match="code_pool"):
            ConditionSpec("x", 0.4, 0.0, (), 1.0, (4.0, 0.3), True)

    def test_unknown_age_band(self):
        with pytest.raises(ValueError, match="age bands"):
            PopulationSpec(n_patients=1, seed=1, conditions=(),
                           background_visit_rate=1.0, background_code_pool=pool("Z"),
                           age_distribution={"(200, 300]": 1.0})
