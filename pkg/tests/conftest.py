import sys
from dataclasses import replace
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parents[1]
SPECS_DIR = REPO_ROOT / "specs"

sys.path.insert(0, str(REPO_ROOT / "src"))

from claimvec import claims_data, synthgen  # noqa: E402


@pytest.fixture(scope="session")
def default_spec():
    return synthgen.load_population_spec(SPECS_DIR / "default_population.json")


@pytest.fixture(scope="session")
def small_population(default_spec):
    """1,200 patients drawn from the default spec; shared across test modules."""
    spec = replace(default_spec, n_patients=1200)
    claims, members = synthgen.generate_population(spec)
    return spec, claims, members


@pytest.fixture(scope="session")
def small_cohort(small_population):
    spec, claims, members = small_population
    return claims_data.build_cohort(claims, members, spec.base_year, spec.target_year)


@pytest.fixture()
def specs_dir():
    return SPECS_DIR
