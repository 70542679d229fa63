"""Session-wide fixtures: the Monte Carlo studies shared across modules.

Each study is drawn once per session; tests only read summary rows.  All
runs use the same base seed so every assertion in the suite refers to one
reproducible set of replications.
"""

import pytest

from ocbps.simulation import DgpSpec, run_monte_carlo

MC_REPS = 500
MC_SEED = 1
BETA1_GRID = (0.0, 0.33, 0.67, 1.0)


def _study(scenario, beta1, estimators):
    return run_monte_carlo(
        DgpSpec(scenario=scenario, n=1000, beta1=beta1),
        estimators=estimators,
        reps=MC_REPS,
        base_seed=MC_SEED,
    )


@pytest.fixture(scope="session")
def correct_models_study():
    """Overlap sweep with both working models correct."""
    names = ("true", "glm", "cbps", "ocbps")
    return {b1: _study("both-correct", b1, names) for b1 in BETA1_GRID}


@pytest.fixture(scope="session")
def wrong_ps_study():
    """Poor-overlap design with a badly misspecified treatment model."""
    return _study(
        "ps-misspecified", 1.0, ("glm", "cbps", "ocbps", "ocbps-sieve")
    )


@pytest.fixture(scope="session")
def tilted_study():
    """Locally misspecified treatment model across the overlap sweep."""
    names = ("glm", "cbps", "ocbps")
    return {b1: _study("ps-local-misspec", b1, names) for b1 in BETA1_GRID}


@pytest.fixture(scope="session")
def wrong_outcome_study():
    """Quadratic outcome surfaces under a linear working outcome model."""
    return _study("outcome-misspecified", 0.0, ("glm", "cbps", "ocbps"))


@pytest.fixture(scope="session")
def both_wrong_study():
    """Both working models misspecified at once."""
    return _study("both-misspecified", 0.0, ("cbps", "ocbps"))
