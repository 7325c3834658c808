from dataclasses import replace

import numpy as np
import pytest

from sbmtp.kinematics import load_chain, planar_chain
from sbmtp.sim import DATA_DIR, load_scenario, run_scenario


@pytest.fixture(scope="session")
def arm():
    return load_chain(DATA_DIR / "chain_7dof.json")


@pytest.fixture(scope="session")
def two_link():
    return planar_chain([1.0, 1.0])


def random_configs(chain, count, seed=0, shrink=1.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(chain.lower_bounds * shrink, chain.upper_bounds * shrink, size=(count, chain.dof))


_RUNS = {}


def scenario_run(name, with_optimization):
    """Run a shipped scenario once per session and reuse the result."""
    key = (name, with_optimization)
    if key not in _RUNS:
        cfg = replace(load_scenario(name), with_optimization=with_optimization)
        _RUNS[key] = (cfg, *run_scenario(cfg))
    return _RUNS[key]
