from __future__ import annotations

import pytest

from searchrl.agent_runtime import BudgetConfig
from searchrl.sim_env import SimEnvironment, generate_corpus


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(chains=4, hops=2, distractors=3, seed=11)


@pytest.fixture(scope="session")
def tiny_env(tiny_corpus):
    return SimEnvironment(tiny_corpus)


@pytest.fixture()
def budget8():
    return BudgetConfig(turn_limit=8, min_turns=0)
