import pytest
from dataclasses import replace

from oodsim.config import ScenarioConfig
from oodsim.render import OBSTACLE_TYPES
from oodsim.sim import run_scenario


@pytest.fixture(scope="session")
def campaign_runs():
    """Default 40-run seeded campaign: 10 runs each of the 4 obstacle types."""
    names = [o.name for o in OBSTACLE_TYPES]
    runs = []
    for i in range(40):
        cfg = replace(ScenarioConfig(), seed=7 + i, obstacle_type=names[i % 4])
        runs.append(run_scenario(cfg))
    return runs
