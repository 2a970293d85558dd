import pytest

from trafficshift.dataset import ScenarioSpec
from trafficshift.ingestion import SyntheticConfig, generate_synthetic
from trafficshift.pipeline import prepare_scenario


@pytest.fixture(scope="session")
def toy_data():
    """Three regions, three months; the last one is the test month."""
    cube = generate_synthetic(SyntheticConfig(n_regions=3, n_months=3, amplitude=20.0, noise=0.1,
                                              coupling=0.5, seed=4, start=(2023, 4), grid_cols=3))
    return prepare_scenario(cube, ScenarioSpec(test_month=(2023, 6), train_months=2))
