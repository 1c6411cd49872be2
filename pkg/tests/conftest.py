import sys
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src import datagen  # noqa: E402
from src.broker import Broker, BrokerServer  # noqa: E402
from src.models import (  # noqa: E402
    ApplianceCatalog,
    ApplianceEntry,
    ApplianceProfile,
    ScenarioConfig,
)


@pytest.fixture
def small_catalog() -> ApplianceCatalog:
    """A lamp (one level) and a two-speed fan."""
    return ApplianceCatalog(
        entries=[
            ApplianceEntry(
                appliance_id="lamp",
                display_name="Lamp",
                level_count=1,
                active_power=[100.0],
                reactive_power=[0.0],
            ),
            ApplianceEntry(
                appliance_id="fan",
                display_name="Fan",
                level_count=2,
                active_power=[30.0, 60.0],
                reactive_power=[10.0, 20.0],
            ),
        ]
    )


@pytest.fixture
def small_profiles() -> list:
    return [
        ApplianceProfile(appliance_id="lamp", mean_on_s=60, mean_off_s=60),
        ApplianceProfile(appliance_id="fan", mean_on_s=40, mean_off_s=80),
    ]


@pytest.fixture
def small_scenario(small_catalog, small_profiles) -> ScenarioConfig:
    return ScenarioConfig(
        catalog=small_catalog,
        profiles=small_profiles,
        duration_s=1200.0,
        sample_period_s=2.0,
        seed=3,
    )


@pytest.fixture
def scenario_frame(small_scenario) -> pd.DataFrame:
    """600 noiseless samples of the small scenario."""
    return datagen.generate_scenario(small_scenario)


@pytest.fixture
def toy_windows() -> tuple:
    """
    Linearly separable windows: target ``on`` is 1 iff the window's mean
    active power is above 50.
    """
    rng = np.random.default_rng(0)
    n, w = 200, 5
    on = rng.integers(0, 2, n)
    level = np.where(on == 1, 100.0, 10.0)
    X = np.empty((n, w, 2))
    X[:, :, 0] = level[:, None] + rng.normal(0, 3, (n, w))
    X[:, :, 1] = rng.normal(0, 1, (n, w))
    return X, on[:, None]


@pytest.fixture
def broker_server() -> Iterator[BrokerServer]:
    server = BrokerServer("127.0.0.1:0", Broker(default_capacity=1000))
    server.start()
    try:
        yield server
    finally:
        server.stop()
