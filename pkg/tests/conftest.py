import json
from pathlib import Path

import pytest

from voltcontrol.config import DATA_DIR, REFERENCE_CASE, REFERENCE_PROFILE
from voltcontrol.network import Network, load_case, parse_case
from voltcontrol.profiles import ScenarioProfile, load_profile_file

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def reference_net() -> Network:
    return load_case(REFERENCE_CASE)


@pytest.fixture(scope="session")
def three_bus_net() -> Network:
    return load_case(DATA_DIR / "three_bus.case")


@pytest.fixture(scope="session")
def two_bus_net() -> Network:
    return load_case(DATA_DIR / "two_bus.case")


@pytest.fixture(scope="session")
def day_profile(reference_net) -> ScenarioProfile:
    return load_profile_file(REFERENCE_PROFILE, reference_net)


@pytest.fixture
def flat_profile(reference_net) -> ScenarioProfile:
    return ScenarioProfile.for_network(reference_net)


@pytest.fixture
def two_bus_raw() -> dict:
    return json.loads((DATA_DIR / "two_bus.case").read_text(encoding="utf-8"))


@pytest.fixture
def case_from():
    """Build a network from a (possibly edited) raw case dict."""

    def build(raw: dict) -> Network:
        return parse_case(json.dumps(raw))

    return build
