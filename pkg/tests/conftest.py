import pytest
from loguru import logger

from config import configure_logging
from models import DelayModel, NetConfig, Toggles
from services.crypto_service import KeyRegistry
from services.execution_service import load_genesis
from services.scenario_service import Scenario

GENESIS = {'chain_id': 1, 'clients': {'seed': 7, 'count': 8, 'balance': 1_000_000}}


@pytest.fixture(autouse=True)
def quiet_logs():
    configure_logging('WARNING')
    yield
    logger.remove()


@pytest.fixture
def genesis():
    return load_genesis(dict(GENESIS))


@pytest.fixture
def config():
    return NetConfig(n=4, f=1, seed=1, delay=DelayModel('fixed', 50.0, 50.0))


@pytest.fixture
def registry(config):
    return KeyRegistry(config.n, config.seed)


@pytest.fixture
def make_scenario(genesis):
    """Scenario factory over the small test genesis"""
    def build(n=4, f=1, seed=1, faults=(), duration_ms=2000.0, rate_per_lane=10.0, delay=None,
              duplicate_fraction=0.0, allow_excess_faults=False, **toggles):
        net = NetConfig(n=n, f=f, seed=seed, delay=delay or DelayModel('fixed', 50.0, 50.0),
                        faults=tuple(faults), allow_excess_faults=allow_excess_faults)
        return Scenario(name='test', net=net, genesis=genesis, duration_ms=duration_ms,
                        rate_per_lane=rate_per_lane, mix={'transfer': 0.6, 'store': 0.2, 'counter': 0.2},
                        duplicate_fraction=duplicate_fraction, toggles=Toggles(**toggles))
    return build
