import pytest

from loop_rl.trainer import TrainConfig, build_base_policy


@pytest.fixture(scope="session")
def default_config():
    return TrainConfig()


@pytest.fixture(scope="session")
def pretrained_policy(default_config):
    """Base policy pretrained once per session on the default mixture."""
    return build_base_policy(default_config)
