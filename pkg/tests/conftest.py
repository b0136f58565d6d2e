"""Shared fixtures: seeded generators, tiny configs and synthetic corpora."""
import pytest

from fixtures import make_fixtures
from helpers import tiny_overrides
from numerics import SeededRng
from settings import build_config


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def tiny_cfg(tmp_path):
    return build_config(tiny_overrides(tmp_path))


@pytest.fixture
def corpus(tmp_path):
    """Synthetic corpus under tmp_path/fixtures, where ``tiny_cfg`` looks for it."""
    return make_fixtures(str(tmp_path / "fixtures"), seed=0, counts={"train": 4, "valid": 2, "test": 2})
