import sys
from pathlib import Path

repo_root = Path(__file__).resolve().parents[1]
if str(repo_root) not in sys.path:
    sys.path.insert(0, str(repo_root))
import json
import logging

import numpy as np
import pytest

from pansharp.logging import JsonFormatter, configure_logging
from pansharp.schemas import NsctConfig
from pansharp.services.harness import make_scene
from pansharp.services.raster import expand_multiband


@pytest.fixture()
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_scene():
    return make_scene(seed=3, size=64, bands=4, ratio=4)


@pytest.fixture(scope="session")
def small_expanded(small_scene):
    return expand_multiband(small_scene.ms, small_scene.ratio)


@pytest.fixture()
def light_nsct():
    return NsctConfig(levels=2, directions_per_level=[4, 4])


@pytest.fixture()
def run_dir(tmp_path):
    return tmp_path / "runs"


class _CollectHandler(logging.Handler):
    def __init__(self):
        super().__init__()
        self.setFormatter(JsonFormatter())
        self.records = []

    def emit(self, record):
        self.records.append(json.loads(self.format(record)))


@pytest.fixture()
def log_records():
    """Formatted JSON records of the pansharp logger, captured at DEBUG."""
    logger = configure_logging()
    handler = _CollectHandler()
    previous = logger.level
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG)
    try:
        yield logger, handler.records
    finally:
        logger.removeHandler(handler)
        logger.setLevel(previous)
