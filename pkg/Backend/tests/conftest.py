import os

# No audit file sink during tests; audit records are captured per test
os.environ.setdefault("LOGS_DIR", "")

import pytest

from app.core.config import PipelineConfig
from tests.helpers import bank_corpus, lost_deb_script, scripted_gateway


@pytest.fixture
def corpus():
    return bank_corpus()


@pytest.fixture
def lost_deb_gateway():
    return scripted_gateway(lost_deb_script())


@pytest.fixture
def pipeline_cfg():
    return PipelineConfig(few_shots_per_agent=0)
