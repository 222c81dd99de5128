import time

import pytest
from hypothesis import settings

from pgcrlab.pipeline import PipelineConfig, run_seed

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")

SEEDS = (0, 1, 2, 3, 4)
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance():
    """Collector for the one-line verdicts printed after the run."""
    return ACCEPTANCE


@pytest.fixture(scope="session")
def pipeline_runs():
    """Full default pipeline for five seeds, shared by every end-to-end test."""
    cfg = PipelineConfig()
    t0 = time.perf_counter()
    runs = {seed: run_seed(cfg, seed) for seed in SEEDS}
    return {"config": cfg, "runs": runs, "seconds": time.perf_counter() - t0}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
