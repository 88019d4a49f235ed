import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """The tiny preset trained once, single-threaded, and scored on its test split."""
    from threadpoolctl import threadpool_limits

    from dsfernet.config import tiny_preset
    from dsfernet.train import evaluate, train

    cfg = tiny_preset()
    out = tmp_path_factory.mktemp("tiny_run")
    with threadpool_limits(limits=1):
        start = time.perf_counter()
        result = train(cfg, out_dir=out)
        report = evaluate(result.best, "test", cfg, list(result.samples.values()))
        seconds = time.perf_counter() - start
    return {"cfg": cfg, "result": result, "report": report, "seconds": seconds, "out": out}
