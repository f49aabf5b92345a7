import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from segkit import cli
from segkit.bench import pinned_threads


@dataclass
class OverfitRun:
    out: Path
    exit_code: int
    seconds: float

    @property
    def summary(self) -> dict:
        return json.loads((self.out / "train.json").read_text())

    def loss_rows(self):
        lines = (self.out / "loss.csv").read_text().splitlines()[1:]
        return [dict(zip(("iter", "loss", "lr", "acc"), map(float, ln.split(",")))) for ln in lines]


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory) -> OverfitRun:
    """The default (overfit recipe) training run through the CLI, on one thread."""
    out = tmp_path_factory.mktemp("overfit")
    t0 = time.perf_counter()
    with pinned_threads(1):
        code = cli.main(["train", "--output-dir", str(out)])
    return OverfitRun(out, code, time.perf_counter() - t0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
