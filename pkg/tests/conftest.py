import csv
import json
import os
import time
from pathlib import Path

import pytest

from bilateral_il import cli

# set BILATERAL_IL_PIPELINE_DIR to a finished run (with timings.json) to skip the 20-minute rebuild
PIPELINE_ENV = "BILATERAL_IL_PIPELINE_DIR"
STAGES = (
    ("collect",),
    ("train", "--model", "1"),
    ("train", "--model", "2"),
    ("eval",),
    ("protractor",),
)

ACCEPTANCE_LINES: list[str] = []


class Pipeline:
    def __init__(self, out: Path):
        self.out = out
        self.timings = json.loads((out / "timings.json").read_text())

    @property
    def runtime(self) -> float:
        return sum(self.timings.values())

    def csv(self, name: str) -> list[dict]:
        with open(self.out / name, newline="") as fh:
            return list(csv.DictReader(fh))


def run_pipeline(out: Path) -> None:
    timings = {}
    for stage in STAGES:
        t0 = time.perf_counter()
        code = cli.main([*stage, "--out", str(out)])
        timings[" ".join(stage)] = time.perf_counter() - t0
        if code != cli.EXIT_OK:
            raise RuntimeError(f"pipeline stage {' '.join(stage)} exited with {code}")
    (out / "timings.json").write_text(json.dumps(timings, indent=1) + "\n")


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    given = os.environ.get(PIPELINE_ENV)
    if given:
        return Pipeline(Path(given))
    out = tmp_path_factory.mktemp("pipeline")
    run_pipeline(out)
    return Pipeline(out)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
