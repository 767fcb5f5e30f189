import pytest

from expredit.config import load_config
from expredit.trainer import build_datasets, run_curriculum


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A tiny model trained through all three stages, with its config and datasets."""
    out = tmp_path_factory.mktemp("tiny_run")
    cfg = load_config("tiny", out_dir=str(out))
    datasets = build_datasets(cfg)
    bundle = run_curriculum(cfg, datasets=datasets)
    return bundle, cfg, datasets


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
