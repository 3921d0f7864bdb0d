import pytest

from csitwin.channel import SystemConfig
from csitwin.pipeline import generate_dataset
from csitwin.scene import builtin_scenes


@pytest.fixture(scope="session")
def small_datasets():
    """200-sample datasets of each built-in scenario (shared grid seed)."""
    target, twin, baseline = builtin_scenes()
    cfg = SystemConfig()
    return {
        "target": generate_dataset(target, cfg, seed=1, count=200),
        "twin": generate_dataset(twin, cfg, seed=1, count=200),
        "baseline": generate_dataset(baseline, cfg, seed=1, count=200),
    }


_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
