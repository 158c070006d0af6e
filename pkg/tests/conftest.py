import pytest

from ragkv.kvstore import CacheStore
from ragkv.model import TOY_CONFIG, init_random

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy_weights():
    return init_random(TOY_CONFIG, 42)


@pytest.fixture
def store(tmp_path):
    return CacheStore(tmp_path / "store")


@pytest.fixture
def record_criterion():
    def record(number: int, name: str, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} -- {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
