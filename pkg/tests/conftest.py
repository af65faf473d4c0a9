import os
from contextlib import contextmanager
from importlib import resources
from pathlib import Path

import pytest

from popcal.dataset import ItemCatalog, RatingsTable, parse_catalog, parse_ratings

FIXTURE_DIR = Path(str(resources.files("popcal") / "data" / "fixture"))


def ml1m_dir() -> Path | None:
    """Directory holding MovieLens 1M ``ratings.dat`` and ``movies.dat``, if present."""
    candidates = [os.environ.get("POPCAL_ML1M_DIR"), Path(__file__).parents[1] / "data" / "ml-1m"]
    for c in candidates:
        if c and (Path(c) / "ratings.dat").exists() and (Path(c) / "movies.dat").exists():
            return Path(c)
    return None


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE_DIR


@pytest.fixture(scope="session")
def fixture_ratings() -> RatingsTable:
    return parse_ratings(FIXTURE_DIR / "ratings.csv", format="csv")


@pytest.fixture(scope="session")
def fixture_catalog() -> ItemCatalog:
    return parse_catalog(FIXTURE_DIR / "items.csv", format="csv")


def table(*records) -> RatingsTable:
    return RatingsTable.from_records(records)


_ACCEPTANCE: list[str] = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list[tuple[bool, str]] = []

    @property
    def failures(self) -> list[str]:
        return [d for ok, d in self.checks if not ok]

    def check(self, ok: bool, detail: str) -> None:
        self.checks.append((bool(ok), detail))

    def line(self, exc: BaseException | None) -> str:
        ok = exc is None and not self.failures
        parts = [d if good else f"{d} (miss)" for good, d in self.checks]
        if exc is not None:
            parts.append(f"{type(exc).__name__}: {exc}")
        return f"criterion {self.number} [{'PASS' if ok else 'FAIL'}] {self.title}: {'; '.join(parts)}"


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    @contextmanager
    def run(number: int, title: str):
        c = _Criterion(number, title)
        try:
            yield c
        except BaseException as e:
            _record(request, c.line(e))
            raise
        _record(request, c.line(None))
        assert not c.failures, "; ".join(c.failures)

    return run


def _record(request, line: str) -> None:
    _ACCEPTANCE.append(line)
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
