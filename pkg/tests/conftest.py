"""Session fixtures: the default feasibility table and strategy, built once."""

import os
import time

import pytest

from pushrecovery.cli import synthesize_strategy
from pushrecovery.config import StackConfig
from pushrecovery.traj_opt.table import build_feasibility_table, write_table

PROBE_PUSH = dict(direction=67.2, magnitude=0.337, step=1)   # (0.5, 0) -> (0.63, 0.31) m/s


def jobs() -> int:
    raw = os.environ.get("PUSHREC_JOBS")
    return max(1, int(raw)) if raw else (os.cpu_count() or 1)


@pytest.fixture(scope="session")
def cfg():
    return StackConfig()


@pytest.fixture(scope="session")
def table_build(cfg):
    """The default table and its build time in seconds."""
    t0 = time.perf_counter()
    table = build_feasibility_table(cfg.model, cfg.pipm, jobs=jobs(), options=cfg.solver)
    return table, time.perf_counter() - t0


@pytest.fixture(scope="session")
def table(table_build):
    return table_build[0]


@pytest.fixture(scope="session")
def synthesized(cfg, table):
    return synthesize_strategy(cfg, table)


@pytest.fixture(scope="session")
def game(synthesized):
    return synthesized[0]


@pytest.fixture(scope="session")
def strategy(synthesized):
    return synthesized[1]


@pytest.fixture(scope="session")
def artifacts(cfg, table, strategy, tmp_path_factory):
    """Table and strategy files as the CLI writes them."""
    root = tmp_path_factory.mktemp("artifacts")
    table_path = str(root / "table.csv")
    meta = write_table(table, table_path, cfg.table_hash, cfg.solver)
    strategy_path = root / "strategy.json"
    strategy_path.write_text(strategy.to_json(cfg.strategy_hash, meta["csv_sha256"]))
    return {"table": table_path, "strategy": str(strategy_path), "root": root}


# acceptance verdicts, printed after the test summary
VERDICTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
