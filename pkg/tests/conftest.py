from pathlib import Path

import pytest

from srcn import experiment as ex
from srcn.data import lattice_network

DESK_TOML = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"


def desk_model_config(offsets=(1, 2, 3), **overrides):
    cfg = ex.load_config(DESK_TOML)
    cfg["model"].update(overrides)
    net, _ = lattice_network(n_links=int(cfg["data"]["n_links"]))
    return ex.model_config(cfg, net, offsets)


@pytest.fixture
def desk_config():
    return desk_model_config()


# one verdict line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
