import pytest

from sgmca import iae
from sgmca.experiment import FAMILY_NAMES, train_family_model

SMALL_CHANNELS = 20


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """Barely trained 20-channel family models: enough for plumbing tests."""
    d = tmp_path_factory.mktemp("models")
    for name in FAMILY_NAMES:
        res, _, _ = train_family_model(name, SMALL_CHANNELS, n_train=50, n_test=10, epochs=5, seed=1)
        iae.save_model(res.model, d / name)
    return d


_CRITERIA: dict = {}


def record(number: int, ok: bool, detail: str) -> None:
    """Store one acceptance line; printed at the end of the session."""
    _CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: desk-scale acceptance runs (slow)")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
