import numpy as np
import pytest

from vsgmn.data import generate_synthetic_dataset

CRITERIA = {}


def record_criterion(number, title, passed, detail=""):
    CRITERIA[number] = (title, bool(passed), detail)
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] criterion {number}: {title}" + (f"  ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, detail = CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        suffix = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}{suffix}")


@pytest.fixture
def criterion():
    return record_criterion


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic():
    return generate_synthetic_dataset()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(
        n_seen=5, n_unseen=3, attr_dim=6, feature_dim=10, samples_per_class=8, seed=3
    )
