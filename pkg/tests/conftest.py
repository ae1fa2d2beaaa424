import numpy as np
import pandas as pd
import pytest

from bridge_mixed.data import Covariate, build_design, make_dataset

# criterion id -> (description, outcome); filled by tests in test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number")
    config.addinivalue_line("markers", "slow: long-running fit")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, text = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = ACCEPTANCE_RESULTS.get(n, (text, "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and prev == "PASS" else "FAIL"
        if report.outcome == "skipped":
            status = "SKIP"
        ACCEPTANCE_RESULTS[n] = (text, status)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        text, status = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")


def toy_frame(seed=1, n_families=2, n_individuals=6, waves=3):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_individuals):
        for w in range(1, waves + 1):
            rows.append(dict(family_id=f"f{i % n_families}", individual_id=f"p{i}", wave=w,
                             outcome=int(rng.integers(1, 4)), x=float(rng.normal()),
                             g=int(rng.integers(0, 2))))
    return pd.DataFrame(rows)


TOY_COVARIATES = [Covariate("x"), Covariate("g", kind="categorical", reference=0)]


@pytest.fixture
def toy():
    """2-family, 6-individual, 3-wave dataset with one continuous and one binary covariate."""
    ds = make_dataset(toy_frame(), categories=3)
    return ds, build_design(ds, TOY_COVARIATES)
