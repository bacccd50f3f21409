import numpy as np
import pytest

from comptonimager import physics
from comptonimager.forward import build_direction_lut
from comptonimager.geometry import DetectorArray, SphereModel

CS137 = 0.6617


@pytest.fixture(scope="session")
def array():
    return DetectorArray.bars_4x7()


@pytest.fixture(scope="session")
def table():
    return physics.load_lyso()


@pytest.fixture(scope="session")
def lut(array, table):
    """Full 2563-node direction-prior table (cached on disk after the first build)."""
    return build_direction_lut(array, CS137, SphereModel(300.0), table=table)


@pytest.fixture(scope="session")
def small_lut(array, table, tmp_path_factory):
    """Coarse 42-node table for tests that only need a normalizer."""
    return build_direction_lut(array, CS137, SphereModel(300.0), n_nodes=42, n_samples=10_000, table=table,
                               cache=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion in the terminal summary

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if hasattr(report, "wasxfail"):
            status = "FAIL (known; see notes)" if report.skipped else "FAIL (unexpected pass of a known failure)"
        else:
            status = "PASS" if report.passed else "FAIL"
        _ACCEPTANCE[props["criterion"]] = (status, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: (int(s.split()[0].rstrip("ab")), s)):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"criterion {name}: {status}  {detail}")
