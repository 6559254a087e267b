import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def loss_net():
    from styleaug.lossnet import LossNetwork

    return LossNetwork()


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    from styleaug.toy import make_shapes_dataset

    return make_shapes_dataset(tmp_path_factory.mktemp("toy") / "data", per_class=60, size=32, seed=0)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    if report.failed:
        _CRITERIA[n] = ("FAIL", report.user_properties)
    elif report.when == "call" and n not in _CRITERIA:
        _CRITERIA[n] = ("PASS", report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, props = _CRITERIA[n]
        detail = "; ".join(f"{k}={v}" for k, v in props if k != "report")
        terminalreporter.write_line(f"criterion {n}: {verdict}" + (f"  ({detail})" if detail else ""))
    for n in sorted(_CRITERIA):
        for k, v in _CRITERIA[n][1]:
            if k == "report":
                terminalreporter.write_line(v)
