import numpy as np
import pytest

from phaedra.model import ModelConfig


def tiny_config(variant="phaedra", **kw):
    """A small backbone that keeps every code path (attention included) but runs in milliseconds."""
    base = dict(variant=variant, base_channels=8, channel_multipliers=(1, 2), num_res_blocks=1, groups=4,
                input_resolution=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, bool] = {}
_details: dict[int, list[str]] = {}


@pytest.fixture
def note(request):
    """Record a diagnostic line shown under the test's criterion in the final summary."""
    n = request.node.get_closest_marker("criterion").args[0]

    def add(line: str) -> None:
        print(line)
        _details.setdefault(n, []).append(line)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.skipped:
        return
    if report.when == "call" or report.failed:
        n = marker.args[0]
        _criteria[n] = _criteria.get(n, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"{'PASS' if _criteria[n] else 'FAIL'} criterion {n}")
        for line in _details.get(n, []):
            terminalreporter.write_line(f"    {line}")
