"""Shared pytest configuration.

Hypothesis runs with its deadline disabled: the tensor ops route through
an optional compiled backend whose first call may pay a one-off import
cost, and wall-clock deadlines make that flaky for no diagnostic gain.
"""

from hypothesis import HealthCheck, settings

import helpers

settings.register_profile(
    "hffn",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("hffn")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the release-gate verdicts where output capture cannot eat them."""
    if helpers.ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in helpers.ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)
