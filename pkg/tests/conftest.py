import numpy as np
import pytest

from adhere_ml import features as ft
from adhere_ml import ingest, synthcohort

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _ACCEPTANCE[number] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} [{verdict}] {title}")


def _pipeline(spec):
    events_csv, surveys_csv, truth = synthcohort.generate(spec)
    events = ingest.parse_events(events_csv)
    days = ingest.label_daily(ingest.exclude_burn_in(events))
    weeks = ingest.label_weekly(days)
    waves = ingest.parse_surveys(surveys_csv)
    starts = ingest.study_start_dates(events)
    daily = ft.attach_static(ft.build_daily_samples(days), waves, starts)
    weekly = ft.attach_static(ft.build_weekly_samples(weeks), waves, starts)
    return {
        "events": events, "days": days, "weeks": weeks, "waves": waves, "truth": truth,
        "daily": daily, "daily_map": ft.name_map_for("daily", daily),
        "weekly": weekly, "weekly_map": ft.name_map_for("weekly", weekly),
    }


@pytest.fixture(scope="session")
def small_cohort():
    """Ten subjects over 120 days: enough for every stage, fast enough for unit tests."""
    return _pipeline(synthcohort.CohortSpec(n_subjects=10, n_days=120, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
