import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scene_align.trajectory import Scene, Trajectory

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: dict[str, list[str]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))


def pytest_runtest_logreport(report):
    label = dict(report.user_properties).get("criterion")
    if label is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _CRITERIA.setdefault(label, []).append(outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: int(s.split()[0])):
        outcomes = _CRITERIA[label]
        if "FAIL" in outcomes:
            verdict = "FAIL"
        elif all(o == "SKIP" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {label}: {verdict}")


def straight_scene(velocities, starts=None, obs_len=8, pred_len=12, dt=0.4, scene_id="s"):
    """Agents moving at constant per-step velocity; history ends at ``starts``."""
    velocities = np.asarray(velocities, dtype=float)
    starts = np.zeros_like(velocities) if starts is None else np.asarray(starts, dtype=float)
    t = np.arange(-obs_len + 1, pred_len + 1)[:, None]
    hist, fut = [], []
    for v, s in zip(velocities, starts):
        pts = s + t * v
        hist.append(Trajectory(pts[:obs_len], dt))
        fut.append(Trajectory(pts[obs_len:], dt))
    return Scene(list(range(len(velocities))), hist, fut, scene_id=scene_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
