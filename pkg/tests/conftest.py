import numpy as np
import pytest

from mapprune import pipeline
from mapprune.core import FeatureMap, Landmark, SessionLog


def make_session(session_id, poses, events=()):
    """Session from (x, y, heading) tuples and (pose_index, landmark_id, range, bearing) tuples."""
    poses = [(float(i), x, y, h) for i, (x, y, h) in enumerate(poses)]
    ev = np.array(list(events), dtype=float).reshape(-1, 4)
    return SessionLog(session_id, np.array(poses, dtype=float).reshape(-1, 4), ev)


def make_map(points, persistent=None):
    lms = []
    for i, (x, y) in enumerate(points):
        p = None if persistent is None else bool(persistent[i])
        lms.append(Landmark(i, float(x), float(y), persistent=p))
    return FeatureMap(tuple(lms))


@pytest.fixture(scope="session")
def planted():
    """Full pipeline on the default planted world, seed 42."""
    return pipeline.score_world(pipeline.PipelineConfig())


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[k])
