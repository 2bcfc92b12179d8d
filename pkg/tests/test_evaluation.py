import math
from dataclasses import replace

import numpy as np
import pytest

from mapprune import evaluation, simulator
from mapprune.core import SessionLog
from mapprune.evaluation import (
    CovarianceError,
    CurvePoint,
    EkfState,
    EvalCurve,
    MotionNoise,
    SensorNoise,
    associate,
    check_spd,
    drop_curve,
    ekf_localize,
    max_cov_magnitude,
    max_cov_trace,
    odometry,
    save_curves,
)
from mapprune.selection import rank_subset

from conftest import make_map, make_session

ZERO_MOTION = MotionNoise(0.0, 0.0)
ZERO_SENSOR = SensorNoise(0.0, 0.0)


@pytest.fixture(scope="module")
def small():
    cfg = simulator.WorldConfig(n_persistent=120, n_ephemeral=40, n_sessions=3, seed=9)
    world = simulator.generate_world(cfg)
    return cfg, world, simulator.simulate_all(world, cfg)


def test_odometry_recovers_poses():
    s = make_session(0, [(0, 0, 0.0), (1, 0, 0.5), (1.5, 1, 1.2), (1.0, 2.0, 2.5)])
    u = odometry(s.poses)
    x, y, h = 0.0, 0.0, 0.0
    for dx, dy, dh in u:
        x, y = x + math.cos(h) * dx - math.sin(h) * dy, y + math.sin(h) * dx + math.cos(h) * dy
        h += dh
    assert (x, y) == pytest.approx((1.0, 2.0))
    assert h == pytest.approx(2.5)


def test_noiseless_run_tracks_ground_truth(small):
    cfg, world, _ = small
    quiet = replace(cfg, range_noise=0.0, bearing_noise_deg=0.0)
    s = simulator.simulate_session(world, quiet, 1)
    run = ekf_localize(world.map, s, ZERO_MOTION, ZERO_SENSOR)
    est = np.array([st.mean[:2] for st in run.states])
    err = np.hypot(*(est - s.pose_xy()).T)
    assert err.max() < 1e-6
    assert not run.failed
    assert run.n_associated == run.n_detections


def test_noisy_run_is_reasonable(small):
    _, world, sessions = small
    run = ekf_localize(world.map, sessions[0])
    est = np.array([st.mean[:2] for st in run.states])
    err = np.hypot(*(est - sessions[0].pose_xy()).T)
    assert err.max() < 0.5
    assert run.association_rate > 0.95
    for st in run.states:
        check_spd(st.covariance)


def test_no_detections_trace_grows():
    fmap = make_map([(500.0, 500.0)])
    poses = [(float(i), 0.1 * i * i / 20, 0.01 * i) for i in range(60)]
    s = make_session(0, poses)
    run = ekf_localize(fmap, s)
    tr = np.array([st.covariance[0, 0] + st.covariance[1, 1] for st in run.states])
    assert np.all(np.diff(tr) > 0)
    assert max_cov_magnitude(run.states) == pytest.approx(
        np.linalg.eigvalsh(run.states[-1].covariance[:2, :2])[-1]
    )


def test_max_cov_examples():
    s2 = 0.37
    states = [EkfState(np.zeros(3), np.diag([s2, s2, 0.1])) for _ in range(4)]
    assert max_cov_magnitude(states) == pytest.approx(s2)
    one = [EkfState(np.zeros(3), np.array([[4.0, 0, 0], [0, 1.0, 0], [0, 0, 0.5]]))]
    assert max_cov_magnitude(one) == pytest.approx(4.0)
    assert max_cov_trace(one) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        max_cov_magnitude([])


def test_empty_map_rejected():
    with pytest.raises(ValueError):
        ekf_localize(make_map([]), make_session(0, [(0, 0, 0)]))


def test_check_spd():
    check_spd(np.eye(3))
    with pytest.raises(CovarianceError):
        check_spd(np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(CovarianceError):
        check_spd(np.array([[1.0, 0.5, 0], [0.0, 1.0, 0], [0, 0, 1.0]]))


def reference_filter(fmap, session, motion, sensor, rng):
    """Plain numpy EKF that uses the vectorised ``associate`` for data association."""
    lxy = fmap.xy
    sv, sw = max(motion.sigma_v, 1e-6), max(motion.sigma_w, 1e-6)
    Q = np.diag([sv**2, sv**2, sw**2])
    R = np.diag([max(sensor.sigma_r, 1e-6) ** 2, max(sensor.sigma_b, 1e-6) ** 2])
    u = odometry(session.poses)
    u = u + rng.normal(size=u.shape) * np.array([motion.sigma_v, motion.sigma_v, motion.sigma_w])
    p0 = session.poses[0]
    x = np.array([p0["x"], p0["y"], p0["heading"]])
    P = np.diag([0.01, 0.01, math.radians(1.0) ** 2])
    ev = session.events
    means, assoc_all = [], []
    for k in range(session.n_poses):
        if k > 0:
            dx, dy, dth = u[k - 1]
            c, s = math.cos(x[2]), math.sin(x[2])
            F = np.array([[1, 0, -s * dx - c * dy], [0, 1, c * dx - s * dy], [0, 0, 1]])
            G = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
            x = x + np.array([c * dx - s * dy, s * dx + c * dy, dth])
            x[2] = (x[2] + math.pi) % (2 * math.pi) - math.pi
            P = F @ P @ F.T + G @ Q @ G.T
        sel = ev["pose_index"] == k
        meas = np.column_stack([ev["range"][sel], ev["bearing"][sel]])
        if len(meas):
            idx, _ = associate(x, P, lxy, meas, R)
            assoc_all.append(idx)
            ok = idx >= 0
            if ok.any():
                d = lxy[idx[ok]] - x[:2]
                q = (d**2).sum(axis=1)
                r = np.sqrt(q)
                H = np.zeros((2 * ok.sum(), 3))
                H[0::2, 0], H[0::2, 1] = -d[:, 0] / r, -d[:, 1] / r
                H[1::2, 0], H[1::2, 1], H[1::2, 2] = d[:, 1] / q, -d[:, 0] / q, -1.0
                z = np.column_stack([r, np.arctan2(d[:, 1], d[:, 0]) - x[2]])
                nu = (meas[ok] - z).ravel()
                nu[1::2] = (nu[1::2] + math.pi) % (2 * math.pi) - math.pi
                Rb = np.kron(np.eye(ok.sum()), R)
                S = H @ P @ H.T + Rb
                K = P @ H.T @ np.linalg.inv(S)
                x = x + K @ nu
                x[2] = (x[2] + math.pi) % (2 * math.pi) - math.pi
                A = np.eye(3) - K @ H
                P = A @ P @ A.T + K @ Rb @ K.T
        means.append(x.copy())
    return np.array(means), np.concatenate(assoc_all) if assoc_all else np.zeros(0)


def test_kernel_matches_reference_filter(small):
    _, world, sessions = small
    sub = rank_subset(world.map, np.arange(len(world.map), dtype=float), 0.6)
    s = sessions[2]
    # a few hundred poses is plenty and keeps the python loop quick
    short = SessionLog(s.session_id, s.poses[:200], s.events[s.events["pose_index"] < 200])
    run = ekf_localize(sub, short, rng=np.random.default_rng(5))
    ref_means, ref_assoc = reference_filter(sub, short, MotionNoise(), SensorNoise(), np.random.default_rng(5))
    got = np.array([st.mean for st in run.states])
    np.testing.assert_allclose(got, ref_means, atol=1e-8)
    assert run.n_associated == int(np.count_nonzero(ref_assoc >= 0))


def test_more_detections_lower_covariance(small):
    _, world, sessions = small
    diffs = []
    for seed in range(6):
        s = sessions[seed % len(sessions)]
        keep = np.random.default_rng(seed).random(s.events.size) < 0.3
        sparse = SessionLog(s.session_id, s.poses, s.events[keep])
        dense = ekf_localize(world.map, s, rng=seed)
        thin = ekf_localize(world.map, sparse, rng=seed)
        diffs.append(max_cov_magnitude(dense.states) - max_cov_magnitude(thin.states))
    assert np.median(diffs) <= 0


def test_failure_on_low_association():
    # the only landmark sits far from where the detections claim it is
    fmap = make_map([(30.0, 30.0)])
    s = make_session(0, [(0, 0, 0), (1, 0, 0)], [(0, 0, 5.0, 0.0), (1, 0, 4.0, 0.0)])
    run = ekf_localize(fmap, s)
    assert run.n_associated == 0 and run.failed


def test_curve_validation():
    p = CurvePoint(0.1, 1.0, 2.0, False, 5)
    with pytest.raises(ValueError):
        EvalCurve("score", (p, p))
    c = EvalCurve("score", (CurvePoint(0.0, 1, 1, False, 9), CurvePoint(0.5, 2, 2, True, 4)))
    assert c.first_failure() == 0.5
    assert EvalCurve("x", (CurvePoint(0.0, 1, 1, False, 9),)).first_failure() == math.inf


# ---- planted world


@pytest.fixture(scope="module")
def planted_curves(planted):
    res = planted
    key = res.matrix.column("track_length")
    return drop_curve(res.world.map, res.scores, key, res.holdout, [0.0, 0.85, 0.99], seed=42)


def test_drop_zero_identical(planted_curves):
    score, track = planted_curves
    assert score.points[0] == track.points[0]
    assert score.points[0].n_landmarks == 300


def test_drop_99_both_fail(planted_curves):
    score, track = planted_curves
    assert score.points[-1].failed and track.points[-1].failed


def test_full_map_vs_85_percent_dropped(planted, planted_curves):
    _, track = planted_curves
    assert not track.points[0].failed
    assert track.points[1].failed
    # the same predicate on a single held-out drive
    s = planted.holdout[0]
    full = ekf_localize(planted.world.map, s, rng=evaluation.session_seed(42, s.session_id))
    assert not full.failed


def test_drop_curve_threads_match(planted):
    res = planted
    key = res.matrix.column("track_length")
    a = drop_curve(res.world.map, res.scores, key, res.holdout[:2], [0.0, 0.5], seed=3)
    b = drop_curve(res.world.map, res.scores, key, res.holdout[:2], [0.0, 0.5], seed=3, n_jobs=4)
    assert a == b


def test_save_curves(tmp_path, planted_curves):
    save_curves(planted_curves, tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "strategy,drop_rate,max_cov,failed"
    assert len(rows) == 1 + 2 * 3
    assert rows[1].startswith("score,0.0,")
