"""Known-map EKF localisation and covariance-versus-drop-rate curves.

The filter state is (x, y, heading). Odometry between consecutive logged
poses, corrupted with Gaussian noise, drives the prediction. Each pose's
detections are associated to map landmarks by nearest Mahalanobis distance
inside a chi-square gate and applied as one stacked range-bearing update in
Joseph form.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .core import FeatureMap, SessionLog, wrap_angle
from .selection import rank_subset

GATE_CHI2_2DOF_99 = 9.21
FAIL_TRACE = 25.0
FAIL_ASSOC_FRACTION = 0.10
# filter noise floor so zero-noise runs keep a positive-definite covariance
NOISE_FLOOR = 1e-6


class CovarianceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MotionNoise:
    sigma_v: float = 0.1  # m per step, on each translation component
    sigma_w: float = math.radians(0.5)  # rad per step


@dataclass(frozen=True)
class SensorNoise:
    sigma_r: float = 0.05
    sigma_b: float = math.radians(0.5)


@dataclass(frozen=True)
class EkfState:
    mean: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class LocalizationRun:
    states: list[EkfState]
    failed: bool
    n_detections: int
    n_associated: int
    max_trace: float

    @property
    def association_rate(self) -> float:
        return self.n_associated / self.n_detections if self.n_detections else float("nan")


def check_spd(P: np.ndarray, tol: float = 1e-9) -> None:
    """Raise unless ``P`` (or a stack of them) is symmetric within ``tol`` and positive definite."""
    if np.max(np.abs(P - np.swapaxes(P, -1, -2))) > tol:
        raise CovarianceError("covariance lost symmetry")
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise CovarianceError("covariance is not positive definite") from None


def odometry(poses: np.ndarray) -> np.ndarray:
    """Relative motion (dx, dy, dtheta) between consecutive poses, in the earlier pose's frame."""
    x, y, h = poses["x"], poses["y"], poses["heading"]
    dx, dy = np.diff(x), np.diff(y)
    c, s = np.cos(h[:-1]), np.sin(h[:-1])
    return np.column_stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(np.diff(h))])


def _predicted_measurements(mean, lxy):
    d = lxy - mean[:2]
    q = np.einsum("ij,ij->i", d, d)
    r = np.sqrt(q)
    z = np.column_stack([r, _wrap(np.arctan2(d[:, 1], d[:, 0]) - mean[2])])
    H = np.zeros((len(lxy), 2, 3))
    H[:, 0, 0] = -d[:, 0] / r
    H[:, 0, 1] = -d[:, 1] / r
    H[:, 1, 0] = d[:, 1] / q
    H[:, 1, 1] = -d[:, 0] / q
    H[:, 1, 2] = -1.0
    return z, H


def _wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def associate(mean, P, lxy, meas, R, gate=GATE_CHI2_2DOF_99):
    """Nearest map landmark per measurement by Mahalanobis distance; -1 when outside the gate."""
    m = len(meas)
    if m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    # a landmark whose predicted range is further than this cannot pass the range part of the gate
    reach = meas[:, 0].max() + math.sqrt(gate * (P[0, 0] + P[1, 1] + R[0, 0])) + 1e-9
    d = lxy - mean[:2]
    q = d[:, 0] ** 2 + d[:, 1] ** 2
    cand = np.flatnonzero(q <= reach * reach)
    if cand.size == 0:
        return np.full(m, -1, dtype=np.int64), np.full(m, np.inf)
    z, H = _predicted_measurements(mean, lxy[cand])
    S = H @ P @ np.swapaxes(H, 1, 2) + R
    a, b, c = S[:, 0, 0], S[:, 0, 1], S[:, 1, 1]
    det = a * c - b * b
    n0 = meas[:, None, 0] - z[None, :, 0]
    n1 = _wrap(meas[:, None, 1] - z[None, :, 1])
    d2 = (c * n0 * n0 - 2.0 * b * n0 * n1 + a * n1 * n1) / det
    best = np.argmin(d2, axis=1)
    best_d2 = d2[np.arange(m), best]
    return np.where(best_d2 <= gate, cand[best], -1), best_d2


@njit(cache=True, nogil=True)
def _wrap1(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@njit(cache=True, nogil=True)
def _filter_kernel(mean0, P0, u, Q, R, lxy, starts, meas, gate):
    # returns per-pose means and covariances, per-measurement landmark index (-1 if
    # unassociated) and the first step whose covariance was not SPD (-1 if none)
    n = starts.shape[0] - 1
    means = np.empty((n, 3))
    covs = np.empty((n, 3, 3))
    assoc = np.full(meas.shape[0], -1, dtype=np.int64)
    bad_step = -1
    mean = mean0.copy()
    P = P0.copy()
    nl = lxy.shape[0]
    for k in range(n):
        if k > 0:
            c = math.cos(mean[2])
            s = math.sin(mean[2])
            dx, dy, dth = u[k - 1, 0], u[k - 1, 1], u[k - 1, 2]
            F = np.eye(3)
            F[0, 2] = -s * dx - c * dy
            F[1, 2] = c * dx - s * dy
            G = np.eye(3)
            G[0, 0] = c
            G[0, 1] = -s
            G[1, 0] = s
            G[1, 1] = c
            mean[0] += c * dx - s * dy
            mean[1] += s * dx + c * dy
            mean[2] = _wrap1(mean[2] + dth)
            P = F @ P @ F.T + G @ Q @ G.T
            P = 0.5 * (P + P.T)
        a, b = starts[k], starts[k + 1]
        if b > a:
            chosen = np.empty(b - a, dtype=np.int64)
            m = 0
            slack = math.sqrt(gate * (P[0, 0] + P[1, 1] + R[0, 0]))
            for i in range(a, b):
                best = -1
                best_d2 = gate
                reach = meas[i, 0] + slack
                for j in range(nl):
                    ddx = lxy[j, 0] - mean[0]
                    ddy = lxy[j, 1] - mean[1]
                    q = ddx * ddx + ddy * ddy
                    # beyond reach the range innovation alone exceeds the gate
                    if q > reach * reach or q == 0.0:
                        continue
                    r = math.sqrt(q)
                    h00 = -ddx / r
                    h01 = -ddy / r
                    h10 = ddy / q
                    h11 = -ddx / q
                    # S = H P H' + R with H = [[h00, h01, 0], [h10, h11, -1]]
                    p0 = h00 * P[0, 0] + h01 * P[1, 0]
                    p1 = h00 * P[0, 1] + h01 * P[1, 1]
                    p2 = h00 * P[0, 2] + h01 * P[1, 2]
                    g0 = h10 * P[0, 0] + h11 * P[1, 0] - P[2, 0]
                    g1 = h10 * P[0, 1] + h11 * P[1, 1] - P[2, 1]
                    g2 = h10 * P[0, 2] + h11 * P[1, 2] - P[2, 2]
                    s00 = p0 * h00 + p1 * h01 + R[0, 0]
                    s01 = p0 * h10 + p1 * h11 - p2
                    s11 = g0 * h10 + g1 * h11 - g2 + R[1, 1]
                    det = s00 * s11 - s01 * s01
                    n0 = meas[i, 0] - r
                    n1 = _wrap1(meas[i, 1] - (math.atan2(ddy, ddx) - mean[2]))
                    d2 = (s11 * n0 * n0 - 2.0 * s01 * n0 * n1 + s00 * n1 * n1) / det
                    if d2 <= best_d2:
                        if d2 < best_d2 or best == -1:
                            best = j
                            best_d2 = d2
                assoc[i] = best
                if best >= 0:
                    chosen[m] = i
                    m += 1
            if m > 0:
                Hs = np.zeros((2 * m, 3))
                nu = np.empty(2 * m)
                Rd = np.empty(2 * m)
                for t in range(m):
                    i = chosen[t]
                    j = assoc[i]
                    ddx = lxy[j, 0] - mean[0]
                    ddy = lxy[j, 1] - mean[1]
                    q = ddx * ddx + ddy * ddy
                    r = math.sqrt(q)
                    Hs[2 * t, 0] = -ddx / r
                    Hs[2 * t, 1] = -ddy / r
                    Hs[2 * t + 1, 0] = ddy / q
                    Hs[2 * t + 1, 1] = -ddx / q
                    Hs[2 * t + 1, 2] = -1.0
                    nu[2 * t] = meas[i, 0] - r
                    nu[2 * t + 1] = _wrap1(meas[i, 1] - (math.atan2(ddy, ddx) - mean[2]))
                    Rd[2 * t] = R[0, 0]
                    Rd[2 * t + 1] = R[1, 1]
                HP = Hs @ P
                S = HP @ Hs.T
                for t in range(2 * m):
                    S[t, t] += Rd[t]
                K = np.linalg.solve(S, HP).T
                mean = mean + K @ nu
                mean[2] = _wrap1(mean[2])
                A = np.eye(3) - K @ Hs
                KR = K * Rd
                P = A @ P @ A.T + KR @ K.T
                P = 0.5 * (P + P.T)
        # Sylvester's criterion on the symmetrised covariance
        m1 = P[0, 0]
        m2 = P[0, 0] * P[1, 1] - P[0, 1] * P[1, 0]
        m3 = (
            P[0, 0] * (P[1, 1] * P[2, 2] - P[1, 2] * P[2, 1])
            - P[0, 1] * (P[1, 0] * P[2, 2] - P[1, 2] * P[2, 0])
            + P[0, 2] * (P[1, 0] * P[2, 1] - P[1, 1] * P[2, 0])
        )
        if bad_step < 0 and not (m1 > 0.0 and m2 > 0.0 and m3 > 0.0):
            bad_step = k
        means[k] = mean
        covs[k] = P
    return means, covs, assoc, bad_step


def ekf_localize(
    fmap: FeatureMap,
    session: SessionLog,
    motion_noise: MotionNoise = MotionNoise(),
    sensor_noise: SensorNoise = SensorNoise(),
    rng: np.random.Generator | int | None = 0,
    initial_cov=None,
    gate: float = GATE_CHI2_2DOF_99,
) -> LocalizationRun:
    """Localise one session against a map.

    The filter starts at the first logged pose. Odometry increments come
    from consecutive logged poses plus zero-mean noise drawn from ``rng``
    with the ``motion_noise`` SDs; the same SDs (floored at 1e-6) form the
    filter's process noise. Returns every per-pose state and the failure
    flag: position-covariance trace above 25 m^2 at any step, or fewer than
    10% of detections associated.
    """
    if len(fmap) == 0:
        raise ValueError("cannot localise against an empty map")
    if session.n_poses == 0:
        raise ValueError("session has no poses")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    lxy = np.ascontiguousarray(fmap.xy, dtype=float)

    sv = max(motion_noise.sigma_v, NOISE_FLOOR)
    sw = max(motion_noise.sigma_w, NOISE_FLOOR)
    Q = np.diag([sv**2, sv**2, sw**2])
    R = np.diag([max(sensor_noise.sigma_r, NOISE_FLOOR) ** 2, max(sensor_noise.sigma_b, NOISE_FLOOR) ** 2])

    u = odometry(session.poses)
    if len(u):
        u = u + rng.normal(size=u.shape) * np.array(
            [motion_noise.sigma_v, motion_noise.sigma_v, motion_noise.sigma_w]
        )
    u = np.ascontiguousarray(u.reshape(-1, 3))

    ev = session.events[np.argsort(session.events["pose_index"], kind="stable")]
    starts = np.searchsorted(ev["pose_index"], np.arange(session.n_poses + 1)).astype(np.int64)
    meas = np.ascontiguousarray(np.column_stack([ev["range"], ev["bearing"]]).reshape(-1, 2))

    p0 = session.poses[0]
    mean0 = np.array([p0["x"], p0["y"], p0["heading"]], dtype=float)
    if initial_cov is None:
        P0 = np.diag([0.1**2, 0.1**2, math.radians(1.0) ** 2])
    else:
        P0 = np.array(initial_cov, dtype=float)
    check_spd(P0)

    means, covs, assoc, bad_step = _filter_kernel(mean0, P0, u, Q, R, lxy, starts, meas, gate)
    if bad_step >= 0:
        raise CovarianceError(f"covariance not positive definite at step {bad_step}")
    check_spd(covs)

    n_det = int(meas.shape[0])
    n_assoc = int(np.count_nonzero(assoc >= 0))
    max_trace = float(np.max(covs[:, 0, 0] + covs[:, 1, 1]))
    failed = max_trace > FAIL_TRACE or (n_det > 0 and n_assoc < FAIL_ASSOC_FRACTION * n_det)
    states = [EkfState(means[k], covs[k]) for k in range(len(means))]
    return LocalizationRun(states, bool(failed), n_det, n_assoc, max_trace)


def max_cov_magnitude(states: Sequence[EkfState]) -> float:
    """Largest eigenvalue of the 2x2 position covariance over all states."""
    if not states:
        raise ValueError("no states")
    return float(max(np.linalg.eigvalsh(s.covariance[:2, :2])[-1] for s in states))


def max_cov_trace(states: Sequence[EkfState]) -> float:
    return float(max(s.covariance[0, 0] + s.covariance[1, 1] for s in states))


@dataclass(frozen=True)
class CurvePoint:
    drop_rate: float
    max_cov: float
    max_trace: float
    failed: bool
    n_landmarks: int


@dataclass(frozen=True)
class EvalCurve:
    strategy: str
    points: tuple[CurvePoint, ...]

    def __post_init__(self):
        rates = [p.drop_rate for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("drop rates must be strictly increasing")

    @property
    def drop_rates(self) -> np.ndarray:
        return np.array([p.drop_rate for p in self.points])

    @property
    def values(self) -> np.ndarray:
        return np.array([p.max_cov for p in self.points])

    def first_failure(self) -> float:
        """Smallest drop rate flagged as failed, or inf if none."""
        for p in self.points:
            if p.failed:
                return p.drop_rate
        return math.inf


def session_seed(master_seed: int, session_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, 3, session_id])


def drop_curve(
    fmap: FeatureMap,
    scores,
    baseline_keys,
    eval_sessions: Sequence[SessionLog],
    drop_rates: Sequence[float],
    motion_noise: MotionNoise = MotionNoise(),
    sensor_noise: SensorNoise = SensorNoise(),
    seed: int = 0,
    n_jobs: int = 1,
) -> tuple[EvalCurve, EvalCurve]:
    """Score-ranked and track-length-ranked curves of mean max covariance.

    ``scores`` and ``baseline_keys`` are aligned to ``fmap.ids``. Each
    session's odometry noise is seeded from ``seed`` and the session id, so
    both strategies and every drop rate see the same noise draw. A point
    is marked failed if localisation failed in any session.
    """
    if not eval_sessions:
        raise ValueError("no evaluation sessions")
    rates = [float(r) for r in drop_rates]
    strategies = {"score": np.asarray(scores, dtype=float), "track_length": np.asarray(baseline_keys, dtype=float)}

    cells = [(name, r, s) for name in strategies for r in rates for s in eval_sessions]

    def run(cell):
        name, r, s = cell
        sub = rank_subset(fmap, strategies[name], r)
        if len(sub) == 0:
            return math.inf, math.inf, True, 0
        out = ekf_localize(
            sub, s, motion_noise, sensor_noise, np.random.default_rng(session_seed(seed, s.session_id))
        )
        return max_cov_magnitude(out.states), out.max_trace, out.failed, len(sub)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(run, cells))
    else:
        results = [run(c) for c in cells]

    curves = []
    ns = len(eval_sessions)
    for si, name in enumerate(strategies):
        pts = []
        for ri, r in enumerate(rates):
            chunk = results[(si * len(rates) + ri) * ns : (si * len(rates) + ri + 1) * ns]
            pts.append(
                CurvePoint(
                    r,
                    float(np.mean([c[0] for c in chunk])),
                    float(np.mean([c[1] for c in chunk])),
                    any(c[2] for c in chunk),
                    chunk[0][3],
                )
            )
        curves.append(EvalCurve(name, tuple(pts)))
    return curves[0], curves[1]


def save_curves(curves: Sequence[EvalCurve], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("strategy,drop_rate,max_cov,failed\n")
        for c in curves:
            for p in c.points:
                fh.write(f"{c.strategy},{p.drop_rate!r},{p.max_cov!r},{int(p.failed)}\n")


def format_summary(curves: Sequence[EvalCurve]) -> str:
    names = [c.strategy for c in curves]
    lines = ["drop_rate  " + "  ".join(f"{n:>22}" for n in names)]
    for i, r in enumerate(curves[0].drop_rates):
        cells = []
        for c in curves:
            p = c.points[i]
            cells.append(f"{p.max_cov:>18.6g} {'FAIL' if p.failed else '  ok'}")
        lines.append(f"{r:>9.3f}  " + "  ".join(cells))
    for c in curves:
        lines.append(f"first failure ({c.strategy}): {c.first_failure()}")
    return "\n".join(lines) + "\n"
