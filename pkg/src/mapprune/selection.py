"""Keep/prune decisions from landmark scores.

The score distribution of a map with many ephemeral landmarks is bimodal.
A Gaussian KDE locates the valley between the lowest and highest modes; the
cut is placed half a score-SD below that valley so borderline landmarks that
were occluded in some drives survive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FeatureMap

GRID_POINTS = 512
GRID_PAD_BANDWIDTHS = 3.0
SD_MARGIN = 0.5
FALLBACK_PERCENTILE = 20.0


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    a = min(sd, (q75 - q25) / 1.34)
    if a <= 0:
        a = sd
    return float(0.9 * a * x.size ** (-0.2))


def kde(scores, bandwidth: float | None = None, n_grid: int = GRID_POINTS):
    """Gaussian KDE evaluated on an evenly spaced grid.

    Returns ``(grid, density, bandwidth)``. The grid spans three bandwidths
    beyond the data on each side.
    """
    x = np.asarray(scores, dtype=float).ravel()
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("KDE needs at least two distinct scores")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    grid = np.linspace(x.min() - GRID_PAD_BANDWIDTHS * h, x.max() + GRID_PAD_BANDWIDTHS * h, n_grid)
    dens = np.zeros(n_grid)
    # chunked to bound memory for large samples
    for start in range(0, x.size, 4096):
        u = (grid[:, None] - x[None, start : start + 4096]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= x.size * h * np.sqrt(2.0 * np.pi)
    return grid, dens, h


@dataclass(frozen=True)
class ThresholdReport:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    peak_locations: tuple[float, float] | None
    local_min: float | None
    sigma: float
    threshold: float
    unimodal_fallback: bool = False

    def format(self) -> str:
        lines = [
            f"bandwidth      {self.bandwidth!r}",
            f"sigma          {self.sigma!r}",
            f"unimodal       {int(self.unimodal_fallback)}",
        ]
        if self.peak_locations is not None:
            lines.append(f"low_peak       {self.peak_locations[0]!r}")
            lines.append(f"high_peak      {self.peak_locations[1]!r}")
            lines.append(f"local_min      {self.local_min!r}")
        lines.append(f"threshold      {self.threshold!r}")
        return "\n".join(lines) + "\n"


def local_maxima(density: np.ndarray) -> np.ndarray:
    """Interior grid indices that rise strictly from the left and do not drop to the right.

    Flat-topped plateaus therefore report their left edge once.
    """
    d = np.asarray(density)
    left = d[1:-1] > d[:-2]
    right = d[1:-1] >= d[2:]
    idx = np.flatnonzero(left & right) + 1
    # drop plateau starts that later rise again
    keep = []
    for i in idx:
        j = i
        while j + 1 < d.size and d[j + 1] == d[i]:
            j += 1
        if j + 1 >= d.size or d[j + 1] < d[i]:
            keep.append(i)
    return np.array(keep, dtype=np.int64)


def find_threshold(scores, bandwidth: float | None = None) -> ThresholdReport:
    """Valley-minus-half-SD cut between the extreme KDE modes.

    If the density has a single mode the 20th percentile of the scores is
    used instead and ``unimodal_fallback`` is set.
    """
    x = np.asarray(scores, dtype=float).ravel()
    grid, dens, h = kde(x, bandwidth)
    sigma = float(x.std(ddof=1))
    peaks = local_maxima(dens)
    if peaks.size < 2:
        return ThresholdReport(
            grid, dens, h, None, None, sigma, float(np.percentile(x, FALLBACK_PERCENTILE)), True
        )
    lo, hi = int(peaks[0]), int(peaks[-1])
    between = np.arange(lo + 1, hi)
    m = int(between[np.argmin(dens[lo + 1 : hi])])
    local_min = float(grid[m])
    return ThresholdReport(
        grid,
        dens,
        h,
        (float(grid[lo]), float(grid[hi])),
        local_min,
        sigma,
        local_min - SD_MARGIN * sigma,
        False,
    )


def align_to_map(fmap: FeatureMap, ids, values) -> np.ndarray:
    """Reorder per-landmark ``values`` keyed by ``ids`` into ``fmap.ids`` order."""
    values = np.asarray(values, dtype=float)
    if ids is None:
        if values.size != len(fmap):
            raise ValueError("scores not aligned with map")
        return values
    ids = np.asarray(ids, dtype=np.int64)
    if values.size != ids.size:
        raise ValueError("score ids and values differ in length")
    order = np.argsort(ids)
    if not np.array_equal(ids[order], fmap.ids):
        raise ValueError("score ids do not match map landmark ids")
    return values[order]


def prune_map(fmap: FeatureMap, scores, threshold: float, ids=None) -> tuple[FeatureMap, FeatureMap]:
    """Split a map into landmarks scoring at least ``threshold`` and the rest.

    ``scores`` is aligned to ``fmap.ids`` unless explicit ``ids`` are given.
    """
    s = align_to_map(fmap, ids, scores)
    keep = s >= threshold
    kept = fmap.subset(fmap.ids[keep], frame_name=f"{fmap.frame_name}/kept")
    dropped = fmap.subset(fmap.ids[~keep], frame_name=f"{fmap.frame_name}/discarded")
    return kept, dropped


def rank_subset(fmap: FeatureMap, ranking, drop_rate: float, ids=None) -> FeatureMap:
    """Drop the ``floor(drop_rate * N)`` lowest-ranked landmarks.

    Ties go to the lower landmark id, which is dropped first.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError("drop_rate must lie in [0, 1)")
    key = align_to_map(fmap, ids, ranking)
    # epsilon keeps e.g. 0.29 * 100 from flooring to 28
    n_drop = int(np.floor(drop_rate * len(fmap) + 1e-9))
    order = np.lexsort((fmap.ids, key))
    return fmap.subset(fmap.ids[order[n_drop:]])
