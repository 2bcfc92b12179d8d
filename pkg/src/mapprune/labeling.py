"""Regression targets from cross-session re-observation frequency."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import FeatureMap, SessionLog


def empirical_probability(fmap: FeatureMap, sessions: Sequence[SessionLog]) -> np.ndarray:
    """Per-landmark label in [0, 1], aligned to ``fmap.ids``.

    The pooled detection frequency of each landmark is rescaled so the most
    frequently matched landmark gets 1, then multiplied by the fraction of
    sessions in which the landmark was matched at least once.
    """
    if len(sessions) < 2:
        raise ValueError("need at least two sessions to estimate re-observation probability")
    n = len(fmap)
    counts = np.zeros(n, dtype=np.int64)
    seen_in = np.zeros(n, dtype=np.int64)
    for s in sessions:
        per = np.bincount(fmap.indices_of(s.events["landmark_id"]), minlength=n)
        counts += per
        seen_in += per > 0
    total = counts.sum()
    if total == 0:
        raise ValueError("no detections in any session; nothing to label")
    freq = counts / total
    rel = freq / freq.max()
    label = rel * (seen_in / len(sessions))
    return np.clip(label, 0.0, 1.0)


def save_labels(ids: np.ndarray, labels: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("landmark_id,label\n")
        for lid, v in zip(np.asarray(ids).tolist(), np.asarray(labels).tolist()):
            fh.write(f"{lid},{v!r}\n")


def load_labels(path) -> tuple[np.ndarray, np.ndarray]:
    ids, vals = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "landmark_id,label":
            raise ValueError(f"{path}: expected header 'landmark_id,label'")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                a, b = line.split(",")
                ids.append(int(a))
                vals.append(float(b))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed label row") from None
    return np.array(ids, dtype=np.int64), np.array(vals)
