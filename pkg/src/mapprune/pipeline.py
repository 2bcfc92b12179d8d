"""End-to-end run: simulate, score, prune and evaluate on a planted world."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation, labeling, predictors, regression, selection, simulator
from .core import FeatureMap, SessionLog, save_map, save_sessions

log = logging.getLogger(__name__)

TRAIN_FRACTION = 0.8
DEFAULT_RATES = (0.0, 0.1, 0.2, 0.3, 0.35, 0.4, 0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99)


@dataclass(frozen=True)
class PipelineConfig:
    world: simulator.WorldConfig = field(default_factory=simulator.WorldConfig)
    columns: tuple[str, ...] = regression.DEFAULT_COLUMNS
    alphas: tuple[float, ...] = regression.DEFAULT_ALPHAS
    folds: int = 10
    rates: tuple[float, ...] = DEFAULT_RATES
    train_fraction: float = TRAIN_FRACTION
    seed: int = 42
    n_jobs: int = 1

    @classmethod
    def from_mapping(cls, values: dict, seed: int | None = None) -> PipelineConfig:
        values = dict(values)
        own = {}
        for key in ("folds", "n_jobs"):
            if key in values:
                own[key] = int(values.pop(key))
        if "train_fraction" in values:
            own["train_fraction"] = float(values.pop("train_fraction"))
        if "rates" in values:
            own["rates"] = parse_rates(values.pop("rates"))
        if "alphas" in values:
            own["alphas"] = parse_rates(values.pop("alphas"))
        if "columns" in values:
            own["columns"] = tuple(c.strip() for c in values.pop("columns").split(",") if c.strip())
        if seed is not None:
            values["seed"] = str(seed)
        world = simulator.WorldConfig.from_mapping(values)
        return cls(world=world, seed=world.seed, **own)


def parse_rates(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def split_sessions(sessions: Sequence[SessionLog], train_fraction: float = TRAIN_FRACTION):
    """Chronological split: the first ``train_fraction`` of sessions train, the rest are held out."""
    n_train = int(np.floor(train_fraction * len(sessions)))
    n_train = min(max(n_train, 2), len(sessions) - 1)
    return list(sessions[:n_train]), list(sessions[n_train:])


@dataclass
class PipelineResult:
    world: simulator.World
    sessions: list[SessionLog]
    train: list[SessionLog]
    holdout: list[SessionLog]
    matrix: predictors.PredictorMatrix
    labels: np.ndarray
    model: regression.ScoringModel
    scores: np.ndarray
    report: selection.ThresholdReport
    kept: FeatureMap
    discarded: FeatureMap
    curves: tuple[evaluation.EvalCurve, evaluation.EvalCurve] | None = None


def score_world(config: PipelineConfig, evaluate: bool = True) -> PipelineResult:
    """Run every stage in memory."""
    wc = config.world
    world = simulator.generate_world(wc)
    sessions = simulator.simulate_all(world, wc)
    train, holdout = split_sessions(sessions, config.train_fraction)
    fmap = world.map
    matrix = predictors.build_matrix(fmap, train)
    labels = labeling.empirical_probability(fmap, train)
    model = regression.fit_model(
        matrix, labels, config.columns, config.alphas, k=config.folds, seed=config.seed,
        n_jobs=config.n_jobs,
    )
    scores = regression.score(model, matrix)
    report = selection.find_threshold(scores)
    kept, discarded = selection.prune_map(fmap, scores, report.threshold)
    curves = None
    if evaluate:
        curves = evaluation.drop_curve(
            fmap,
            scores,
            matrix.column("track_length"),
            holdout,
            config.rates,
            sensor_noise=evaluation.SensorNoise(wc.range_noise, np.radians(wc.bearing_noise_deg)),
            seed=config.seed,
            n_jobs=config.n_jobs,
        )
    return PipelineResult(
        world, sessions, train, holdout, matrix, labels, model, scores, report, kept, discarded, curves
    )


def reproduce(config: PipelineConfig, out_dir) -> PipelineResult:
    """Run the full pipeline and write every intermediate artefact under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = score_world(config)
    fmap = res.world.map
    simulator.write_dataset(res.world, [], out, config.world)
    save_sessions(res.train, out / "sessions" / "train")
    save_sessions(res.holdout, out / "sessions" / "holdout")
    res.matrix.to_csv(out / "predictors.csv")
    labeling.save_labels(fmap.ids, res.labels, out / "labels.csv")
    res.model.save(out / "model.json")
    regression.save_scores(fmap.ids, res.scores, out / "scores.csv")
    save_map(res.kept, out / "kept_map.txt")
    save_map(res.discarded, out / "discarded_map.txt")
    (out / "threshold_report.txt").write_text(res.report.format(), encoding="utf-8")
    evaluation.save_curves(res.curves, out / "curve.csv")
    (out / "summary.txt").write_text(summary_text(res), encoding="utf-8")
    return res


def discrimination(res: PipelineResult) -> dict[str, float]:
    """Separation and pruning quality against the simulator's ground truth."""
    truth = np.array([bool(lm.persistent) for lm in res.world.map])
    s = res.scores
    sp, se = s[truth], s[~truth]
    pooled = np.sqrt(0.5 * (sp.var(ddof=1) + se.var(ddof=1)))
    discarded = np.isin(res.world.map.ids, res.discarded.ids)
    tp = int(np.sum(discarded & ~truth))
    precision = tp / discarded.sum() if discarded.any() else 0.0
    recall = tp / (~truth).sum() if (~truth).any() else 0.0
    return {
        "mean_persistent": float(sp.mean()),
        "mean_ephemeral": float(se.mean()),
        "pooled_sd": float(pooled),
        "separation_sd": float((sp.mean() - se.mean()) / pooled),
        "precision": float(precision),
        "recall": float(recall),
        "discard_fraction": float(discarded.mean()),
    }


def summary_text(res: PipelineResult) -> str:
    m = res.model
    d = discrimination(res)
    lines = [
        f"landmarks          {len(res.world.map)}",
        f"train sessions     {res.train[0].session_id}..{res.train[-1].session_id}",
        f"holdout sessions   {res.holdout[0].session_id}..{res.holdout[-1].session_id}",
        f"alpha              {m.alpha:.3g}",
        f"lambda             {m.lambda_:.6g}",
        f"fit R2             {regression.r2_score(res.labels, res.scores):.4f}",
        "coefficients       "
        + ", ".join(f"{c}={b:.4f}" for c, b in zip(m.columns, m.coefficients)),
        f"threshold          {res.report.threshold:.6f}",
        f"kept / discarded   {len(res.kept)} / {len(res.discarded)}",
        f"precision/recall   {d['precision']:.3f} / {d['recall']:.3f}",
        "",
    ]
    if res.curves is not None:
        lines.append(evaluation.format_summary(res.curves))
    return "\n".join(lines)
