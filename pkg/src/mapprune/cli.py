"""Command line entry point: ``mapprune <command> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, labeling, pipeline, predictors, regression, selection, simulator
from .core import FormatError, ValidationError, load_map, load_sessions, save_map

log = logging.getLogger("mapprune")


class MissingInput(Exception):
    pass


def _need(path, flag: str) -> Path:
    if path is None:
        raise MissingInput(f"missing input: {flag} is required")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"missing input: {flag} {p} does not exist")
    return p


def _out(path, default: str) -> Path:
    p = Path(path) if path else Path(default)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_inputs(args):
    fmap = load_map(_need(args.map, "--map"))
    sessions = load_sessions(_need(args.sessions, "--sessions"), fmap)
    if not sessions:
        raise ValidationError(f"no session_<id>.log files in {args.sessions}")
    return fmap, sessions


def cmd_simulate(args) -> None:
    values = pipeline.read_config_file(_need(args.config, "--config")) if args.config else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    config = simulator.WorldConfig.from_mapping(values)
    world = simulator.generate_world(config)
    sessions = simulator.simulate_all(world, config)
    out = Path(args.out or "sim")
    simulator.write_dataset(world, sessions, out, config)
    print(f"wrote {len(world.map)} landmarks and {len(sessions)} sessions to {out}")


def cmd_predictors(args) -> None:
    fmap, sessions = _load_inputs(args)
    matrix = predictors.build_matrix(fmap, sessions)
    matrix.to_csv(_out(args.out, "predictors.csv"))


def cmd_label(args) -> None:
    fmap, sessions = _load_inputs(args)
    labels = labeling.empirical_probability(fmap, sessions)
    labeling.save_labels(fmap.ids, labels, _out(args.out, "labels.csv"))


def cmd_fit(args) -> None:
    matrix = predictors.PredictorMatrix.from_csv(_need(args.predictors, "--predictors"))
    ids, labels = labeling.load_labels(_need(args.labels, "--labels"))
    if not np.array_equal(ids, matrix.landmark_ids):
        order = np.argsort(ids)
        if not np.array_equal(ids[order], np.sort(matrix.landmark_ids)):
            raise ValidationError("label ids do not match predictor ids")
        lookup = dict(zip(ids.tolist(), labels.tolist()))
        labels = np.array([lookup[i] for i in matrix.landmark_ids.tolist()])
    cfg = pipeline.read_config_file(args.config) if args.config else {}
    columns = (
        tuple(c.strip() for c in cfg["columns"].split(",")) if "columns" in cfg else regression.DEFAULT_COLUMNS
    )
    alphas = pipeline.parse_rates(cfg["alphas"]) if "alphas" in cfg else regression.DEFAULT_ALPHAS
    folds = int(cfg.get("folds", 10))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    model = regression.fit_model(matrix, labels, columns, alphas, k=folds, seed=seed, n_jobs=args.jobs)
    model.save(_out(args.out, "model.json"))
    Z = model.standardization.apply(matrix)
    diag = regression.predictor_diagnostics(Z, labels, model.columns, k=folds, seed=seed)
    print(diag.format())
    print(f"selected alpha={model.alpha:g} lambda={model.lambda_:.6g}")


def _scores_for(args, fmap=None):
    if args.scores:
        ids, scores = regression.load_scores(_need(args.scores, "--scores"))
        return ids, scores
    if args.model is None:
        raise MissingInput("missing input: --scores or --model is required")
    model = regression.ScoringModel.load(_need(args.model, "--model"))
    matrix = predictors.PredictorMatrix.from_csv(_need(args.predictors, "--predictors"))
    return matrix.landmark_ids, regression.score(model, matrix)


def cmd_score(args) -> None:
    model = regression.ScoringModel.load(_need(args.model, "--model"))
    matrix = predictors.PredictorMatrix.from_csv(_need(args.predictors, "--predictors"))
    regression.save_scores(matrix.landmark_ids, regression.score(model, matrix), _out(args.out, "scores.csv"))


def cmd_prune(args) -> None:
    fmap = load_map(_need(args.map, "--map"))
    ids, scores = _scores_for(args, fmap)
    report = selection.find_threshold(scores)
    kept, discarded = selection.prune_map(fmap, scores, report.threshold, ids=ids)
    out = Path(args.out or "pruned")
    out.mkdir(parents=True, exist_ok=True)
    save_map(kept, out / "kept_map.txt")
    save_map(discarded, out / "discarded_map.txt")
    (out / "threshold_report.txt").write_text(report.format(), encoding="utf-8")
    flag = " (unimodal fallback)" if report.unimodal_fallback else ""
    print(f"threshold {report.threshold:.6g}{flag}: kept {len(kept)}, discarded {len(discarded)}")


def cmd_evaluate(args) -> None:
    fmap, sessions = _load_inputs(args)
    ids, scores = _scores_for(args, fmap)
    matrix = predictors.PredictorMatrix.from_csv(_need(args.predictors, "--predictors"))
    score_key = selection.align_to_map(fmap, ids, scores)
    baseline = selection.align_to_map(fmap, matrix.landmark_ids, matrix.column("track_length"))
    rates = pipeline.parse_rates(args.rates) if args.rates else pipeline.DEFAULT_RATES
    seed = args.seed if args.seed is not None else 0
    curves = evaluation.drop_curve(fmap, score_key, baseline, sessions, rates, seed=seed, n_jobs=args.jobs)
    out = _out(args.out, "curve.csv")
    evaluation.save_curves(curves, out)
    summary = evaluation.format_summary(curves)
    out.with_suffix(".txt").write_text(summary, encoding="utf-8")
    print(summary, end="")


def cmd_reproduce(args) -> None:
    if args.seed is None:
        raise MissingInput("missing input: --seed is required for reproduce")
    values = pipeline.read_config_file(_need(args.config, "--config")) if args.config else {}
    if args.rates:
        values["rates"] = args.rates
    config = pipeline.PipelineConfig.from_mapping(values, seed=args.seed)
    config = dataclasses.replace(config, n_jobs=args.jobs)
    res = pipeline.reproduce(config, args.out or "reproduce")
    print(pipeline.summary_text(res), end="")


COMMANDS = {
    "simulate": (cmd_simulate, "generate a planted world and drive logs"),
    "predictors": (cmd_predictors, "compute the per-landmark predictor matrix"),
    "label": (cmd_label, "compute empirical re-observation labels"),
    "fit": (cmd_fit, "fit the cross-validated elastic-net scoring model"),
    "score": (cmd_score, "score landmarks with a fitted model"),
    "prune": (cmd_prune, "split a map into kept and discarded landmarks"),
    "evaluate": (cmd_evaluate, "EKF covariance versus drop rate for score and track-length rankings"),
    "reproduce": (cmd_reproduce, "run every stage on a simulated world"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapprune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--map")
        p.add_argument("--sessions")
        p.add_argument("--model")
        p.add_argument("--scores")
        p.add_argument("--predictors")
        p.add_argument("--labels")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--rates")
        p.add_argument("--config")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except (MissingInput, FormatError, ValidationError, ValueError, OSError) as exc:
        print(f"mapprune {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
