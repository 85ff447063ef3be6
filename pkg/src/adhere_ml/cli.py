"""Command-line pipeline: simulate | label | featurize | evaluate | train-final | explain | report.

Every stage reads the previous stage's files from the run directory and
writes its own, so each step can be audited on disk. Exit codes: 0 success,
1 usage error, 2 data error (missing or malformed input).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import explain as xp
from . import features as ft
from . import harness, ingest
from . import model as mdl
from . import synthcohort
from .preprocess import PreprocessPlan, fit_plan

log = logging.getLogger("adhere_ml")

SEED_ENV = "ADHERE_ML_SEED"
TASKS = ("daily", "weekly")


class UsageError(Exception):
    exit_code = 1


class DataError(Exception):
    exit_code = 2


@dataclass
class RunConfig:
    out_dir: str = "run"
    events: str | None = None
    surveys: str | None = None
    task: str = "daily"
    daily_lags: int = ft.DEFAULT_DAILY_LAGS
    weekly_lags: int = ft.DEFAULT_WEEKLY_LAGS
    burn_in_days: int = ingest.DEFAULT_BURN_IN_DAYS
    interval_window: tuple[float, float] = ingest.DEFAULT_WINDOW
    weekly_threshold: float = ingest.DEFAULT_WEEKLY_THRESHOLD
    availability: float = 0.6
    top_k: int = 40
    k: int = 5
    seed: int | None = None
    grid: str | None = None
    batch_size: int = 128
    max_epochs: int = 50
    n_subjects: int = 32
    n_days: int = 240
    n_explain: int = 200
    n_background: int = 100
    n_baselines: int = 32

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def lags(self) -> int:
        return self.daily_lags if self.task == "daily" else self.weekly_lags

    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def events_path(self) -> Path:
        return Path(self.events) if self.events else self.path("events.csv")

    @property
    def surveys_path(self) -> Path:
        return Path(self.surveys) if self.surveys else self.path("surveys.csv")


CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {p} is not valid JSON: {exc}") from None
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(getattr(args, "config", None))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if values.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        try:
            values["seed"] = int(env) if env else 0
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if "interval_window" in values:
        values["interval_window"] = tuple(float(x) for x in values["interval_window"])
    cfg = RunConfig(**values)
    if cfg.task not in TASKS:
        raise UsageError(f"task must be one of {TASKS}, got {cfg.task!r}")
    return cfg


def require(*paths: Path) -> None:
    for p in paths:
        if not Path(p).exists():
            raise DataError(f"missing input artifact: {p}")


def _read(path: Path) -> str:
    require(path)
    return path.read_text(encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- stages ----------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> None:
    spec = synthcohort.CohortSpec(n_subjects=cfg.n_subjects, n_days=cfg.n_days, seed=cfg.seed)
    try:
        paths = synthcohort.write_cohort(cfg.out, spec)
    except synthcohort.CohortSpecError as exc:
        raise DataError(str(exc)) from None
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


def cmd_label(cfg: RunConfig) -> None:
    events = ingest.parse_events(_read(cfg.events_path))
    starts = ingest.study_start_dates(events)
    days = ingest.label_daily(ingest.exclude_burn_in(events, cfg.burn_in_days), cfg.interval_window)
    weeks = ingest.label_weekly(days, cfg.weekly_threshold)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with cfg.path("day_labels.csv").open("w", encoding="utf-8", newline="") as fh:
        ingest.write_day_labels(days, fh)
    with cfg.path("week_labels.csv").open("w", encoding="utf-8", newline="") as fh:
        ingest.write_week_labels(weeks, fh)
    _write_json(cfg.path("study_start.json"), {s: d.isoformat() for s, d in sorted(starts.items())})
    log.info("labeled %d days and %d weeks for %d subjects", len(days), len(weeks), len(starts))


def _samples_paths(cfg: RunConfig) -> tuple[Path, Path]:
    return cfg.path(f"{cfg.task}_samples.csv"), cfg.path(f"{cfg.task}_features.json")


def cmd_featurize(cfg: RunConfig) -> None:
    from datetime import date

    waves = ingest.parse_surveys(_read(cfg.surveys_path))
    starts_raw = json.loads(_read(cfg.path("study_start.json")))
    starts = {s: date.fromisoformat(d) for s, d in starts_raw.items()}
    if cfg.task == "daily":
        days = ingest.read_day_labels(_read(cfg.path("day_labels.csv")))
        samples = ft.build_daily_samples(days, cfg.daily_lags)
    else:
        weeks = ingest.read_week_labels(_read(cfg.path("week_labels.csv")))
        samples = ft.build_weekly_samples(weeks, cfg.weekly_lags)
    samples = ft.attach_static(samples, waves, starts)
    name_map = ft.name_map_for(cfg.task, samples, cfg.lags)
    samples_path, map_path = _samples_paths(cfg)
    with samples_path.open("w", encoding="utf-8", newline="") as fh:
        ft.write_samples(samples, name_map, fh)
    with map_path.open("w", encoding="utf-8") as fh:
        ft.write_name_map(name_map, fh)
    log.info("wrote %d %s samples", len(samples), cfg.task)


def load_samples(cfg: RunConfig) -> tuple[list[ft.Sample], ft.FeatureNameMap]:
    samples_path, map_path = _samples_paths(cfg)
    require(map_path, samples_path)
    with map_path.open(encoding="utf-8") as fh:
        name_map = ft.read_name_map(fh)
    with samples_path.open(encoding="utf-8") as fh:
        samples = ft.read_samples(fh, name_map)
    if not samples:
        raise DataError(f"no samples in {samples_path}")
    return samples, name_map


def load_grid(cfg: RunConfig) -> list[dict]:
    if not cfg.grid:
        return harness.expand_grid(harness.DEFAULT_GRID)
    grid = json.loads(_read(Path(cfg.grid)))
    points = harness.expand_grid(grid)
    allowed = {f.name for f in fields(mdl.ModelConfig)} - {"seed"}
    for p in points:
        bad = set(p) - allowed
        if bad:
            raise UsageError(f"unknown hyperparameters in grid: {', '.join(sorted(bad))}")
    if not points:
        raise UsageError("hyperparameter grid is empty")
    return points


def _base_model_config(cfg: RunConfig) -> dict:
    return {"batch_size": cfg.batch_size, "max_epochs": cfg.max_epochs}


def cmd_evaluate(cfg: RunConfig) -> None:
    samples, name_map = load_samples(cfg)
    try:
        report = harness.run_nested_cv(
            cfg.task, samples, name_map,
            grid=load_grid(cfg), seed=cfg.seed, k=cfg.k,
            base_config=_base_model_config(cfg),
            availability=cfg.availability, top_k=cfg.top_k,
            progress=log.debug,
        )
    except ValueError as exc:
        raise DataError(str(exc)) from None
    paths = harness.emit_report(report, cfg.out, stem=f"{cfg.task}_cv_report")
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


def _chosen_point(cfg: RunConfig) -> dict:
    """Hyperparameters picked most often across CV folds, else the first grid point."""
    report_path = cfg.path(f"{cfg.task}_cv_report.json")
    if report_path.exists():
        report = harness.read_report(report_path)
        chosen = [json.dumps(f.chosen, sort_keys=True) for f in report.folds if f.chosen]
        if chosen:
            counts = Counter(chosen)
            top = max(counts.values())
            return json.loads(next(c for c in chosen if counts[c] == top))
    return load_grid(cfg)[0]


def cmd_train_final(cfg: RunConfig) -> None:
    samples, name_map = load_samples(cfg)
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < 2:
        raise DataError("need at least two subjects to hold out a validation slice")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 303]))
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_val = max(1, round(0.2 * len(subjects)))
    val_ids, train_ids = set(order[:n_val]), set(order[n_val:])
    plan = fit_plan(samples, name_map, availability=cfg.availability, top_k=cfg.top_k,
                    seed=harness.unit_seed(cfg.seed, 900))
    train_design = plan.transform([s for s in samples if s.subject_id in train_ids])
    val_design = plan.transform([s for s in samples if s.subject_id in val_ids])
    if np.bincount(train_design.y, minlength=2).min() == 0:
        raise DataError("training data contain a single class")
    train_design = harness.balanced(train_design, seed=harness.unit_seed(cfg.seed, 901))
    point = _chosen_point(cfg)
    config = mdl.ModelConfig(**{**_base_model_config(cfg), **point, "seed": harness.unit_seed(cfg.seed, 902)})
    params, history = mdl.train(config, train_design, val_design)
    names = {"flat": plan.feature_names, "lags": name_map.lags, "channels": plan.channels,
             "static": plan.static_features}
    mdl.save_params(cfg.path(f"{cfg.task}_model.json"), params, config, names)
    cfg.path(f"{cfg.task}_plan.json").write_text(plan.to_json() + "\n", encoding="utf-8")
    _write_json(cfg.path(f"{cfg.task}_train_history.json"), history.to_dict())
    log.info("trained final %s model (best epoch %d, %s)", cfg.task, history.best_epoch, history.stop_reason)


def cmd_explain(cfg: RunConfig) -> None:
    samples, _ = load_samples(cfg)
    model_path, plan_path = cfg.path(f"{cfg.task}_model.json"), cfg.path(f"{cfg.task}_plan.json")
    require(model_path, plan_path)
    plan = PreprocessPlan.from_json(plan_path.read_text(encoding="utf-8"))
    params, meta = mdl.load_params(model_path)
    names = meta["feature_names"] or {}
    design = plan.transform(samples)
    if names.get("flat") and names["flat"] != plan.feature_names:
        raise DataError("model feature names do not match the preprocessing plan")
    flat = design.flat()
    f = xp.HybridLogit(params, design.dynamic.shape[1], design.dynamic.shape[2], plan.feature_names)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 404]))
    background = flat[np.sort(rng.choice(len(flat), size=min(cfg.n_background, len(flat)), replace=False))]
    chosen = np.sort(rng.choice(len(flat), size=min(cfg.n_explain, len(flat)), replace=False))
    attributions = xp.explain_samples(f, flat[chosen], background, cfg.n_baselines,
                                      seed=harness.unit_seed(cfg.seed, 405))
    summary = xp.summarize(attributions, plan.feature_names)
    summary.meta.update({"n_background": len(background), "task": cfg.task})
    stem = f"{cfg.task}_importance"
    with cfg.path(f"{stem}.csv").open("w", encoding="utf-8", newline="") as fh:
        summary.write_csv(fh)
    with cfg.path(f"{stem}.json").open("w", encoding="utf-8") as fh:
        summary.write_json(fh)
    with cfg.path(f"{stem}.svg").open("w", encoding="utf-8") as fh:
        summary.write_svg(fh)
    log.info("top features: %s", ", ".join(summary.ranking[:5]))


def cmd_report(cfg: RunConfig) -> None:
    lines = ["# Adherence prediction report", ""]
    found = False
    for task in TASKS:
        rep_path = cfg.path(f"{task}_cv_report.json")
        if rep_path.exists():
            found = True
            rep = harness.read_report(rep_path)
            lines += [f"## {task.capitalize()} adherence ({rep.k}-fold subject-level CV, seed {rep.seed})", "",
                      "| Model | Accuracy (%) | Precision (%) | Recall (%) | Specificity (%) |",
                      "|---|---|---|---|---|"]
            for name, res in rep.models.items():
                s = res.summary()
                lines.append(f"| {name} | " + " | ".join(harness.format_mean_std(*s[m]) for m in harness.METRICS) + " |")
            lines += ["", f"Majority-class rate on test folds: {100 * rep.majority_rate:.2f}%", ""]
            aborted = [f for f in rep.folds if f.aborted]
            for f in aborted:
                lines.append(f"- fold {f.index} aborted: {f.aborted}")
            if aborted:
                lines.append("")
        imp_path = cfg.path(f"{task}_importance.json")
        if imp_path.exists():
            found = True
            imp = json.loads(imp_path.read_text(encoding="utf-8"))
            lines += [f"### {task.capitalize()} feature importance (top {len(imp['top'])})", "",
                      "| Rank | Feature | Mean attribution | Mean abs attribution |", "|---|---|---|---|"]
            for r, row in enumerate(imp["top"], start=1):
                lines.append(f"| {r} | {row['feature']} | {row['mean_signed']:+.4f} | {row['mean_abs']:.4f} |")
            lines.append("")
    if not found:
        raise DataError(f"no evaluation or explanation outputs found in {cfg.out}")
    cfg.path("report.md").write_text("\n".join(lines), encoding="utf-8")
    log.info("wrote %s", cfg.path("report.md"))


COMMANDS = {
    "simulate": (cmd_simulate, "generate a synthetic cohort (events.csv, surveys.csv, ground_truth.json)"),
    "label": (cmd_label, "derive daily and weekly adherence labels from events"),
    "featurize": (cmd_featurize, "build lagged dynamic + static samples for --task"),
    "evaluate": (cmd_evaluate, "nested subject-level cross-validation with grid search"),
    "train-final": (cmd_train_final, "train the hybrid model on all subjects and save it"),
    "explain": (cmd_explain, "expected-gradients feature importance for the final model"),
    "report": (cmd_report, "combine outputs into report.md"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    d = RunConfig()
    common = _Parser(add_help=False, argument_default=None)
    fmt = argparse.ArgumentDefaultsHelpFormatter
    g = common.add_argument_group("run options (override the --config file)")
    g.add_argument("--config", help="JSON run configuration file")
    g.add_argument("--out-dir", dest="out_dir", help=f"run directory (default: {d.out_dir})")
    g.add_argument("--events", help="events CSV (default: <out-dir>/events.csv)")
    g.add_argument("--surveys", help="survey CSV (default: <out-dir>/surveys.csv)")
    g.add_argument("--task", choices=TASKS, help=f"prediction task (default: {d.task})")
    g.add_argument("--seed", type=int, help=f"master seed (default: ${SEED_ENV} or 0)")
    g.add_argument("--k", type=int, help=f"outer CV folds (default: {d.k})")
    g.add_argument("--grid", help="hyperparameter grid JSON (default: built-in 24-point grid)")
    g.add_argument("--report-dir", dest="out_dir", help="alias of --out-dir")
    g.add_argument("--daily-lags", dest="daily_lags", type=int, help=f"daily lag days (default: {d.daily_lags})")
    g.add_argument("--weekly-lags", dest="weekly_lags", type=int, help=f"weekly lag weeks (default: {d.weekly_lags})")
    g.add_argument("--burn-in-days", dest="burn_in_days", type=int,
                   help=f"days excluded after each subject's first event (default: {d.burn_in_days})")
    g.add_argument("--interval-window", dest="interval_window", type=float, nargs=2, metavar=("LO", "HI"),
                   help="adherent inter-dose interval in hours (default: 18 30)")
    g.add_argument("--weekly-threshold", dest="weekly_threshold", type=float,
                   help=f"weekly adherent-fraction threshold, strict (default: {d.weekly_threshold})")
    g.add_argument("--availability", type=float, help=f"feature availability threshold (default: {d.availability})")
    g.add_argument("--top-k", dest="top_k", type=int, help=f"features kept before lag expansion (default: {d.top_k})")
    g.add_argument("--batch-size", dest="batch_size", type=int, help=f"minibatch size (default: {d.batch_size})")
    g.add_argument("--max-epochs", dest="max_epochs", type=int, help=f"epoch cap (default: {d.max_epochs})")
    g.add_argument("--n-subjects", dest="n_subjects", type=int, help=f"simulate: subjects (default: {d.n_subjects})")
    g.add_argument("--n-days", dest="n_days", type=int, help=f"simulate: days per subject (default: {d.n_days})")
    g.add_argument("--n-explain", dest="n_explain", type=int, help=f"explain: samples attributed (default: {d.n_explain})")
    g.add_argument("--n-background", dest="n_background", type=int,
                   help=f"explain: background rows (default: {d.n_background})")
    g.add_argument("--n-baselines", dest="n_baselines", type=int,
                   help=f"explain: baselines per sample (default: {d.n_baselines})")
    g.add_argument("-v", "--verbose", action="store_true", default=False, help="debug logging")

    parser = _Parser(prog="adhere-ml", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command][0](cfg)
    except UsageError as exc:
        print(f"adhere-ml: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ingest.IngestError, mdl.ModelError, OSError) as exc:
        print(f"adhere-ml: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
