"""Synthetic MEMS cohorts with planted behavioral structure.

Each subject-day the latent dose is taken with probability::

    sigmoid(base + arm_effect*[arm == PN] + carryover*took_yesterday
            - weekend_penalty*is_weekend - symptom_effect*burden)

A taken dose becomes one bottle opening near the subject's preferred hour.
Occasional extra openings land at a uniformly random time of day. Survey
scales at months 0/4/8 are noisy functions of the latent burden and base
propensity.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .ingest import EPOCH_ORDER, Epoch

EPOCH_CENTER = {Epoch.MORNING: 8.5, Epoch.AFTERNOON: 14.0, Epoch.EVENING: 20.5, Epoch.NIGHT: 3.0}
EPOCH_WEIGHTS = (0.4, 0.15, 0.4, 0.05)
SCALES = (
    "psup", "decreg", "mases_med_taking", "bcpt_weight", "bcpt_vas",
    "bcpt_musske", "bcpt_gas", "bcpt_cog", "mdasi_interference",
)
WAVE_MONTHS = (0, 4, 8)


class CohortSpecError(ValueError):
    pass


@dataclass
class SubjectParams:
    subject_id: str
    start: date
    base: float
    carryover: float
    weekend_penalty: float
    preferred_epoch: str
    preferred_hour: float
    jitter_sd: float
    burden: float
    arm: str
    missing_rate: float


@dataclass
class CohortSpec:
    n_subjects: int = 32
    n_days: int = 240
    start_date: date = date(2021, 3, 1)
    start_spread_days: int = 28
    base_mean: float = 0.0
    base_sd: float = 0.6
    carryover: float = 3.5
    carryover_sd: float = 0.3
    weekend_penalty: float = 2.0
    weekend_penalty_sd: float = 0.3
    symptom_effect: float = 0.4
    arm_effect: float = 0.3
    jitter_low: float = 0.3
    jitter_high: float = 1.5
    extra_open_rate: float = 0.03
    survey_missing_rate: float = 0.1
    seed: int = 0
    subjects: list[SubjectParams] | None = field(default=None, repr=False)

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise CohortSpecError("n_subjects must be >= 1")
        if self.n_days < 60:
            raise CohortSpecError("n_days must be >= 60 (burn-in plus modeling window)")
        for name in ("extra_open_rate", "survey_missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CohortSpecError(f"{name} must lie in [0, 1]")
        if self.jitter_low < 0 or self.jitter_high < self.jitter_low:
            raise CohortSpecError("need 0 <= jitter_low <= jitter_high")
        if self.start_spread_days < 0:
            raise CohortSpecError("start_spread_days must be >= 0")
        for s in self.subjects or []:
            if not 0.0 <= s.missing_rate <= 1.0:
                raise CohortSpecError(f"{s.subject_id}: missing_rate must lie in [0, 1]")
            if s.jitter_sd < 0:
                raise CohortSpecError(f"{s.subject_id}: jitter_sd must be >= 0")
            if s.preferred_epoch not in {e.value for e in Epoch}:
                raise CohortSpecError(f"{s.subject_id}: unknown epoch {s.preferred_epoch!r}")


def _sigmoid(x: float) -> float:
    if x == math.inf:
        return 1.0
    if x == -math.inf:
        return 0.0
    return 1.0 / (1.0 + math.exp(-x))


def draw_subjects(spec: CohortSpec) -> list[SubjectParams]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    width = len(str(spec.n_subjects))
    subjects = []
    for k in range(spec.n_subjects):
        epoch = EPOCH_ORDER[rng.choice(4, p=EPOCH_WEIGHTS)]
        subjects.append(SubjectParams(
            subject_id=f"S{k + 1:0{max(width, 2)}d}",
            start=spec.start_date + timedelta(days=int(rng.integers(0, spec.start_spread_days + 1))),
            base=float(rng.normal(spec.base_mean, spec.base_sd)),
            carryover=float(max(0.0, rng.normal(spec.carryover, spec.carryover_sd))) if spec.carryover else 0.0,
            weekend_penalty=(
                float(max(0.0, rng.normal(spec.weekend_penalty, spec.weekend_penalty_sd)))
                if spec.weekend_penalty else 0.0
            ),
            preferred_epoch=epoch.value,
            preferred_hour=float(EPOCH_CENTER[epoch] + rng.uniform(-1.5, 1.5)),
            jitter_sd=float(rng.uniform(spec.jitter_low, spec.jitter_high)),
            burden=float(rng.normal()),
            arm="PN" if rng.random() < 15 / 32 else "UC",
            missing_rate=spec.survey_missing_rate,
        ))
    return subjects


def _clock(day: date, hour: float) -> datetime:
    minutes = int(round(min(max(hour, 0.0), 24.0 - 1 / 60) * 60))
    return datetime.combine(day, datetime.min.time()) + timedelta(minutes=minutes)


def _simulate_subject(spec: CohortSpec, s: SubjectParams, rng: np.random.Generator):
    events: list[datetime] = []
    taken: list[int] = []
    probs: list[float] = []
    arm = spec.arm_effect if s.arm == "PN" else 0.0
    prev = 1
    for d in range(spec.n_days):
        day = s.start + timedelta(days=d)
        weekend = day.weekday() >= 5
        p = _sigmoid(s.base + arm + s.carryover * prev - s.weekend_penalty * weekend - spec.symptom_effect * s.burden)
        took = int(rng.random() < p)
        jitter = rng.normal(0.0, s.jitter_sd)
        extra = rng.random() < spec.extra_open_rate
        extra_hour = rng.uniform(0.0, 24.0)
        if took:
            events.append(_clock(day, s.preferred_hour + jitter))
        if extra:
            events.append(_clock(day, extra_hour))
        probs.append(p)
        taken.append(took)
        prev = took
    return events, taken, probs


def _survey_rows(spec: CohortSpec, s: SubjectParams, rng: np.random.Generator) -> list[list[str]]:
    rows = []
    for month in WAVE_MONTHS:
        drift = 0.1 * month / 4
        values = {
            "psup": 5.0 + 0.8 * s.base + rng.normal(0, 0.7),
            "decreg": 10.0 + rng.normal(0, 3.0),
            "mases_med_taking": 30.0 - 3.0 * s.base + rng.normal(0, 2.0),
            "bcpt_weight": 1.0 + 0.5 * s.burden + drift + rng.normal(0, 0.3),
            "bcpt_vas": 1.2 + 0.6 * s.burden + drift + rng.normal(0, 0.3),
            "bcpt_musske": 1.0 + 0.4 * s.burden + rng.normal(0, 0.3),
            "bcpt_gas": 0.8 + 0.3 * s.burden + rng.normal(0, 0.3),
            "bcpt_cog": 1.0 + 0.3 * s.burden + rng.normal(0, 0.3),
            "mdasi_interference": 3.0 + 1.5 * s.burden + rng.normal(0, 0.5),
        }
        missing = rng.random(len(SCALES) + 1) < s.missing_rate
        cells = ["" if m else f"{values[name]:.2f}" for name, m in zip(SCALES, missing)]
        cells.append("" if missing[-1] else s.arm)
        rows.append([s.subject_id, str(month), *cells])
    return rows


def generate(spec: CohortSpec | None = None, seed: int | None = None) -> tuple[str, str, dict]:
    """Return (events CSV text, surveys CSV text, ground-truth dict)."""
    spec = spec or CohortSpec()
    if seed is not None:
        spec = CohortSpec(**{**{f: getattr(spec, f) for f in spec.__dataclass_fields__}, "seed": seed})
    spec.validate()
    subjects = spec.subjects if spec.subjects is not None else draw_subjects(spec)
    streams = np.random.SeedSequence([spec.seed, 1]).spawn(len(subjects))

    ev_buf = io.StringIO()
    ev = csv.writer(ev_buf, lineterminator="\n")
    ev.writerow(["subject_id", "timestamp"])
    sv_buf = io.StringIO()
    sv = csv.writer(sv_buf, lineterminator="\n")
    sv.writerow(["subject_id", "wave", *SCALES, "group"])
    truth_subjects = []
    for s, ss in zip(sorted(subjects, key=lambda x: x.subject_id), streams):
        rng = np.random.default_rng(ss)
        events, taken, probs = _simulate_subject(spec, s, rng)
        for ts in sorted(set(events)):
            ev.writerow([s.subject_id, ts.strftime("%Y-%m-%dT%H:%M")])
        for row in _survey_rows(spec, s, rng):
            sv.writerow(row)
        entry = asdict(s)
        entry["start"] = s.start.isoformat()
        entry["taken"] = "".join(map(str, taken))
        entry["p_take"] = [round(p, 12) for p in probs]
        truth_subjects.append(entry)

    spec_dict = {f: getattr(spec, f) for f in spec.__dataclass_fields__ if f != "subjects"}
    spec_dict["start_date"] = spec.start_date.isoformat()
    truth = {"spec": spec_dict, "subjects": truth_subjects}
    return ev_buf.getvalue(), sv_buf.getvalue(), truth


def bayes_optimal_take_accuracy(truth: dict) -> float:
    """Accuracy of predicting each latent dose from its true probability.

    This bounds any predictor of the latent taking process; the interval-based
    labels add noise from extra openings, so it is a sanity ceiling only.
    """
    p = np.concatenate([np.asarray(s["p_take"], dtype=float) for s in truth["subjects"]])
    return float(np.mean(np.maximum(p, 1.0 - p)))


def write_cohort(out_dir: str | Path, spec: CohortSpec | None = None, seed: int | None = None) -> dict[str, Path]:
    events, surveys, truth = generate(spec, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": out / "events.csv",
        "surveys": out / "surveys.csv",
        "ground_truth": out / "ground_truth.json",
    }
    paths["events"].write_text(events, encoding="utf-8")
    paths["surveys"].write_text(surveys, encoding="utf-8")
    paths["ground_truth"].write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return paths
