"""Model-ready samples: lagged dynamic tensors plus carried-forward survey vectors."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from typing import IO, Sequence

import numpy as np

from .ingest import EPOCH_ORDER, DayLabel, SurveyWave, Wave, WeekLabel, group_by_subject

log = logging.getLogger(__name__)

DAILY_CHANNELS = ("is_adherent", "Morning", "Afternoon", "Evening", "Night", "is_Weekend")
WEEKLY_CHANNELS = (
    "is_adherent_wk", "weekend_adh_0", "weekend_adh_50", "weekend_adh_100",
    "Morning", "Afternoon", "Evening", "Night", "time_mean", "time_std",
)
DEFAULT_DAILY_LAGS = 7
DEFAULT_WEEKLY_LAGS = 4

# Study-day boundaries where the month4 and month8 waves take over.
WAVE_BOUNDARIES = ((Wave.MONTH0, 0), (Wave.MONTH4, 122), (Wave.MONTH8, 244))


@dataclass
class Sample:
    """One prediction target.

    ``dynamic`` has shape (lags, channels) with row 0 holding lag t-1.
    Missing static scores are NaN.
    """

    subject_id: str
    target: date
    dynamic: np.ndarray
    label: bool
    static: dict[str, float] = field(default_factory=dict)
    categorical: dict[str, str | None] = field(default_factory=dict)


class DailySample(Sample):
    pass


class WeeklySample(Sample):
    pass


def lag_name(lag: int, channel: str) -> str:
    return f"t-{lag} {channel}"


def split_lag_name(name: str) -> tuple[int, str] | None:
    """Inverse of :func:`lag_name`; ``None`` for static feature names."""
    if not name.startswith("t-") or " " not in name:
        return None
    head, channel = name.split(" ", 1)
    try:
        return int(head[2:]), channel
    except ValueError:
        return None


@dataclass(frozen=True)
class FeatureNameMap:
    task: str
    lags: int
    channels: tuple[str, ...]
    static_names: tuple[str, ...] = ()
    categorical_names: tuple[str, ...] = ()

    @property
    def dynamic_names(self) -> list[str]:
        # lag-major: flat index = (lag - 1) * n_channels + channel
        return [lag_name(k, c) for k in range(1, self.lags + 1) for c in self.channels]

    @property
    def names(self) -> list[str]:
        return self.dynamic_names + list(self.static_names)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "lags": self.lags,
            "channels": list(self.channels),
            "static_names": list(self.static_names),
            "categorical_names": list(self.categorical_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNameMap":
        return cls(
            task=d["task"],
            lags=int(d["lags"]),
            channels=tuple(d["channels"]),
            static_names=tuple(d.get("static_names", ())),
            categorical_names=tuple(d.get("categorical_names", ())),
        )


def _epoch_onehot(epoch) -> list[float]:
    return [1.0 if epoch == ep else 0.0 for ep in EPOCH_ORDER]


def day_channels(lab: DayLabel) -> list[float]:
    return [float(lab.adherent), *_epoch_onehot(lab.epoch), float(lab.is_weekend)]


def week_channels(lab: WeekLabel) -> list[float]:
    level = [1.0 if lab.weekend_adh_level == v else 0.0 for v in (0, 50, 100)]
    return [
        float(lab.adherent),
        *level,
        *_epoch_onehot(lab.modal_epoch),
        lab.time_mean if lab.time_mean is not None else 0.0,
        lab.time_std if lab.time_std is not None else 0.0,
    ]


def _build(labels, key, step: timedelta, lags: int, encode, cls) -> list:
    if lags < 1:
        raise ValueError("lags must be >= 1")
    samples = []
    for subject, subject_labels in sorted(group_by_subject(labels).items()):
        ordered = sorted(subject_labels, key=key)
        for i in range(lags, len(ordered)):
            target = ordered[i]
            window = ordered[i - lags:i]
            # predecessors must be the `lags` consecutive periods before the target
            if key(window[0]) != key(target) - lags * step:
                continue
            dynamic = np.array([encode(lab) for lab in reversed(window)], dtype=float)
            samples.append(cls(subject, key(target), dynamic, bool(target.adherent)))
    return samples


def build_daily_samples(day_labels: Sequence[DayLabel], lags: int = DEFAULT_DAILY_LAGS) -> list[DailySample]:
    return _build(day_labels, lambda d: d.date, timedelta(days=1), lags, day_channels, DailySample)


def build_weekly_samples(week_labels: Sequence[WeekLabel], lags: int = DEFAULT_WEEKLY_LAGS) -> list[WeeklySample]:
    """Weekly samples; lag weeks without events get zero time statistics."""
    return _build(week_labels, lambda w: w.week_start, timedelta(days=7), lags, week_channels, WeeklySample)


def wave_for_day(study_day: int, available: Sequence[Wave]) -> Wave:
    """Most recent available wave at or before ``study_day``.

    Falls back to the earliest available wave when none precedes the day.
    """
    if not available:
        raise ValueError("no survey waves available")
    due = [w for w, start in WAVE_BOUNDARIES if study_day >= start]
    candidates = [w for w in available if w in due]
    order = [w for w, _ in WAVE_BOUNDARIES]
    if candidates:
        return max(candidates, key=order.index)
    return min(available, key=order.index)


def survey_columns(waves: Sequence[SurveyWave]) -> tuple[list[str], list[str]]:
    scores: dict[str, None] = {}
    cats: dict[str, None] = {}
    for w in waves:
        scores.update(dict.fromkeys(w.scores))
        cats.update(dict.fromkeys(w.categoricals))
    return list(scores), list(cats)


def attach_static(
    samples: Sequence[Sample],
    waves: Sequence[SurveyWave],
    study_start: dict[str, date],
) -> list[Sample]:
    """Give each sample the survey wave in force on its target date.

    ``study_start`` maps subject to day 0 of the study (first raw MEMS date).
    Samples of subjects without any wave are dropped and counted in a warning.
    """
    score_names, cat_names = survey_columns(waves)
    by_subject = {s: {w.wave: w for w in ws} for s, ws in group_by_subject(waves).items()}
    out = []
    dropped = 0
    for sample in samples:
        subject_waves = by_subject.get(sample.subject_id)
        if not subject_waves:
            dropped += 1
            continue
        start = study_start.get(sample.subject_id, sample.target)
        wave = subject_waves[wave_for_day((sample.target - start).days, list(subject_waves))]
        static = {
            name: (math.nan if wave.scores.get(name) is None else float(wave.scores[name]))
            for name in score_names
        }
        categorical = {name: wave.categoricals.get(name) for name in cat_names}
        out.append(replace(sample, static=static, categorical=categorical))
    if dropped:
        log.warning("dropped %d samples from subjects without survey waves", dropped)
    return out


def name_map_for(task: str, samples: Sequence[Sample], lags: int | None = None) -> FeatureNameMap:
    channels = DAILY_CHANNELS if task == "daily" else WEEKLY_CHANNELS
    if lags is None:
        lags = samples[0].dynamic.shape[0] if samples else (
            DEFAULT_DAILY_LAGS if task == "daily" else DEFAULT_WEEKLY_LAGS
        )
    static_names: list[str] = []
    cat_names: list[str] = []
    for s in samples:
        for n in s.static:
            if n not in static_names:
                static_names.append(n)
        for n in s.categorical:
            if n not in cat_names:
                cat_names.append(n)
    return FeatureNameMap(task, lags, tuple(channels), tuple(static_names), tuple(cat_names))


def write_samples(samples: Sequence[Sample], name_map: FeatureNameMap, out: IO[str]) -> None:
    """Flat CSV dump, one row per sample, header from the feature name map."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["subject_id", "target", "label", *name_map.names, *name_map.categorical_names])
    for s in samples:
        dyn = [repr(float(v)) for v in s.dynamic.reshape(-1)]
        stat = [
            "" if math.isnan(s.static.get(n, math.nan)) else repr(float(s.static[n]))
            for n in name_map.static_names
        ]
        cats = [s.categorical.get(n) or "" for n in name_map.categorical_names]
        w.writerow([s.subject_id, s.target.isoformat(), int(s.label), *dyn, *stat, *cats])


def read_samples(stream: IO[str], name_map: FeatureNameMap) -> list[Sample]:
    reader = csv.reader(stream)
    header = next(reader)
    expected = ["subject_id", "target", "label", *name_map.names, *name_map.categorical_names]
    if header != expected:
        raise ValueError("sample file header does not match the feature name map")
    n_dyn = name_map.lags * len(name_map.channels)
    n_stat = len(name_map.static_names)
    cls = DailySample if name_map.task == "daily" else WeeklySample
    out = []
    for row in reader:
        values = row[3:]
        dynamic = np.array([float(v) for v in values[:n_dyn]]).reshape(name_map.lags, len(name_map.channels))
        static = {
            n: (math.nan if v == "" else float(v))
            for n, v in zip(name_map.static_names, values[n_dyn:n_dyn + n_stat])
        }
        cats = {n: (v or None) for n, v in zip(name_map.categorical_names, values[n_dyn + n_stat:])}
        out.append(cls(row[0], date.fromisoformat(row[1]), dynamic, row[2] == "1", static, cats))
    return out


def write_name_map(name_map: FeatureNameMap, out: IO[str]) -> None:
    json.dump(name_map.to_dict(), out, indent=2)
    out.write("\n")


def read_name_map(stream: IO[str]) -> FeatureNameMap:
    return FeatureNameMap.from_dict(json.load(stream))
