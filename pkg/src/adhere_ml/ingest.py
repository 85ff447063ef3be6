"""MEMS event and survey-wave ingestion plus daily/weekly adherence labeling.

Events CSV::

    subject_id,timestamp
    S1,2021-03-01T21:00

Survey CSV::

    subject_id,wave,psup,decreg,group,...
    S1,0,7.0,,PN

Timestamps are naive local date-times. Empty survey cells are missing
(``None``), never zero.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from enum import Enum
from typing import IO, Iterable, Sequence

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"
DEFAULT_WINDOW = (18.0, 30.0)
DEFAULT_WEEKLY_THRESHOLD = 0.8
DEFAULT_BURN_IN_DAYS = 30

# Survey columns always treated as categorical regardless of their values.
CATEGORICAL_COLUMNS = frozenset({"group"})


class IngestError(ValueError):
    """Raised for malformed input files; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class Epoch(str, Enum):
    MORNING = "Morning"
    AFTERNOON = "Afternoon"
    EVENING = "Evening"
    NIGHT = "Night"


# Fixed order used for one-hot channels and modal-epoch tie breaking.
EPOCH_ORDER = (Epoch.MORNING, Epoch.AFTERNOON, Epoch.EVENING, Epoch.NIGHT)


def epoch_of_hour(hour: float) -> Epoch:
    if 6 <= hour < 12:
        return Epoch.MORNING
    if 12 <= hour < 18:
        return Epoch.AFTERNOON
    if 18 <= hour < 24:
        return Epoch.EVENING
    return Epoch.NIGHT


class Wave(str, Enum):
    MONTH0 = "month0"
    MONTH4 = "month4"
    MONTH8 = "month8"

    @property
    def month(self) -> int:
        return int(self.value[len("month"):])


WAVE_TOKENS = {"0": Wave.MONTH0, "4": Wave.MONTH4, "8": Wave.MONTH8}


@dataclass(frozen=True, order=True)
class DoseEvent:
    subject_id: str
    timestamp: datetime

    @property
    def hour(self) -> float:
        return self.timestamp.hour + self.timestamp.minute / 60.0


@dataclass(frozen=True)
class DayLabel:
    subject_id: str
    date: date
    adherent: bool
    epoch: Epoch | None = None
    opening_hour: float | None = None

    @property
    def is_weekend(self) -> bool:
        return self.date.weekday() >= 5


@dataclass(frozen=True)
class WeekLabel:
    subject_id: str
    week_start: date
    adherent_fraction: float
    adherent: bool
    weekend_adh_level: int
    modal_epoch: Epoch | None = None
    time_mean: float | None = None
    time_std: float | None = None


@dataclass
class SurveyWave:
    subject_id: str
    wave: Wave
    scores: dict[str, float | None] = field(default_factory=dict)
    categoricals: dict[str, str | None] = field(default_factory=dict)


def _text_stream(stream: IO | bytes | str) -> IO[str]:
    if isinstance(stream, bytes):
        return io.StringIO(stream.decode("utf-8"))
    if isinstance(stream, str):
        return io.StringIO(stream)
    sample = stream.read()
    if isinstance(sample, bytes):
        sample = sample.decode("utf-8")
    return io.StringIO(sample)


def parse_events(stream: IO | bytes | str) -> list[DoseEvent]:
    """Parse an events CSV into deduplicated DoseEvents sorted per subject.

    Any unparseable row aborts with an :class:`IngestError` naming the line.
    """
    reader = csv.reader(_text_stream(stream))
    header = next(reader, None)
    if header is None:
        return []
    if [h.strip() for h in header] != ["subject_id", "timestamp"]:
        raise IngestError(f"expected header 'subject_id,timestamp', got {','.join(header)!r}", 1)
    seen: set[tuple[str, datetime]] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2:
            raise IngestError(f"expected 2 fields, got {len(row)}", lineno)
        subject, raw_ts = row[0].strip(), row[1].strip()
        if not subject:
            raise IngestError("empty subject_id", lineno)
        try:
            ts = datetime.strptime(raw_ts, TIMESTAMP_FORMAT)
        except ValueError:
            raise IngestError(f"unparseable timestamp {raw_ts!r}", lineno) from None
        seen.add((subject, ts))
    return [DoseEvent(s, t) for s, t in sorted(seen)]


def group_by_subject(items: Iterable) -> dict[str, list]:
    groups: dict[str, list] = defaultdict(list)
    for item in items:
        groups[item.subject_id].append(item)
    return dict(groups)


def exclude_burn_in(events: Sequence[DoseEvent], burn_in_days: int = DEFAULT_BURN_IN_DAYS) -> list[DoseEvent]:
    """Drop each subject's events before ``first event date + burn_in_days``.

    A subject whose events all fall in the burn-in simply disappears from
    the returned list; callers that need the roster should keep it separately.
    """
    if burn_in_days < 0:
        raise ValueError("burn_in_days must be non-negative")
    kept: list[DoseEvent] = []
    for subject_events in group_by_subject(events).values():
        first = min(e.timestamp for e in subject_events)
        cutoff = datetime.combine(first.date() + timedelta(days=burn_in_days), datetime.min.time())
        kept.extend(e for e in subject_events if e.timestamp >= cutoff)
    return sorted(kept)


def study_start_dates(events: Sequence[DoseEvent]) -> dict[str, date]:
    """First event date per subject (computed on raw, pre-burn-in events)."""
    starts: dict[str, date] = {}
    for e in events:
        d = e.timestamp.date()
        if e.subject_id not in starts or d < starts[e.subject_id]:
            starts[e.subject_id] = d
    return starts


def _label_subject(events: list[DoseEvent], lo: float, hi: float) -> list[DayLabel]:
    events = sorted(events)
    subject = events[0].subject_id
    by_date: dict[date, list[tuple[DoseEvent, float | None]]] = defaultdict(list)
    prev: DoseEvent | None = None
    for e in events:
        gap = None if prev is None else (e.timestamp - prev.timestamp).total_seconds() / 3600.0
        by_date[e.timestamp.date()].append((e, gap))
        prev = e

    first_day = events[0].timestamp.date()
    last_day = events[-1].timestamp.date()
    labels = []
    day = first_day
    while day <= last_day:
        todays = by_date.get(day)
        if not todays:
            labels.append(DayLabel(subject, day, False))
        else:
            qualifying = None
            for e, gap in todays:
                # the sequence start has no prior interval and counts as adherent
                if gap is None or lo <= gap <= hi:
                    qualifying = e
                    break
            chosen = qualifying or todays[0][0]
            labels.append(
                DayLabel(subject, day, qualifying is not None, epoch_of_hour(chosen.hour), chosen.hour)
            )
        day += timedelta(days=1)
    return labels


def label_daily(
    events: Sequence[DoseEvent], interval_window: tuple[float, float] = DEFAULT_WINDOW
) -> list[DayLabel]:
    """Label every calendar date from each subject's first to last event.

    A date is adherent when one of its events follows the previous event
    (on any date) by an interval inside ``interval_window`` hours, inclusive.
    The first labeled date is adherent because it has an event and no prior
    interval exists.
    """
    lo, hi = interval_window
    if lo > hi:
        raise ValueError(f"interval window lower bound {lo} exceeds upper bound {hi}")
    labels: list[DayLabel] = []
    groups = group_by_subject(events)
    for subject in sorted(groups):
        labels.extend(_label_subject(groups[subject], lo, hi))
    return labels


def week_start_of(d: date) -> date:
    return d - timedelta(days=d.weekday())


def _modal_epoch(epochs: list[Epoch]) -> Epoch | None:
    if not epochs:
        return None
    counts = {ep: epochs.count(ep) for ep in EPOCH_ORDER}
    best = max(counts.values())
    return next(ep for ep in EPOCH_ORDER if counts[ep] == best)


def label_weekly(
    day_labels: Sequence[DayLabel], threshold: float = DEFAULT_WEEKLY_THRESHOLD
) -> list[WeekLabel]:
    """Aggregate day labels into civil Monday-Sunday weeks.

    Weeks with fewer than seven labeled days are dropped. Time statistics use
    every event-bearing day; ``time_std`` is the population (ddof=0) spread.
    """
    weeks: dict[tuple[str, date], list[DayLabel]] = defaultdict(list)
    for lab in day_labels:
        weeks[(lab.subject_id, week_start_of(lab.date))].append(lab)

    out = []
    for (subject, start), days in sorted(weeks.items()):
        if len({d.date for d in days}) < 7:
            continue
        n_adherent = sum(d.adherent for d in days)
        fraction = n_adherent / 7.0
        weekend_days = sum(d.adherent for d in days if d.is_weekend)
        hours = [d.opening_hour for d in days if d.opening_hour is not None]
        epochs = [d.epoch for d in days if d.epoch is not None]
        if hours:
            mean = math.fsum(hours) / len(hours)
            std = math.sqrt(math.fsum((h - mean) ** 2 for h in hours) / len(hours))
        else:
            mean = std = None
        out.append(
            WeekLabel(
                subject_id=subject,
                week_start=start,
                adherent_fraction=fraction,
                adherent=fraction > threshold,
                weekend_adh_level=50 * weekend_days,
                modal_epoch=_modal_epoch(epochs),
                time_mean=mean,
                time_std=std,
            )
        )
    return out


def _parse_cell(raw: str) -> float | None:
    raw = raw.strip()
    if raw == "":
        return None
    return float(raw)


def parse_surveys(stream: IO | bytes | str) -> list[SurveyWave]:
    """Parse a survey-wave CSV.

    Numeric columns become ``scores``; the ``group`` column and any column
    holding a non-numeric value become ``categoricals``. Unknown scale names
    are carried through unchanged.
    """
    reader = csv.reader(_text_stream(stream))
    header = next(reader, None)
    if header is None:
        return []
    header = [h.strip() for h in header]
    if header[:2] != ["subject_id", "wave"]:
        raise IngestError("expected header to start with 'subject_id,wave'", 1)
    columns = header[2:]
    if len(set(columns)) != len(columns):
        raise IngestError("duplicate column names in survey header", 1)

    rows: list[tuple[int, list[str]]] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise IngestError(f"expected {len(header)} fields, got {len(row)}", lineno)
        rows.append((lineno, [c.strip() for c in row]))

    categorical = set(CATEGORICAL_COLUMNS & set(columns))
    for j, name in enumerate(columns, start=2):
        for _, row in rows:
            if row[j] == "":
                continue
            try:
                float(row[j])
            except ValueError:
                categorical.add(name)
                break

    waves: list[SurveyWave] = []
    seen: set[tuple[str, Wave]] = set()
    for lineno, row in rows:
        subject, token = row[0], row[1]
        if not subject:
            raise IngestError("empty subject_id", lineno)
        if token not in WAVE_TOKENS:
            raise IngestError(f"unknown wave token {token!r} (expected 0, 4 or 8)", lineno)
        wave = WAVE_TOKENS[token]
        if (subject, wave) in seen:
            raise IngestError(f"duplicate survey record for subject {subject!r} wave {token}", lineno)
        seen.add((subject, wave))
        scores: dict[str, float | None] = {}
        cats: dict[str, str | None] = {}
        for j, name in enumerate(columns, start=2):
            if name in categorical:
                cats[name] = row[j] or None
            else:
                value = _parse_cell(row[j])
                if value is not None and not math.isfinite(value):
                    raise IngestError(f"non-finite value in column {name!r}", lineno)
                scores[name] = value
        waves.append(SurveyWave(subject, wave, scores, cats))
    waves.sort(key=lambda w: (w.subject_id, w.wave.month))
    return waves


# --- label file round-trip (stage handoff for the CLI) ---

DAY_LABEL_COLUMNS = ["subject_id", "date", "adherent", "epoch", "opening_hour", "is_weekend"]
WEEK_LABEL_COLUMNS = [
    "subject_id", "week_start", "adherent_fraction", "adherent",
    "weekend_adh_level", "modal_epoch", "time_mean", "time_std",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_day_labels(labels: Sequence[DayLabel], out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(DAY_LABEL_COLUMNS)
    for lab in labels:
        w.writerow([_fmt(v) for v in (
            lab.subject_id, lab.date.isoformat(), lab.adherent, lab.epoch, lab.opening_hour, lab.is_weekend,
        )])


def read_day_labels(stream: IO | bytes | str) -> list[DayLabel]:
    out = []
    for row in csv.DictReader(_text_stream(stream)):
        out.append(DayLabel(
            subject_id=row["subject_id"],
            date=date.fromisoformat(row["date"]),
            adherent=row["adherent"] == "1",
            epoch=Epoch(row["epoch"]) if row["epoch"] else None,
            opening_hour=float(row["opening_hour"]) if row["opening_hour"] else None,
        ))
    return out


def write_week_labels(labels: Sequence[WeekLabel], out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(WEEK_LABEL_COLUMNS)
    for lab in labels:
        w.writerow([_fmt(v) for v in (
            lab.subject_id, lab.week_start.isoformat(), lab.adherent_fraction, lab.adherent,
            lab.weekend_adh_level, lab.modal_epoch, lab.time_mean, lab.time_std,
        )])


def read_week_labels(stream: IO | bytes | str) -> list[WeekLabel]:
    out = []
    for row in csv.DictReader(_text_stream(stream)):
        out.append(WeekLabel(
            subject_id=row["subject_id"],
            week_start=date.fromisoformat(row["week_start"]),
            adherent_fraction=float(row["adherent_fraction"]),
            adherent=row["adherent"] == "1",
            weekend_adh_level=int(row["weekend_adh_level"]),
            modal_epoch=Epoch(row["modal_epoch"]) if row["modal_epoch"] else None,
            time_mean=float(row["time_mean"]) if row["time_mean"] else None,
            time_std=float(row["time_std"]) if row["time_std"] else None,
        ))
    return out
