"""Patent record ingestion, fractional counting and the cooperation graph.

Input is a UTF-8 CSV with header ``id,publication_date,applicant_countries``
where ``applicant_countries`` is a semicolon separated list of two-letter codes,
one entry per applicant as filed (repetitions allowed).
"""

from __future__ import annotations

import csv
import datetime as dt
import itertools
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

#: EU-28 members as of the 1990-2021 study period (United Kingdom included).
EU_COUNTRIES = (
    "AT", "BE", "BG", "CY", "CZ", "DE", "DK", "EE", "EL", "ES",
    "FI", "FR", "GB", "HR", "HU", "IE", "IT", "LT", "LU", "LV",
    "MT", "NL", "PL", "PT", "RO", "SE", "SI", "SK",
)
OTHERS = "Others"
COUNTRY_UNIVERSE = EU_COUNTRIES + (OTHERS,)

_ALIASES = {"GR": "EL"}
EPOCH = dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)
CSV_HEADER = ("id", "publication_date", "applicant_countries")


class RecordError(ValueError):
    """A malformed input row; ``row`` is the 1-based data row number when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


def parse_time(value: str | dt.date | dt.datetime) -> dt.datetime:
    """Parse an ISO 8601 date or timestamp into an aware UTC datetime."""
    if isinstance(value, dt.datetime):
        stamp = value
    elif isinstance(value, dt.date):
        stamp = dt.datetime(value.year, value.month, value.day)
    else:
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        try:
            stamp = dt.datetime.fromisoformat(text)
        except ValueError:
            raise ValueError(f"invalid ISO 8601 date: {value!r}") from None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=dt.timezone.utc)
    return stamp.astimezone(dt.timezone.utc)


def to_days(value) -> float:
    """Real-valued days since 1970-01-01 (UTC midnight)."""
    return (parse_time(value) - EPOCH) / dt.timedelta(days=1)


def from_days(days: float) -> dt.datetime:
    return EPOCH + dt.timedelta(days=float(days))


def map_to_universe(code: str) -> str:
    """Map a country code onto the graph's 29 nodes (28 EU members plus Others)."""
    if not isinstance(code, str):
        raise RecordError(f"country code must be a string, got {code!r}")
    norm = code.strip().upper()
    if len(norm) != 2 or not norm.isalpha():
        raise RecordError(f"malformed country code {code!r}")
    norm = _ALIASES.get(norm, norm)
    return norm if norm in EU_COUNTRIES else OTHERS


@dataclass(frozen=True)
class PatentRecord:
    """One patent family."""

    id: str
    publication_date: dt.datetime
    applicant_countries: tuple[str, ...]

    def __post_init__(self):
        if not self.applicant_countries:
            raise RecordError(f"patent {self.id!r} has no applicants")
        object.__setattr__(self, "publication_date", parse_time(self.publication_date))
        object.__setattr__(self, "applicant_countries", tuple(self.applicant_countries))
        for code in self.applicant_countries:
            map_to_universe(code)

    @property
    def mapped_countries(self) -> tuple[str, ...]:
        return tuple(map_to_universe(c) for c in self.applicant_countries)


def fractional_counts(record: PatentRecord) -> dict[str, Fraction]:
    """Split one patent across its applicant entries.

    Each entry contributes ``1/len(entries)`` to its mapped country, so the
    weights always sum to exactly one.
    """
    mapped = record.mapped_countries
    if not mapped:
        raise RecordError(f"patent {record.id!r} has no applicants")
    share = Fraction(1, len(mapped))
    out: dict[str, Fraction] = {}
    for country in mapped:
        out[country] = out.get(country, Fraction(0)) + share
    return out


def cooperation_edges(record: PatentRecord) -> set[tuple[str, str]]:
    """Unordered country pairs (sorted tuples) linked by this patent.

    Mapped countries are deduplicated first, so several non-EU applicants
    collapse onto the single Others node.
    """
    distinct = sorted(set(record.mapped_countries))
    return set(itertools.combinations(distinct, 2))


def is_cooperation_patent(record: PatentRecord) -> bool:
    return len(set(record.mapped_countries)) >= 2


def edge_key(a: str, b: str) -> tuple[str, str]:
    if a == b:
        raise ValueError(f"self-edge {a}-{b} is not allowed")
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class CooperationGraph:
    """Node fractional counts and symmetric cooperation counts.

    ``nodes`` holds every country of the universe (zero counts included);
    ``edges`` holds only pairs with at least one cooperation patent, keyed by
    the lexicographically sorted pair.
    """

    nodes: Mapping[str, float]
    edges: Mapping[tuple[str, str], int]
    n_records: int = 0
    n_cooperation: int = 0
    country_universe: tuple[str, ...] = field(default=COUNTRY_UNIVERSE)

    def edge_count(self, a: str, b: str) -> int:
        return self.edges.get(edge_key(a, b), 0)

    def eligible_countries(self) -> list[str]:
        """Countries with a positive fractional count (usable in regression)."""
        return [c for c in self.country_universe if self.nodes.get(c, 0.0) > 0]

    @property
    def cooperation_share(self) -> float:
        return self.n_cooperation / self.n_records if self.n_records else 0.0


def build_graph(records: Iterable[PatentRecord]) -> CooperationGraph:
    totals = {c: Fraction(0) for c in COUNTRY_UNIVERSE}
    edges: Counter = Counter()
    n = n_coop = 0
    for record in records:
        n += 1
        for country, weight in fractional_counts(record).items():
            totals[country] += weight
        pairs = cooperation_edges(record)
        if pairs:
            n_coop += 1
        edges.update(pairs)
    nodes = {c: float(w) for c, w in totals.items()}
    return CooperationGraph(
        nodes=nodes,
        edges=dict(sorted(edges.items())),
        n_records=n,
        n_cooperation=n_coop,
    )


@dataclass(frozen=True)
class EventSeries:
    """Sorted event times in days since 1970-01-01 with their observation window."""

    times: np.ndarray
    window: tuple[float, float]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1:
            raise ValueError("event times must be one-dimensional")
        if np.any(np.diff(times) < 0):
            times = np.sort(times)
        a, b = float(self.window[0]), float(self.window[1])
        if a > b:
            raise ValueError("window start must not exceed window end")
        if times.size and (times[0] < a or times[-1] > b):
            raise ValueError("event times fall outside the observation window")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "window", (a, b))

    def __len__(self):
        return self.times.size

    @classmethod
    def from_times(cls, times) -> "EventSeries":
        times = np.sort(np.asarray(times, dtype=float))
        if times.size == 0:
            raise ValueError("no events")
        return cls(times, (float(times[0]), float(times[-1])))

    def split(self, cutoff: float) -> tuple["EventSeries", "EventSeries"]:
        """Split at ``cutoff`` (days): events strictly before go to the first part."""
        k = int(np.searchsorted(self.times, cutoff, side="left"))
        return EventSeries.from_times(self.times[:k]), EventSeries.from_times(self.times[k:])


def event_series(records: Iterable[PatentRecord], cutoff=None) -> EventSeries:
    """Publication times of ``records`` as days since the epoch.

    Records published after ``cutoff`` (a date, timestamp or day number) are
    dropped; a record dated exactly at the cutoff is kept.
    """
    times = np.array([to_days(r.publication_date) for r in records], dtype=float)
    if cutoff is not None:
        limit = float(cutoff) if isinstance(cutoff, (int, float)) else to_days(cutoff)
        times = times[times <= limit]
    if times.size == 0:
        raise ValueError("no events left after applying the cutoff")
    return EventSeries.from_times(times)


# -- file formats -----------------------------------------------------------

def read_records(path: str | Path) -> list[PatentRecord]:
    """Read the patent CSV; raises :class:`RecordError` naming the bad row."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise RecordError(f"expected header {','.join(CSV_HEADER)}, got {header!r}")
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise RecordError(f"expected 3 fields, got {len(row)}", row_no)
            pid, date, countries = (cell.strip() for cell in row)
            codes = tuple(c.strip() for c in countries.split(";") if c.strip())
            try:
                records.append(PatentRecord(pid, date, codes))
            except (ValueError, TypeError) as exc:
                raise RecordError(str(exc), row_no) from None
    return records


def write_records(records: Iterable[PatentRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            stamp = r.publication_date
            text = stamp.date().isoformat() if stamp.time() == dt.time(0) else stamp.isoformat()
            writer.writerow([r.id, text, ";".join(r.applicant_countries)])


def write_graph(graph: CooperationGraph, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nodes_path, edges_path = out_dir / "nodes.csv", out_dir / "edges.csv"
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["country", "fractional_count"])
        for country in graph.country_universe:
            writer.writerow([country, repr(float(graph.nodes.get(country, 0.0)))])
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["country_a", "country_b", "count"])
        for (a, b), count in sorted(graph.edges.items()):
            writer.writerow([a, b, count])
    return nodes_path, edges_path


def read_graph(nodes_path: str | Path, edges_path: str | Path) -> CooperationGraph:
    nodes: dict[str, float] = {}
    with open(nodes_path, newline="", encoding="utf-8") as fh:
        for row_no, row in enumerate(csv.DictReader(fh), start=1):
            try:
                country = row["country"].strip()
                if country != OTHERS:
                    country = map_to_universe(country)
                count = float(row["fractional_count"])
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise RecordError(f"bad node row ({exc})", row_no) from None
            if not count >= 0:
                raise RecordError("fractional count must be nonnegative", row_no)
            nodes[country] = count
    universe = tuple(dict.fromkeys(COUNTRY_UNIVERSE + tuple(nodes)))
    edges: dict[tuple[str, str], int] = {}
    with open(edges_path, newline="", encoding="utf-8") as fh:
        for row_no, row in enumerate(csv.DictReader(fh), start=1):
            try:
                a, b = row["country_a"].strip(), row["country_b"].strip()
                count = int(row["count"])
                key = edge_key(a, b)
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise RecordError(f"bad edge row ({exc})", row_no) from None
            if count < 0:
                raise RecordError("edge count must be nonnegative", row_no)
            for c in key:
                nodes.setdefault(c, 0.0)
            edges[key] = edges.get(key, 0) + count
    return CooperationGraph(nodes=nodes, edges=dict(sorted(edges.items())),
                            country_universe=universe)


def write_events(events: EventSeries, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in events.times:
            fh.write(f"{float(t)!r}\n")


def read_events(path: str | Path) -> EventSeries:
    times = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                times.append(float(text))
            except ValueError:
                try:
                    times.append(to_days(text))
                except ValueError:
                    raise RecordError(f"bad event time {text!r}", line_no) from None
    if not times:
        raise RecordError("no events in file")
    return EventSeries.from_times(times)
