"""Pilot session-log ingestion and per-period summaries.

Log files are line-delimited JSON records with the same shape the simulator's
message log writes, so simulated runs and pilot-style fixtures are analyzed
with the same tool.  A file belongs to the period window containing the date
of its first valid record; sizes are on-disk bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date, datetime
from importlib import resources
from pathlib import Path

MSG_TYPES = ("CAM", "DENM", "IVI", "SESSION")


class PilotLogError(ValueError):
    pass


@dataclass(frozen=True)
class LogRecord:
    ts: datetime
    session_id: str
    station_id: str
    msg_type: str
    payload: object

    @classmethod
    def from_line(cls, line: str) -> "LogRecord":
        obj = json.loads(line)
        msg_type = obj["msg_type"]
        if msg_type not in MSG_TYPES:
            raise PilotLogError(f"unknown msg_type {msg_type!r}")
        return cls(
            ts=datetime.fromisoformat(obj["ts"]),
            session_id=str(obj["session_id"]),
            station_id=str(obj["station_id"]),
            msg_type=msg_type,
            payload=obj.get("payload"),
        )


@dataclass(frozen=True)
class PeriodWindow:
    name: str
    start_date: date
    end_date: date  # inclusive

    def __post_init__(self):
        if self.start_date > self.end_date:
            raise PilotLogError(f"window {self.name}: start after end")

    def contains(self, d: date) -> bool:
        return self.start_date <= d <= self.end_date

    @classmethod
    def from_json(cls, obj: dict) -> "PeriodWindow":
        return cls(
            name=str(obj["name"]),
            start_date=date.fromisoformat(obj["start_date"]),
            end_date=date.fromisoformat(obj["end_date"]),
        )


def parse_log(path: str | Path) -> tuple[list[LogRecord], int]:
    """Parse one log file; malformed lines are tallied, never fatal."""
    records: list[LogRecord] = []
    errors = 0
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(LogRecord.from_line(line))
            except (json.JSONDecodeError, KeyError, ValueError):
                errors += 1
    return records, errors


def _validate_windows(windows: list[PeriodWindow]) -> None:
    for i, a in enumerate(windows):
        for b in windows[i + 1 :]:
            if a.start_date <= b.end_date and b.start_date <= a.end_date:
                raise PilotLogError(f"windows {a.name!r} and {b.name!r} overlap")


@dataclass
class PeriodSummary:
    window: PeriodWindow
    file_count: int = 0
    total_bytes: int = 0
    records_by_type: dict | None = None

    def __post_init__(self):
        if self.records_by_type is None:
            self.records_by_type = {t: 0 for t in MSG_TYPES}

    def to_json(self) -> dict:
        return {
            "window": self.window.name,
            "start_date": self.window.start_date.isoformat(),
            "end_date": self.window.end_date.isoformat(),
            "file_count": self.file_count,
            "total_bytes": self.total_bytes,
            "records_by_type": dict(self.records_by_type),
        }


def summarize_periods(files: list[str | Path], windows: list[PeriodWindow]) -> list[PeriodSummary]:
    """Bucket files into period windows by their first record's date.

    Windows must not overlap within one request; files whose first record
    falls outside every window (or that contain no valid record) are skipped.
    The result is independent of file enumeration order.
    """
    _validate_windows(windows)
    summaries = [PeriodSummary(window=w) for w in windows]
    for path in sorted(Path(p) for p in files):
        records, _errors = parse_log(path)
        if not records:
            continue
        first_date = records[0].ts.date()
        for summary in summaries:
            if summary.window.contains(first_date):
                summary.file_count += 1
                summary.total_bytes += path.stat().st_size
                for rec in records:
                    summary.records_by_type[rec.msg_type] += 1
                break
    return summaries


def load_period_fixture() -> dict[str, list[PeriodWindow]]:
    """Named period windows shipped with the package.

    "collection" is the overall span; "periods" are the five non-overlapping
    phases.  They overlap each other, so summarize against one group at a time.
    """
    raw = json.loads(resources.files("citsim").joinpath("data/pilot_periods.json").read_text())
    return {
        "collection": [PeriodWindow.from_json(raw["collection"])],
        "periods": [PeriodWindow.from_json(w) for w in raw["periods"]],
    }


# -- synthetic fixture corpus ---------------------------------------------------

#: Per-site, per-period synthetic corpus targets: (file count, total bytes).
#: Byte totals are padded to match the published collection-size table at
#: the labeled precision; this corpus is synthetic, not recovered pilot data.
CORPUS_TARGETS = {
    "attica": {
        "pretesting": (49, 1_560_000),
        "baseline1": (7, 134_000),
        "treatment1": (56, 1_900_000),
        "baseline2": (51, 3_040_000),
        "treatment2": (1, 13_000),
    },
    "egnatia": {
        "pretesting": (6, 238_000),
        "baseline1": (5, 687_000),
        "treatment1": (8, 1_700_000),
        "baseline2": (3, 127_000),
        "treatment2": (0, 0),
    },
}

_PERIOD_DATES = {
    "pretesting": (date(2022, 1, 1), date(2022, 5, 17)),
    "baseline1": (date(2022, 5, 18), date(2022, 6, 19)),
    "treatment1": (date(2022, 6, 20), date(2022, 7, 17)),
    "baseline2": (date(2022, 7, 18), date(2022, 8, 15)),
    # Keep synthetic treatment2 files before the collection cutoff (Aug 23).
    "treatment2": (date(2022, 8, 16), date(2022, 8, 23)),
}


def generate_corpus(out_dir: str | Path, sites: tuple[str, ...] = ("attica", "egnatia")) -> int:
    """Write the deterministic synthetic log corpus; returns files written."""
    out = Path(out_dir)
    written = 0
    for site in sites:
        site_dir = out / site
        site_dir.mkdir(parents=True, exist_ok=True)
        for period, (count, total_bytes) in CORPUS_TARGETS[site].items():
            if count == 0:
                continue
            d0, d1 = _PERIOD_DATES[period]
            span = (d1 - d0).days
            base = total_bytes // count
            sizes = [base] * count
            sizes[-1] += total_bytes - base * count
            for k in range(count):
                day = d0.fromordinal(d0.toordinal() + (k * span) // max(count, 1))
                ts = datetime(day.year, day.month, day.day, 8, 0, 0)
                path = site_dir / f"{site}_{period}_{k:03d}.log"
                _write_padded_log(path, ts, f"{site}-{period}-{k}", sizes[k])
                written += 1
    return written


def _write_padded_log(path: Path, ts: datetime, session_id: str, target_bytes: int) -> None:
    lines = []
    size = 0
    k = 0
    while size < target_bytes:
        msg_type = MSG_TYPES[k % 3]  # CAM, DENM, IVI rotation
        record = {
            "v": 1,
            "ts": (ts.replace(second=0) if k == 0 else ts).isoformat(),
            "session_id": session_id,
            "station_id": f"obu{k % 10}",
            "msg_type": msg_type,
            "payload": {"seq": k, "note": "synthetic"},
        }
        line = json.dumps(record, separators=(",", ":"))
        if size + len(line) + 1 > target_bytes and lines:
            # Pad the final line's payload to land exactly on the target.
            pad = target_bytes - size - 1
            if pad > 40:
                record["payload"]["pad"] = "x" * (pad - len(line) - 11)
                line = json.dumps(record, separators=(",", ":"))
                if len(line) + 1 <= pad + len(line):
                    lines.append(line)
                    size += len(line) + 1
            break
        lines.append(line)
        size += len(line) + 1
        k += 1
    data = "\n".join(lines) + "\n"
    # Trim or pad with trailing spaces on the last line to hit the target.
    raw = data.encode()
    if len(raw) > target_bytes:
        raw = raw[: target_bytes - 1].rsplit(b"\n", 1)[0] + b"\n"
    if len(raw) < target_bytes:
        raw = raw[:-1] + b" " * (target_bytes - len(raw)) + b"\n"
    path.write_bytes(raw)
