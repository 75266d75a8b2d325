"""Report records and their JSON / CSV serialization."""

from __future__ import annotations

import csv
import io
import json
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import InputError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ReportRecord:
    experiment: str
    sample: int
    method: str
    budget: str
    ratio: float
    n_vision: int
    n_text: int
    n_full: int
    n_kept: int
    applied_ratio: float | None = None
    gap: float | None = None
    mse: float | None = None
    spearman: float | None = None
    flops_saved: float | None = None
    flops_saved_vision: float | None = None
    kv_bytes_full: int | None = None
    kv_bytes_kept: int | None = None
    text_budget: int | None = None
    edit_distance: int | None = None
    hidden_mse: float | None = None
    evictions: int | None = None
    prefill_evicted: int | None = None
    peak_tokens: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_NAMES = [f.name for f in fields(ReportRecord)]
_HINTS = typing.get_type_hints(ReportRecord)


def _parse(name: str, raw: str):
    if raw == "":
        return None
    hint = _HINTS[name]
    if hint is str:
        return raw
    if int in typing.get_args(hint) or hint is int:
        return int(raw)
    return float(raw)


def render_report(records: Sequence[ReportRecord], fmt: str = "json", metadata: dict | None = None) -> str:
    if not records:
        raise InputError("no records to report")
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, "metadata": metadata or {}, "records": [r.to_dict() for r in records]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        writer.writerow(["schema_version", *FIELD_NAMES])
        for r in records:
            row = r.to_dict()
            writer.writerow([SCHEMA_VERSION, *("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k] for k in FIELD_NAMES)])
        return buf.getvalue()
    raise InputError(f"unknown report format {fmt!r}")


def emit_report(records: Sequence[ReportRecord], path: str | Path, fmt: str = "json", metadata: dict | None = None) -> Path:
    """Write ``records`` to ``path``; identical records give identical bytes."""
    text = render_report(records, fmt, metadata)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def load_report(path: str | Path) -> tuple[list[ReportRecord], dict]:
    """Parse a JSON or CSV report back into records (and metadata, JSON only)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv":
        rows = list(csv.reader(io.StringIO(text, newline="")))
        header, body = rows[0], rows[1:]
        if header[0] != "schema_version" or any(r[0] != str(SCHEMA_VERSION) for r in body):
            raise InputError("unsupported report schema")
        names = header[1:]
        return [ReportRecord(**{n: _parse(n, v) for n, v in zip(names, r[1:])}) for r in body], {}
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"unsupported report schema {doc.get('schema_version')}")
    return [ReportRecord(**r) for r in doc["records"]], doc.get("metadata", {})


def write_events(events: Iterable[dict], path: str | Path) -> Path:
    """Eviction events as JSON lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    return path


def summarize(records: Sequence[ReportRecord]) -> list[dict]:
    """Mean of the numeric outcome columns per (experiment, method, budget, ratio)."""
    groups: dict[tuple, list[ReportRecord]] = {}
    for r in records:
        groups.setdefault((r.experiment, r.method, r.budget, r.ratio), []).append(r)
    out = []
    for (exp, method, budget, ratio), rs in sorted(groups.items()):
        row = {"experiment": exp, "method": method, "budget": budget, "ratio": ratio, "count": len(rs)}
        for col in ("applied_ratio", "mse", "spearman", "flops_saved", "edit_distance", "hidden_mse", "evictions", "prefill_evicted"):
            vals = [getattr(r, col) for r in rs if getattr(r, col) is not None]
            if vals:
                row[col] = sum(vals) / len(vals)
        out.append(row)
    return out
