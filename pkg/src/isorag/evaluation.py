"""Quality metrics, dataset ingestion, and report row aggregation."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from .core import Passage, QualityScore, Query, ReferenceAnswer, Response, RetrievalSet
from .errors import DatasetParseError

Metric = Callable[[Response, ReferenceAnswer], QualityScore]

_WS = re.compile(r"\s+")


def _normalize(text: str) -> str:
    return _WS.sub(" ", text.lower()).strip()


def metric_substring(response: Response, answer: ReferenceAnswer) -> QualityScore:
    """1.0 if any accepted answer string occurs in the response, else 0.0.

    Matching is case-insensitive with whitespace runs collapsed, so it is
    monotone under response extension: appending text never revokes a hit.
    """
    haystack = _normalize(response.text)
    hit = any(_normalize(a) in haystack for a in answer.accepted_strings)
    return QualityScore(1.0 if hit else 0.0)


# ---------------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------------

_RECORD_FIELDS = {"id", "question", "answers", "choices", "passages"}


@dataclass(frozen=True)
class DatasetRecord:
    query: Query
    answers: ReferenceAnswer
    passages: Tuple[Passage, ...]
    choices: Optional[Tuple[str, ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "passages", tuple(self.passages))
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))
            if len(self.choices) < 2:
                raise ValueError("choices, when present, need at least two labels")
        if not self.passages:
            raise ValueError("a dataset record needs at least one passage")

    def retrieval(self) -> RetrievalSet:
        return RetrievalSet(passages=self.passages, k=len(self.passages))


def _parse_record(doc: dict, line_no: int) -> DatasetRecord:
    unknown = set(doc) - _RECORD_FIELDS
    if unknown:
        raise DatasetParseError(f"line {line_no}: unknown fields {sorted(unknown)}")
    missing = {"id", "question", "answers", "passages"} - set(doc)
    if missing:
        raise DatasetParseError(f"line {line_no}: missing fields {sorted(missing)}")
    try:
        passages = tuple(
            Passage(text=p["text"], rank=p["rank"]) for p in doc["passages"]
        )
        return DatasetRecord(
            query=Query(id=str(doc["id"]), question=doc["question"]),
            answers=ReferenceAnswer(accepted_strings=frozenset(doc["answers"])),
            passages=passages,
            choices=tuple(doc["choices"]) if doc.get("choices") else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"line {line_no}: {exc}") from exc


def load_dataset(path: Union[str, Path]) -> List[DatasetRecord]:
    """Read a JSON-lines dataset; one record per line, schema enforced."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"line {line_no}: invalid JSON: {exc}") from exc
            records.append(_parse_record(doc, line_no))
    return records


# ---------------------------------------------------------------------------
# Report rows
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    """One query's scores; fields a given command does not compute stay None."""

    query_id: str
    bacc: Optional[float] = None
    cacc: Optional[float] = None
    racc: Optional[float] = None
    asr: Optional[float] = None
    status: Optional[str] = None
    wall_time_ms: Optional[int] = None

    def __post_init__(self) -> None:
        for name in ("bacc", "cacc", "racc", "asr"):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {value}")


REPORT_COLUMNS = [f.name for f in fields(ReportRow)]


def row_to_dict(row: ReportRow) -> Dict[str, object]:
    return {name: getattr(row, name) for name in REPORT_COLUMNS}


def rows_to_jsonl(rows: Sequence[ReportRow]) -> str:
    return "".join(json.dumps(row_to_dict(r)) + "\n" for r in rows)


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow(
            ["" if v is None else v for v in (getattr(row, c) for c in REPORT_COLUMNS)]
        )
    return buf.getvalue()


def read_rows_jsonl(path: Union[str, Path]) -> List[ReportRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            rows.append(ReportRow(**{k: doc.get(k) for k in REPORT_COLUMNS}))
    return rows


def merge_rows(row_groups: Sequence[Sequence[ReportRow]]) -> List[ReportRow]:
    """Merge rows from several files per query_id, later non-null fields winning."""
    merged: Dict[str, ReportRow] = {}
    order: List[str] = []
    for rows in row_groups:
        for row in rows:
            if row.query_id not in merged:
                merged[row.query_id] = ReportRow(query_id=row.query_id)
                order.append(row.query_id)
            target = merged[row.query_id]
            for name in REPORT_COLUMNS[1:]:
                value = getattr(row, name)
                if value is not None:
                    setattr(target, name, value)
    return [merged[qid] for qid in order]


def _mean(values: Sequence[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def aggregate_report(rows: Sequence[ReportRow]) -> Dict[str, object]:
    """Dataset-level means; subsampled-tau rows are additionally broken out,
    since their cacc is an approximation rather than a certified bound."""
    if not rows:
        raise ValueError("cannot aggregate an empty row list")
    summary: Dict[str, object] = {"count": len(rows)}
    for name in ("bacc", "cacc", "racc", "asr"):
        values = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        summary[f"{name}_mean"] = _mean(values)
        summary[f"{name}_count"] = len(values)
    by_status: Dict[str, Dict[str, object]] = {}
    for row in rows:
        if row.status is None:
            continue
        bucket = by_status.setdefault(row.status, {"count": 0, "cacc_values": []})
        bucket["count"] += 1
        if row.cacc is not None:
            bucket["cacc_values"].append(row.cacc)
    summary["by_status"] = {
        status: {"count": b["count"], "cacc_mean": _mean(b["cacc_values"])}
        for status, b in sorted(by_status.items())
    }
    return summary
