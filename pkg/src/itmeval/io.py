"""Dataset / prediction / report files.

Dataset lines::

    {"id", "image", "caption", "source", "domain",
     "mismatches": [{"class", "phrase", "correction"}, ...]}

Prediction lines: ``{"id", "raw"}`` or ``{"id", "triplets": [...]}``.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterator

from itmeval.errors import SchemaError
from itmeval.parsing import validate_record
from itmeval.text import DEFAULT_POLICY, NormalizationPolicy
from itmeval.types import ExampleRecord, PredictionRecord, TripletSet

_DATASET_FIELDS = {"id": str, "image": str, "caption": str, "source": str, "domain": str, "mismatches": list}


def iter_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, object]]:
    """Yield (line number, decoded value); blank lines skipped. Decode errors raise SchemaError."""
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield n, json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError([(n, f"invalid JSON: {exc.msg}")], str(path)) from None


def load_dataset(
    path: str | os.PathLike, policy: NormalizationPolicy = DEFAULT_POLICY
) -> list[ExampleRecord]:
    problems: list[tuple[int, str]] = []
    records: list[ExampleRecord] = []
    seen: dict[str, int] = {}
    try:
        rows = list(iter_jsonl(path))
    except UnicodeDecodeError as exc:
        raise SchemaError([(0, f"not UTF-8: {exc}")], str(path)) from None
    for n, row in rows:
        if not isinstance(row, dict):
            problems.append((n, "line is not a JSON object"))
            continue
        bad = [k for k, t in _DATASET_FIELDS.items() if not isinstance(row.get(k), t)]
        if bad:
            problems.append((n, f"missing or mistyped fields: {', '.join(bad)}"))
            continue
        try:
            gold = TripletSet.from_list(row["mismatches"], "mdc")
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            problems.append((n, f"bad mismatch entry: {exc}"))
            continue
        if len(gold) != len(row["mismatches"]):
            problems.append((n, "duplicate mismatch entries"))
        rec = ExampleRecord(row["id"], row["image"], row["caption"], row["source"], row["domain"], gold)
        for v in validate_record(rec, policy):
            problems.append((n, f"{v.kind}: {v.message}"))
        if rec.id in seen:
            problems.append((n, f"duplicate id {rec.id!r} (first on line {seen[rec.id]})"))
        seen.setdefault(rec.id, n)
        records.append(rec)
    if problems:
        raise SchemaError(problems, str(path))
    return records


def load_predictions(path: str | os.PathLike, task: str = "mdc") -> dict[str, PredictionRecord]:
    problems: list[tuple[int, str]] = []
    out: dict[str, PredictionRecord] = {}
    lines: dict[str, int] = {}
    try:
        rows = list(iter_jsonl(path))
    except UnicodeDecodeError as exc:
        raise SchemaError([(0, f"not UTF-8: {exc}")], str(path)) from None
    for n, row in rows:
        if not isinstance(row, dict) or not isinstance(row.get("id"), str):
            problems.append((n, "expected an object with a string 'id'"))
            continue
        has_raw = "raw" in row
        has_trip = "triplets" in row
        if has_raw == has_trip:
            problems.append((n, "exactly one of 'raw' / 'triplets' required"))
            continue
        try:
            if has_raw:
                if not isinstance(row["raw"], str):
                    raise TypeError("'raw' must be a string")
                rec = PredictionRecord(row["id"], raw_text=row["raw"])
            else:
                rec = PredictionRecord(row["id"], triplets=TripletSet.from_list(row["triplets"], task))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            problems.append((n, f"bad prediction: {exc}"))
            continue
        if rec.id in lines:
            problems.append((n, f"duplicate id {rec.id!r} (first on line {lines[rec.id]})"))
            continue
        lines[rec.id] = n
        out[rec.id] = rec
    if problems:
        raise SchemaError(problems, str(path))
    return out


def load_human_scores(path: str | os.PathLike) -> dict[str, float]:
    problems = []
    out: dict[str, float] = {}
    for n, row in iter_jsonl(path):
        if (
            not isinstance(row, dict)
            or not isinstance(row.get("id"), str)
            or isinstance(row.get("score"), bool)
            or not isinstance(row.get("score"), (int, float))
        ):
            problems.append((n, "expected {'id': str, 'score': number}"))
            continue
        if not 1 <= row["score"] <= 5:
            problems.append((n, f"human score {row['score']} outside [1, 5]"))
            continue
        out[row["id"]] = float(row["score"])
    if problems:
        raise SchemaError(problems, str(path))
    return out


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str | os.PathLike, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def write_jsonl(path: str | os.PathLike, rows) -> None:
    write_atomic(path, "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows))


def breakdowns_csv(breakdowns: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dimension", "group", "mean", "n"])
    for dim, table in breakdowns.items():
        for group, cell in table.items():
            w.writerow([dim, group, "" if cell["mean"] is None else repr(cell["mean"]), cell["n"]])
    return buf.getvalue()
