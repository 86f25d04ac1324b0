"""Tolerant conversion between free-text model output and triplet sets.

Accepted shape: the token ``None`` for "no mismatch", otherwise any number of
``{class, phrase[, correction]}`` or ``(class, phrase[, correction])`` groups
embedded in arbitrary prose. Fields may be wrapped in single or double quotes;
backslash escapes are honoured inside quoted fields.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from itmeval.text import DEFAULT_POLICY, NormalizationPolicy, normalize
from itmeval.types import (
    MAX_GOLD_MISMATCHES,
    SOURCES,
    AspectClass,
    AspectTriplet,
    ExampleRecord,
    Task,
    TripletSet,
)

_CLOSERS = {"{": "}", "(": ")"}
_BRACKETS = set("{}()[]")
_QUOTES = "\"'"
_NONE_LINE = re.compile(r"^[\W_]*(?:[^\W\d_][\w ]*:)?[\W_]*none[\W_]*$", re.IGNORECASE)


@dataclass(frozen=True)
class ParseWarning:
    kind: str
    message: str
    offset: Optional[int] = None


@dataclass(frozen=True)
class ParseResult:
    triplets: TripletSet
    warnings: tuple[ParseWarning, ...] = ()
    asserted_none: bool = False
    unparseable: bool = False


class _GroupError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _read_quoted(text: str, i: int) -> tuple[str, int]:
    """Read a quoted field starting at ``text[i]``. Returns (value, index after quote)."""
    quote = text[i]
    buf = []
    i += 1
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            buf.append(text[i + 1])
            i += 2
            continue
        if ch == quote:
            return "".join(buf), i + 1
        buf.append(ch)
        i += 1
    raise _GroupError("unterminated", "unterminated quoted field")


def _skip_ws(text: str, i: int) -> int:
    while i < len(text) and text[i].isspace():
        i += 1
    return i


def _clean_bare(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in _QUOTES:
        value = value[1:-1].strip()
    return value


def _scan_group(text: str, start: int) -> tuple[list[str], int]:
    """Split the bracketed group opening at ``start`` into fields.

    Returns (fields, index just past the closing bracket).
    """
    close = _CLOSERS[text[start]]
    fields: list[str] = []
    i = start + 1
    while True:
        field_start = i
        j = _skip_ws(text, i)
        value = None
        if j < len(text) and text[j] in _QUOTES:
            try:
                quoted, k = _read_quoted(text, j)
            except _GroupError:
                quoted = None
            if quoted is not None:
                k = _skip_ws(text, k)
                if k < len(text) and text[k] in (",", close):
                    value, i = quoted.strip(), k
        if value is None:
            # bare field: up to the next comma or closer, no nested brackets
            i = field_start
            while i < len(text) and text[i] != "," and text[i] not in _BRACKETS:
                i += 1
            if i >= len(text):
                raise _GroupError("unterminated", "group is never closed")
            if text[i] != "," and text[i] != close:
                raise _GroupError("bracket", f"unexpected {text[i]!r} inside group")
            value = _clean_bare(text[field_start:i])
        fields.append(value)
        if text[i] == close:
            return fields, i + 1
        i += 1  # past the comma


def _triplet_from_fields(fields: list[str], task: Task) -> AspectTriplet:
    arity = 3 if task == "mdc" else 2
    if len(fields) != arity:
        raise _GroupError("field_count", f"expected {arity} fields, got {len(fields)}")
    try:
        aspect = AspectClass.parse(fields[0])
    except ValueError:
        raise _GroupError("unknown_class", f"unknown aspect class {fields[0]!r}") from None
    if not fields[1]:
        raise _GroupError("empty_field", "empty phrase")
    if task == "mdc" and not fields[2]:
        raise _GroupError("empty_field", "empty correction")
    return AspectTriplet(aspect, fields[1], fields[2] if task == "mdc" else None)


def parse_prediction_text(raw: str, task: Task = "mdc") -> ParseResult:
    """Extract the triplet set from raw model output. Never raises."""
    if task not in ("md", "mdc"):
        raise ValueError(f"unknown task {task!r}")
    found: list[AspectTriplet] = []
    warnings: list[ParseWarning] = []
    spans: list[tuple[int, int]] = []
    i = 0
    n = len(raw)
    while i < n:
        if raw[i] not in _CLOSERS:
            i += 1
            continue
        try:
            fields, end = _scan_group(raw, i)
            found.append(_triplet_from_fields(fields, task))
        except _GroupError as exc:
            warnings.append(ParseWarning(exc.kind, str(exc), i))
            i += 1
            continue
        spans.append((i, end))
        i = end

    outside = raw
    for s, e in reversed(spans):
        outside = outside[:s] + "\n" + outside[e:]
    says_none = any(_NONE_LINE.match(line.strip()) for line in outside.splitlines())

    triplets, dups = TripletSet.with_duplicates(found)
    if dups:
        warnings.append(ParseWarning("duplicate", f"{dups} duplicate triplet(s) collapsed"))
    if found:
        if says_none:
            warnings.append(ParseWarning("conflicting_none", "'None' alongside triplet groups; groups kept"))
        return ParseResult(triplets, tuple(warnings))
    if says_none:
        return ParseResult(TripletSet(), tuple(warnings), asserted_none=True)
    if raw.strip():
        warnings.append(ParseWarning("unparseable", "no 'None' token and no parseable triplet group"))
        return ParseResult(TripletSet(), tuple(warnings), unparseable=True)
    return ParseResult(TripletSet(), tuple(warnings))


def _quote(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def serialize_triplet_set(triplets: TripletSet, task: Task = "mdc") -> str:
    """Canonical text form; ``parse_prediction_text`` inverts it exactly."""
    if not triplets:
        return "None"
    groups = []
    for t in triplets:
        fields = [t.aspect.value, _quote(t.phrase)]
        if task == "mdc":
            if t.correction is None:
                raise ValueError("MDC serialization needs a correction on every triplet")
            fields.append(_quote(t.correction))
        groups.append("{" + ", ".join(fields) + "}")
    return "\n".join(groups)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


def _contains(haystack: str, needle: str) -> bool:
    return needle in haystack


def validate_record(rec: ExampleRecord, policy: NormalizationPolicy = DEFAULT_POLICY) -> list[Violation]:
    """All invariant violations of ``rec``; empty means valid."""
    out: list[Violation] = []
    if not rec.id:
        out.append(Violation("id", "empty id"))
    if rec.source not in SOURCES:
        out.append(Violation("source", f"source {rec.source!r} not in {SOURCES}"))
    if len(rec.gold) > MAX_GOLD_MISMATCHES:
        out.append(
            Violation("cardinality", f"{len(rec.gold)} gold mismatches (max {MAX_GOLD_MISMATCHES})")
        )
    caption = normalize(rec.caption, policy)
    for t in rec.gold:
        if not _contains(caption, normalize(t.phrase, policy)):
            out.append(Violation("substring", f"gold phrase {t.phrase!r} not found in caption"))
    return out
