"""Domain types for aspect-level image/caption mismatch records."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Literal, Optional

Task = Literal["md", "mdc"]
TASKS: tuple[str, ...] = ("md", "mdc")
SOURCES: tuple[str, ...] = ("gpt_synth", "retrieval", "diffusion")
MAX_GOLD_MISMATCHES = 3


class AspectClass(str, enum.Enum):
    ENTITY = "Entity"
    RELATION = "Relation"
    ATTRIBUTE = "Attribute"
    NUMBER = "Number"

    @classmethod
    def parse(cls, label: str) -> "AspectClass":
        """Case-insensitive lookup; raises ``ValueError`` for unknown labels."""
        key = label.strip().lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown aspect class {label!r}")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class AspectTriplet:
    """One (class, mismatched phrase, correction) unit.

    ``correction`` is ``None`` for the detection-only task.
    """

    aspect: AspectClass
    phrase: str
    correction: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.aspect, AspectClass):
            object.__setattr__(self, "aspect", AspectClass.parse(str(self.aspect)))
        phrase = self.phrase.strip()
        if not phrase:
            raise ValueError("triplet phrase must be non-empty")
        object.__setattr__(self, "phrase", phrase)
        if self.correction is not None:
            correction = self.correction.strip()
            if not correction:
                raise ValueError("triplet correction must be non-empty when present")
            object.__setattr__(self, "correction", correction)

    @property
    def sort_key(self) -> tuple[str, str, str]:
        return (self.aspect.value, self.phrase, self.correction or "")

    def to_dict(self) -> dict:
        out = {"class": self.aspect.value, "phrase": self.phrase}
        if self.correction is not None:
            out["correction"] = self.correction
        return out

    @classmethod
    def from_dict(cls, data: dict, task: Task = "mdc") -> "AspectTriplet":
        correction = data.get("correction") if task == "mdc" else None
        return cls(AspectClass.parse(data["class"]), data["phrase"], correction)


class TripletSet:
    """Immutable, canonically ordered, duplicate-free collection of triplets.

    The empty set stands for a ``None`` answer (no mismatch).
    """

    __slots__ = ("_items",)

    def __init__(self, triplets: Iterable[AspectTriplet] = ()):
        self._items = tuple(sorted(set(triplets), key=lambda t: t.sort_key))

    @classmethod
    def with_duplicates(cls, triplets: Iterable[AspectTriplet]) -> tuple["TripletSet", int]:
        """Build a set and report how many exact duplicates were dropped."""
        items = list(triplets)
        ts = cls(items)
        return ts, len(items) - len(ts)

    @property
    def triplets(self) -> tuple[AspectTriplet, ...]:
        return self._items

    def __iter__(self) -> Iterator[AspectTriplet]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> AspectTriplet:
        return self._items[i]

    def __bool__(self) -> bool:
        return bool(self._items)

    def __eq__(self, other) -> bool:
        return isinstance(other, TripletSet) and self._items == other._items

    def __hash__(self) -> int:
        return hash(self._items)

    def __repr__(self) -> str:
        return f"TripletSet({list(self._items)!r})"

    def classes(self) -> set[AspectClass]:
        return {t.aspect for t in self._items}

    def to_list(self) -> list[dict]:
        return [t.to_dict() for t in self._items]

    @classmethod
    def from_list(cls, rows: Iterable[dict], task: Task = "mdc") -> "TripletSet":
        return cls(AspectTriplet.from_dict(r, task) for r in rows)


@dataclass(frozen=True)
class ExampleRecord:
    id: str
    image: str
    caption: str
    source: str
    domain: str
    gold: TripletSet = field(default_factory=TripletSet)


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    raw_text: Optional[str] = None
    triplets: Optional[TripletSet] = None

    def __post_init__(self):
        if (self.raw_text is None) == (self.triplets is None):
            raise ValueError("exactly one of raw_text / triplets must be given")
