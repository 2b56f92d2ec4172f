"""Entity visual-description knowledge base.

The KB maps an entity sense ``(entity, sense_tag)`` to an ordered list of
short visual descriptions.  Values are immutable: every editing operation
returns a new :class:`EvdKnowledgeBase` with ``version + 1`` and leaves the
input untouched, so a snapshot can be shared between readers freely.

On disk a KB is UTF-8 JSON lines: one header record followed by one record
per entry, written in sorted key order.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .errors import (
    DuplicateKey,
    DuplicateSense,
    EmptyDescriptions,
    IoFailure,
    MalformedRecord,
    SenseConflict,
    TooManyDescriptions,
)

KB_FORMAT = "evd-kb"
KB_SCHEMA_VERSION = 1
DEFAULT_H_MAX = 5
SOURCES = ("llm", "manual")

Key = tuple[str, "str | None"]


def utc_timestamp(epoch: float | None = None) -> str:
    """RFC3339 UTC timestamp; honours ``SOURCE_DATE_EPOCH`` for reproducible builds."""
    if epoch is None:
        env = os.environ.get("SOURCE_DATE_EPOCH")
        epoch = float(env) if env else time.time()
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _sort_key(key: Key) -> tuple[str, int, str]:
    entity, tag = key
    return (entity, 0 if tag is None else 1, tag or "")


@dataclass(frozen=True)
class EntitySense:
    entity: str
    sense_tag: str | None = None
    source: str = "llm"

    def __post_init__(self):
        if not self.entity or self.entity != self.entity.lower():
            raise ValueError(f"entity must be a non-empty lowercase string, got {self.entity!r}")
        if self.sense_tag is not None and not self.sense_tag.strip():
            raise ValueError("sense_tag must be non-empty when present")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def key(self) -> Key:
        return (self.entity, self.sense_tag)


@dataclass(frozen=True)
class EvdEntry:
    sense: EntitySense
    descriptions: tuple[str, ...]
    created_at: str

    @property
    def key(self) -> Key:
        return self.sense.key


def _check_descriptions(descriptions: Sequence[str], h_max: int) -> tuple[str, ...]:
    descs = tuple(descriptions)
    if not descs:
        raise EmptyDescriptions("at least one description is required")
    if len(descs) > h_max:
        raise TooManyDescriptions(f"{len(descs)} descriptions exceed h_max={h_max}")
    for d in descs:
        if not isinstance(d, str) or not d.strip():
            raise ValueError("descriptions must be non-empty strings")
    if len(set(descs)) != len(descs):
        raise ValueError("duplicate description strings in one entry")
    return descs


# --------------------------------------------------------------------------
# entity linking


@dataclass(frozen=True)
class EntityMatch:
    """A KB entity found in a query.

    ``span`` is a half-open character range into the query.  ``senses`` lists
    every sense stored under ``entity`` (one element for unambiguous entities).
    """

    entity: str
    span: tuple[int, int]
    senses: tuple[EntitySense, ...] = ()

    def surface(self, query: str) -> str:
        return query[self.span[0]:self.span[1]]


_TOKEN = re.compile(r"\w+", re.UNICODE)


class PhraseMatcher:
    """Longest-match, left-to-right, whole-word, case-insensitive phrase finder."""

    def __init__(self, phrases: Iterable[str]):
        table: dict[tuple[str, ...], str] = {}
        for phrase in sorted(set(phrases)):
            words = tuple(w.lower() for w in _TOKEN.findall(phrase))
            if words and words not in table:
                table[words] = phrase
        self._table = table
        self._max_len = max((len(w) for w in table), default=0)

    def find(self, text: str) -> list[tuple[str, int, int]]:
        """Return ``(phrase, start, end)`` triples, non-overlapping, by start."""
        if not self._table:
            return []
        toks = [(m.group().lower(), m.start(), m.end()) for m in _TOKEN.finditer(text)]
        out = []
        i = 0
        while i < len(toks):
            for n in range(min(self._max_len, len(toks) - i), 0, -1):
                words = tuple(t[0] for t in toks[i:i + n])
                phrase = self._table.get(words)
                if phrase is not None:
                    out.append((phrase, toks[i][1], toks[i + n - 1][2]))
                    i += n
                    break
            else:
                i += 1
        return out


# --------------------------------------------------------------------------
# the knowledge base


@dataclass(frozen=True)
class EvdKnowledgeBase:
    entries: Mapping[Key, EvdEntry] = field(default_factory=dict)
    version: int = 0
    h_max: int = DEFAULT_H_MAX

    def __post_init__(self):
        ordered = dict(sorted(self.entries.items(), key=lambda kv: _sort_key(kv[0])))
        object.__setattr__(self, "entries", MappingProxyType(ordered))

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EvdKnowledgeBase):
            return NotImplemented
        return self.version == other.version and dict(self.entries) == dict(other.entries)

    def __hash__(self):
        return hash((self.version, tuple(self.entries.items())))

    @classmethod
    def from_entries(cls, entries: Iterable[EvdEntry], version: int = 0,
                     h_max: int = DEFAULT_H_MAX) -> "EvdKnowledgeBase":
        table: dict[Key, EvdEntry] = {}
        for e in entries:
            if e.key in table:
                raise DuplicateKey(*e.key)
            _check_descriptions(e.descriptions, h_max)
            table[e.key] = e
        _check_sense_consistency(table)
        return cls(table, version, h_max)

    def entities(self) -> list[str]:
        return sorted({k[0] for k in self.entries})

    def senses_of(self, entity: str) -> list[EvdEntry]:
        return [e for k, e in self.entries.items() if k[0] == entity]

    def lookup(self, entity: str, sense_tag: str | None = None) -> list[EvdEntry]:
        entity = entity.lower()
        if sense_tag is not None:
            e = self.entries.get((entity, sense_tag))
            return [e] if e is not None else []
        return self.senses_of(entity)

    def matcher(self) -> PhraseMatcher:
        m = self.__dict__.get("_matcher")
        if m is None:
            m = PhraseMatcher(self.entities())
            object.__setattr__(self, "_matcher", m)
        return m

    def link_entities(self, query: str) -> list[EntityMatch]:
        out = []
        for entity, start, end in self.matcher().find(query):
            senses = tuple(e.sense for e in self.senses_of(entity))
            out.append(EntityMatch(entity, (start, end), senses))
        return out

    def _mutated(self, table: dict[Key, EvdEntry]) -> "EvdKnowledgeBase":
        return EvdKnowledgeBase(table, self.version + 1, self.h_max)


def _check_sense_consistency(table: Mapping[Key, EvdEntry]) -> None:
    tagged = {k[0] for k in table if k[1] is not None}
    untagged = {k[0] for k in table if k[1] is None}
    both = tagged & untagged
    if both:
        raise SenseConflict(f"entities with both tagged and untagged senses: {sorted(both)}")


def lookup(kb: EvdKnowledgeBase, entity: str, sense_tag: str | None = None) -> list[EvdEntry]:
    return kb.lookup(entity, sense_tag)


def link_entities(kb: EvdKnowledgeBase, query: str) -> list[EntityMatch]:
    return kb.link_entities(query)


# --------------------------------------------------------------------------
# editing


def inject_knowledge(kb: EvdKnowledgeBase, sense: EntitySense, descriptions: Sequence[str],
                     created_at: str | None = None) -> EvdKnowledgeBase:
    """Upsert an entry written by a human editor (``source`` becomes ``manual``)."""
    descs = _check_descriptions(descriptions, kb.h_max)
    others = {k[1] for k in kb.entries if k[0] == sense.entity and k != sense.key}
    if others and ((sense.sense_tag is None) != (None in others)):
        raise SenseConflict(
            f"{sense.entity!r} already has {'tagged' if sense.sense_tag is None else 'untagged'} senses; "
            "use add_parallel_sense to introduce a tagged sense"
        )
    entry = EvdEntry(replace(sense, source="manual"), descs, created_at or utc_timestamp())
    table = dict(kb.entries)
    table[sense.key] = entry
    return kb._mutated(table)


def add_parallel_sense(kb: EvdKnowledgeBase, entity: str, sense_tag: str, descriptions: Sequence[str],
                       default_tag: str | None = None, created_at: str | None = None) -> EvdKnowledgeBase:
    """Add another sense of ``entity`` next to the existing ones.

    If the entity is currently stored untagged, that entry is first retagged to
    ``default_tag`` (required in that case), since tagged and untagged senses
    of one entity may not coexist.
    """
    entity = entity.lower()
    if not sense_tag or not sense_tag.strip():
        raise ValueError("sense_tag must be non-empty")
    descs = _check_descriptions(descriptions, kb.h_max)
    if (entity, sense_tag) in kb.entries:
        raise DuplicateSense(f"{entity!r} already has sense {sense_tag!r}")
    table = dict(kb.entries)
    untagged = table.get((entity, None))
    if untagged is not None:
        if not default_tag or default_tag == sense_tag:
            raise SenseConflict(
                f"{entity!r} is stored untagged; a distinct default_tag is needed to retag it"
            )
        del table[(entity, None)]
        retagged = replace(untagged, sense=replace(untagged.sense, sense_tag=default_tag))
        table[retagged.key] = retagged
    sense = EntitySense(entity, sense_tag, "manual")
    table[sense.key] = EvdEntry(sense, descs, created_at or utc_timestamp())
    return kb._mutated(table)


# --------------------------------------------------------------------------
# persistence


def _entry_to_record(e: EvdEntry) -> dict:
    return {
        "entity": e.sense.entity,
        "sense_tag": e.sense.sense_tag,
        "descriptions": list(e.descriptions),
        "source": e.sense.source,
        "created_at": e.created_at,
    }


def _record_to_entry(rec: object, line_no: int, h_max: int) -> EvdEntry:
    if not isinstance(rec, dict):
        raise MalformedRecord(line_no, "record is not an object")
    try:
        sense = EntitySense(rec["entity"], rec.get("sense_tag"), rec["source"])
        descs = _check_descriptions(rec["descriptions"], h_max)
        created = rec["created_at"]
        datetime.fromisoformat(created.replace("Z", "+00:00"))
    except (KeyError, TypeError, ValueError, AttributeError, EmptyDescriptions, TooManyDescriptions) as exc:
        raise MalformedRecord(line_no, str(exc)) from None
    return EvdEntry(sense, descs, created)


def dumps_kb(kb: EvdKnowledgeBase) -> str:
    lines = [json.dumps({"format": KB_FORMAT, "schema_version": KB_SCHEMA_VERSION, "kb_version": kb.version})]
    for entry in kb.entries.values():
        lines.append(json.dumps(_entry_to_record(entry), ensure_ascii=False))
    return "\n".join(lines) + "\n"


def loads_kb(text: str, h_max: int = DEFAULT_H_MAX) -> EvdKnowledgeBase:
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        return EvdKnowledgeBase(version=0, h_max=h_max)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedRecord(1, f"bad header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != KB_FORMAT:
        raise MalformedRecord(1, "missing evd-kb header")
    if header.get("schema_version") != KB_SCHEMA_VERSION:
        raise MalformedRecord(1, f"unsupported schema_version {header.get('schema_version')!r}")
    version = header.get("kb_version")
    if not isinstance(version, int) or version < 0:
        raise MalformedRecord(1, "kb_version must be a non-negative integer")

    table: dict[Key, EvdEntry] = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(line_no, str(exc)) from None
        entry = _record_to_entry(rec, line_no, h_max)
        if entry.key in table:
            raise DuplicateKey(*entry.key)
        table[entry.key] = entry
        try:
            _check_sense_consistency(table)
        except SenseConflict as exc:
            raise MalformedRecord(line_no, str(exc)) from None
    return EvdKnowledgeBase(table, version, h_max)


def load_kb(path: str | os.PathLike, h_max: int = DEFAULT_H_MAX) -> EvdKnowledgeBase:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return loads_kb(text, h_max)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def save_kb(kb: EvdKnowledgeBase, path: str | os.PathLike) -> None:
    atomic_write(path, dumps_kb(kb).encode("utf-8"))
