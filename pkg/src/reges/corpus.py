"""Dialogue datasets, item catalogs and recommendation-turn extraction.

Three dialogue formats are understood, all line-delimited JSON:

``canonical``
    ``{"dialogue_id", "turns": [{"speaker", "text"}], "recommendations": [{"turn_index", "item_id"}]}``
``redial``
    The raw ReDial release (``messages``, ``movieMentions``, worker ids).
    ``@<id>`` mentions are replaced by the mentioned title, consecutive
    messages from one worker are merged into a single turn, and every movie
    mentioned in a recommender turn becomes a recommendation entry.
``inspired``
    ``{"dialog_id", "dialog": [{"speaker": "SEEKER"|"RECOMMENDER", "text", "movies": [...]}]}``
    (a bare JSON list of turns is accepted too). ``movies`` may hold item ids
    or titles; titles are resolved against the catalog at extraction time.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from reges._io import Source, iter_lines

logger = logging.getLogger(__name__)

SEEKER = "seeker"
RECOMMENDER = "recommender"
SPEAKERS = (SEEKER, RECOMMENDER)
SPLITS = ("train", "validation", "test")
FORMATS = ("canonical", "redial", "inspired")

_YEAR_SUFFIX = re.compile(r"\s*\(\s*(\d{4})\s*\)\s*$")
_MENTION = re.compile(r"@(\d+)")
_APOSTROPHES = "'‘’ʼ`´"


class DatasetError(ValueError):
    """Raised for malformed dataset or catalog input."""


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str
    turn_index: int

    def to_dict(self) -> dict:
        return {"speaker": self.speaker, "text": self.text, "turn_index": self.turn_index}

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        return cls(d["speaker"], d["text"], int(d["turn_index"]))


@dataclass
class Dialogue:
    dialogue_id: str
    turns: list[Turn]
    recommendations: list[tuple[int, str]] = field(default_factory=list)
    # raw mention id -> title, tried when the id itself is not a catalog id
    mention_titles: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class RecInstance:
    instance_id: str
    history: tuple[Turn, ...]
    truth_item_id: str
    split: str = "train"

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "history": [t.to_dict() for t in self.history],
            "truth_item_id": self.truth_item_id,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecInstance":
        return cls(
            instance_id=d["instance_id"],
            history=tuple(Turn.from_dict(t) for t in d["history"]),
            truth_item_id=d["truth_item_id"],
            split=d.get("split", "train"),
        )


@dataclass(frozen=True)
class Item:
    item_id: str
    title: str
    year: int | None = None
    abstract: str = ""

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "title": self.title, "year": self.year, "abstract": self.abstract}


@dataclass(frozen=True)
class RecordError:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


def normalize_title(raw: str) -> str:
    """Canonical matching key for a title.

    NFKC, lowercase, diacritics dropped, a trailing ``(YYYY)`` removed,
    apostrophes deleted, other punctuation and symbols turned into spaces,
    whitespace collapsed.
    """
    text = unicodedata.normalize("NFKC", raw).lower()
    text = "".join(c for c in unicodedata.normalize("NFKD", text) if not unicodedata.combining(c))
    text = unicodedata.normalize("NFKC", text)
    text = _YEAR_SUFFIX.sub("", text)
    out = []
    for ch in text:
        if ch in _APOSTROPHES:
            continue
        cat = unicodedata.category(ch)
        out.append(ch if cat[0] in "LN" else " ")
    return " ".join("".join(out).split())


def title_year(title: str) -> int | None:
    m = _YEAR_SUFFIX.search(title)
    return int(m.group(1)) if m else None


class ItemCatalog:
    """Immutable item set with a normalized-title lookup table.

    Each item has a *base key* (``normalize_title(title)``). When two items
    share a base key the year is appended to disambiguate, giving the item's
    *lookup key*; otherwise the lookup key is the base key.
    """

    def __init__(self, items: Iterable[Item], errors: Iterable[RecordError] = ()):
        self._items: dict[str, Item] = {}
        for item in items:
            if item.item_id in self._items:
                raise DatasetError(f"duplicate item_id {item.item_id!r}")
            self._items[item.item_id] = item
        self.errors = list(errors)
        self._base: dict[str, str] = {}
        self._years: dict[str, int | None] = {}
        for item in self._items.values():
            self._base[item.item_id] = normalize_title(item.title)
            self._years[item.item_id] = item.year if item.year is not None else title_year(item.title)
        counts = Counter(self._base.values())
        self._key: dict[str, str] = {}
        self._by_key: dict[str, list[str]] = {}
        for iid, base in self._base.items():
            year = self._years[iid]
            key = f"{base} {year}" if counts[base] > 1 and year is not None else base
            self._key[iid] = key
            self._by_key.setdefault(key, []).append(iid)
            if key != base:
                self._by_key.setdefault(base, []).append(iid)
        for ids in self._by_key.values():
            ids.sort()

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item_id: object) -> bool:
        return item_id in self._items

    def __iter__(self):
        return iter(self._items.values())

    def __getitem__(self, item_id: str) -> Item:
        return self._items[item_id]

    @property
    def size(self) -> int:
        return len(self._items)

    def ids(self) -> list[str]:
        return list(self._items)

    def base_key(self, item_id: str) -> str:
        return self._base[item_id]

    def lookup_key(self, item_id: str) -> str:
        return self._key[item_id]

    def year(self, item_id: str) -> int | None:
        return self._years[item_id]

    def match_keys(self, item_id: str) -> set[str]:
        """Keys an exact match may hit: base and lookup key."""
        return {self._base[item_id], self._key[item_id]}

    def fuzzy_keys(self, item_id: str) -> set[str]:
        """Keys for fuzzy comparison; adds a year-bearing variant."""
        keys = self.match_keys(item_id)
        year = self._years[item_id]
        if year is not None:
            keys.add(f"{self._base[item_id]} {year}")
        return keys

    def find(self, text: str) -> list[str]:
        """Item ids whose base or lookup key equals ``normalize_title(text)``.

        A trailing ``(YYYY)`` in ``text`` narrows a shared title to that year.
        """
        key = normalize_title(text)
        if not key:
            return []
        year = title_year(text)
        if year is not None and f"{key} {year}" in self._by_key:
            return list(self._by_key[f"{key} {year}"])
        return list(self._by_key.get(key, []))

    def resolve(self, ref: str) -> str | None:
        """Resolve an item id or a title to an item id."""
        if ref in self._items:
            return ref
        hits = self.find(ref)
        return hits[0] if hits else None

    def display_title(self, item_id: str) -> str:
        item = self._items[item_id]
        if item.year is None or title_year(item.title) is not None:
            return item.title
        return f"{item.title} ({item.year})"

    def index_text(self, item_id: str) -> str:
        item = self._items[item_id]
        if item.abstract:
            return f"{item.title}. {item.abstract}"
        return item.title


def load_catalog(source: Source) -> ItemCatalog:
    """Load ``{item_id, title, year, abstract}`` records.

    Duplicate ids abort the load; records with an empty title or bad JSON are
    skipped and kept on ``catalog.errors``.
    """
    items: list[Item] = []
    seen: dict[str, int] = {}
    errors: list[RecordError] = []
    for lineno, text in iter_lines(source):
        try:
            rec = json.loads(text)
            item_id = str(rec["item_id"])
            title = str(rec.get("title") or "").strip()
            year = rec.get("year")
            year = int(year) if year not in (None, "") else None
            abstract = str(rec.get("abstract") or "")
        except (ValueError, KeyError, TypeError) as exc:
            errors.append(RecordError(lineno, f"malformed catalog record: {exc}"))
            continue
        if item_id in seen:
            raise DatasetError(f"duplicate item_id {item_id!r} on lines {seen[item_id]} and {lineno}")
        seen[item_id] = lineno
        if not title:
            errors.append(RecordError(lineno, f"empty title for item {item_id!r}"))
            continue
        items.append(Item(item_id, title, year, abstract))
    for err in errors:
        logger.warning("catalog %s", err)
    return ItemCatalog(items, errors)


@dataclass
class ParseResult:
    dialogues: list[Dialogue]
    errors: list[RecordError]

    def __iter__(self):
        return iter(self.dialogues)

    def __len__(self) -> int:
        return len(self.dialogues)


def _merge_turns(raw: list[tuple[str, str, list[str]]]) -> tuple[list[Turn], list[tuple[int, str]]]:
    """Merge consecutive same-speaker messages; map mentions to merged turns."""
    merged: list[tuple[str, list[str], list[str]]] = []
    for speaker, text, items in raw:
        text = " ".join(text.split())
        if not text and not items:
            continue
        if merged and merged[-1][0] == speaker:
            if text:
                merged[-1][1].append(text)
            merged[-1][2].extend(items)
        else:
            merged.append((speaker, [text] if text else [], list(items)))
    turns: list[Turn] = []
    recs: list[tuple[int, str]] = []
    for speaker, texts, items in merged:
        if not texts:
            continue
        idx = len(turns)
        turns.append(Turn(speaker, " ".join(texts), idx))
        if speaker == RECOMMENDER:
            for item_id in dict.fromkeys(items):
                recs.append((idx, item_id))
    return turns, recs


def _parse_canonical(rec: dict) -> Dialogue:
    turns = []
    for i, t in enumerate(rec["turns"]):
        speaker = t["speaker"]
        if speaker not in SPEAKERS:
            raise DatasetError(f"unknown speaker tag {speaker!r}")
        text = str(t["text"])
        if not text.strip():
            raise DatasetError(f"empty text in turn {i}")
        turns.append(Turn(speaker, text, i))
    recs = []
    for r in rec.get("recommendations", []):
        idx = int(r["turn_index"])
        if not 0 <= idx < len(turns):
            raise DatasetError(f"recommendation turn_index {idx} out of range")
        if turns[idx].speaker != RECOMMENDER:
            raise DatasetError(f"recommendation at turn {idx} is not a recommender turn")
        recs.append((idx, str(r["item_id"])))
    return Dialogue(str(rec["dialogue_id"]), turns, recs)


def _parse_redial(rec: dict) -> Dialogue:
    mentions = {str(k): v for k, v in (rec.get("movieMentions") or {}).items() if v}
    seeker_id = rec["initiatorWorkerId"]
    rec_id = rec["respondentWorkerId"]
    raw = []
    for msg in rec["messages"]:
        sender = msg["senderWorkerId"]
        if sender == seeker_id:
            speaker = SEEKER
        elif sender == rec_id:
            speaker = RECOMMENDER
        else:
            raise DatasetError(f"unknown speaker tag {sender!r}")
        text = msg.get("text") or ""
        items = [m for m in _MENTION.findall(text)]
        text = _MENTION.sub(lambda m: mentions.get(m.group(1), m.group(0)), text)
        raw.append((speaker, text, items))
    turns, recs = _merge_turns(raw)
    return Dialogue(str(rec["conversationId"]), turns, recs, mentions)


def _parse_inspired(rec, lineno: int) -> Dialogue:
    if isinstance(rec, list):
        dialogue_id, utterances = f"inspired-{lineno}", rec
    else:
        dialogue_id = str(rec.get("dialog_id", rec.get("dialogue_id", f"inspired-{lineno}")))
        utterances = rec["dialog"]
    raw = []
    for u in utterances:
        tag = str(u.get("speaker", u.get("role", ""))).strip().lower()
        if tag not in SPEAKERS:
            raise DatasetError(f"unknown speaker tag {tag!r}")
        movies = [str(m) for m in (u.get("movies") or [])]
        raw.append((tag, str(u.get("text") or ""), movies))
    turns, recs = _merge_turns(raw)
    return Dialogue(dialogue_id, turns, recs)


def parse_dialogues(source: Source, format: str = "canonical") -> ParseResult:
    """Parse a line-delimited dialogue file.

    Bad records do not abort the parse; each yields a ``RecordError`` with
    its line number, and record order is preserved for the rest.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown dialogue format {format!r}; expected one of {FORMATS}")
    dialogues: list[Dialogue] = []
    errors: list[RecordError] = []
    for lineno, text in iter_lines(source):
        try:
            rec = json.loads(text)
            if format == "canonical":
                d = _parse_canonical(rec)
            elif format == "redial":
                d = _parse_redial(rec)
            else:
                d = _parse_inspired(rec, lineno)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            msg = str(exc) if isinstance(exc, DatasetError) else f"malformed record: {exc!r}"
            errors.append(RecordError(lineno, msg))
            continue
        dialogues.append(d)
    return ParseResult(dialogues, errors)


def dialogue_to_canonical(d: Dialogue) -> dict:
    return {
        "dialogue_id": d.dialogue_id,
        "turns": [{"speaker": t.speaker, "text": t.text} for t in d.turns],
        "recommendations": [{"turn_index": i, "item_id": item} for i, item in d.recommendations],
    }


@dataclass
class SkipReport:
    counts: Counter = field(default_factory=Counter)
    entries: list[dict] = field(default_factory=list)

    def add(self, reason: str, dialogue_id: str, turn_index: int, item_id: str) -> None:
        self.counts[reason] += 1
        self.entries.append(
            {"reason": reason, "dialogue_id": dialogue_id, "turn_index": turn_index, "item_id": item_id}
        )

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {"total": self.total, "counts": dict(sorted(self.counts.items())), "entries": self.entries}


def extract_instances(
    dialogues: Iterable[Dialogue], catalog: ItemCatalog, split: str = "train"
) -> tuple[list[RecInstance], SkipReport]:
    """One instance per resolvable recommendation entry.

    History is every turn before the recommendation turn. Entries whose item
    does not resolve, whose history is empty, or whose history has no seeker
    turn are skipped and counted.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    instances: list[RecInstance] = []
    skips = SkipReport()
    for d in dialogues:
        for n, (turn_index, ref) in enumerate(d.recommendations):
            item_id = catalog.resolve(ref)
            if item_id is None and ref in d.mention_titles:
                item_id = catalog.resolve(d.mention_titles[ref])
            if item_id is None:
                skips.add("unresolved_item", d.dialogue_id, turn_index, ref)
                continue
            history = tuple(t for t in d.turns if t.turn_index < turn_index)
            if not history:
                skips.add("empty_history", d.dialogue_id, turn_index, ref)
                continue
            if not any(t.speaker == SEEKER for t in history):
                skips.add("no_seeker_turn", d.dialogue_id, turn_index, ref)
                continue
            instances.append(RecInstance(f"{d.dialogue_id}-{n}", history, item_id, split))
    return instances, skips


def render_history(turns: Iterable[Turn]) -> str:
    """``Seeker: ...`` / ``Recommender: ...`` lines."""
    return "\n".join(f"{t.speaker.capitalize()}: {t.text}" for t in turns)
