"""Fact and question ingestion: tokenization, normalization, stopwords, loaders.

File formats:
  facts      plain UTF-8 text, one fact per line, or JSON-lines {"id", "text"}
  questions  JSON-lines {"id", "question": {"stem", "choices": [{"label", "text"}]},
             "answerKey", "fact1", "fact2"} (last three optional)
  stopwords  UTF-8, one token per line
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DuplicateIdError, EmptyFactError, ParseError

SOURCES = ("openbook", "qasc", "arc", "other")

# A token is either a numeral group joined by ':' or '.' (so "2:00" and "3.5"
# survive) or a maximal run of word characters. Everything else is a boundary.
_TOKEN_RE = re.compile(r"\d+(?:[:.]\d+)+|\w+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; keep numeral ':' and '.'.

    Empty input yields an empty list. Deterministic; punctuation tokens are
    dropped entirely.
    """
    return _TOKEN_RE.findall(text.lower())


def remove_stopwords(tokens: Sequence[str], stoplist: Iterable[str]) -> list[str]:
    """Drop stoplist tokens, preserving the relative order of survivors."""
    stop = stoplist if isinstance(stoplist, (set, frozenset)) else set(stoplist)
    return [t for t in tokens if t not in stop]


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """Read one token per line; `None` loads the packaged default list.

    The packaged list is the union of the NLTK-style and "stop-words"-style
    English lists, reduced to the tokens our tokenizer can produce, minus
    "am" so meridiem tokens in time expressions ("2:00 AM") survive query
    construction.
    """
    if path is None:
        text = resources.files("hopqa.data").joinpath("stopwords.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return frozenset(line.strip().lower() for line in text.splitlines() if line.strip())


@dataclass(frozen=True)
class Fact:
    """One knowledge sentence."""

    id: str
    text: str
    tokens: tuple[str, ...]
    source: str = "other"


@dataclass(frozen=True)
class Question:
    """A multiple-choice question, optionally with gold annotations.

    ``gold_facts`` holds the annotated fact *texts* (fact1, fact2) as they
    appear in the question file; ids are resolved against a corpus when
    recall is evaluated.
    """

    id: str
    stem: str
    options: tuple[tuple[str, str], ...]
    answer_key: str | None = None
    gold_facts: tuple[str, ...] = ()

    def __post_init__(self):
        labels = [lab for lab, _ in self.options]
        if not 2 <= len(labels) <= 26:
            raise ValueError(f"question {self.id}: need 2..26 options, got {len(labels)}")
        if len(set(labels)) != len(labels):
            raise ValueError(f"question {self.id}: duplicate option labels")
        if self.answer_key is not None and self.answer_key not in labels:
            raise ValueError(f"question {self.id}: answer key {self.answer_key!r} not an option")

    def option_text(self, label: str) -> str:
        for lab, text in self.options:
            if lab == label:
                return text
        raise KeyError(label)


# Characters that never change sentence structure get dropped from ARC facts.
# Kept: sentence-final period, commas, hyphens inside words, numeral colons.
_ARC_KEEP_ALWAYS = ","


def _normalize_arc_text(text: str) -> str:
    ascii_text = text.encode("ascii", "ignore").decode("ascii")
    stripped = ascii_text.rstrip()
    last = len(stripped) - 1
    out = []
    for i, ch in enumerate(ascii_text):
        if ch.isalnum() or ch.isspace() or ch in _ARC_KEEP_ALWAYS:
            out.append(ch)
        elif ch == "." and i == last:
            out.append(ch)
        elif ch == "-" and 0 < i < len(ascii_text) - 1 and ascii_text[i - 1].isalnum() and ascii_text[i + 1].isalnum():
            out.append(ch)
        elif ch == ":" and 0 < i < len(ascii_text) - 1 and ascii_text[i - 1].isdigit() and ascii_text[i + 1].isdigit():
            out.append(ch)
        else:
            out.append(" ")
    return " ".join("".join(out).split())


def fact_id_for_text(text: str) -> str:
    """Deterministic content-hash id (sha1 prefix) of a normalized fact text."""
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:16]


def normalize_fact(text: str, source: str = "other", *, id_mode: str = "hash",
                   line_no: int | None = None) -> Fact:
    """Normalize one fact per its source and assign a deterministic id.

    ARC facts get non-ASCII characters and structurally inert punctuation
    stripped; other sources are kept as is apart from surrounding whitespace.
    Raises EmptyFactError when nothing survives.
    """
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}; expected one of {SOURCES}")
    cleaned = _normalize_arc_text(text) if source == "arc" else text.strip()
    if not cleaned:
        raise EmptyFactError(f"fact empty after normalization (source={source})")
    if id_mode == "hash":
        fid = fact_id_for_text(cleaned)
    elif id_mode == "line":
        if line_no is None:
            raise ValueError("id_mode='line' requires line_no")
        fid = f"{source}-{line_no:07d}"
    else:
        raise ValueError(f"unknown id_mode {id_mode!r}")
    return Fact(id=fid, text=cleaned, tokens=tuple(tokenize(cleaned)), source=source)


def _looks_like_jsonl(path: Path) -> bool:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                return line.lstrip().startswith("{")
    return False


def load_corpus(path: str | Path, source: str = "other", *, id_mode: str = "hash") -> list[Fact]:
    """Load facts from a text or JSON-lines file.

    In hash id mode, identical sentences deduplicate to one fact; an explicit
    id reused for *different* text raises DuplicateIdError. Malformed lines
    raise ParseError with their line number.
    """
    path = Path(path)
    jsonl = _looks_like_jsonl(path)
    facts: dict[str, Fact] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            explicit_id = None
            if jsonl:
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(path, line_no, f"invalid JSON: {exc}") from exc
                if not isinstance(row, dict) or "text" not in row:
                    raise ParseError(path, line_no, 'expected object with a "text" field')
                text = str(row["text"])
                explicit_id = str(row["id"]) if "id" in row else None
            else:
                text = line.rstrip("\n")
            try:
                fact = normalize_fact(text, source, id_mode=id_mode, line_no=line_no)
            except EmptyFactError as exc:
                raise ParseError(path, line_no, str(exc)) from exc
            if explicit_id is not None:
                fact = Fact(id=explicit_id, text=fact.text, tokens=fact.tokens, source=source)
            if fact.id in facts:
                if facts[fact.id].text == fact.text:
                    continue
                raise DuplicateIdError(f"{path}:{line_no}: id {fact.id!r} reused for different text")
            facts[fact.id] = fact
    return list(facts.values())


def load_questions(path: str | Path) -> list[Question]:
    """Load questions from the JSON-lines format described in the module docs."""
    path = Path(path)
    questions: list[Question] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid JSON: {exc}") from exc
            try:
                body = row["question"]
                stem = str(body["stem"])
                options = tuple((str(c["label"]), str(c["text"])) for c in body["choices"])
            except (KeyError, TypeError) as exc:
                raise ParseError(path, line_no, f"missing question structure: {exc}") from exc
            gold = tuple(str(row[k]).strip() for k in ("fact1", "fact2")
                         if row.get(k) not in (None, ""))
            qid = str(row.get("id", f"q{line_no}"))
            if qid in seen_ids:
                raise DuplicateIdError(f"{path}:{line_no}: duplicate question id {qid!r}")
            seen_ids.add(qid)
            try:
                question = Question(id=qid, stem=stem, options=options,
                                    answer_key=row.get("answerKey"), gold_facts=gold)
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from exc
            questions.append(question)
    return questions


def write_corpus_jsonl(facts: Iterable[Fact], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fact in facts:
            fh.write(json.dumps({"id": fact.id, "text": fact.text}, sort_keys=True) + "\n")


def write_questions_jsonl(questions: Iterable[Question], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in questions:
            row: dict = {
                "id": q.id,
                "question": {"stem": q.stem,
                             "choices": [{"label": lab, "text": text} for lab, text in q.options]},
            }
            if q.answer_key is not None:
                row["answerKey"] = q.answer_key
            for key, text in zip(("fact1", "fact2"), q.gold_facts):
                row[key] = text
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def fact_lookup(facts: Iterable[Fact]) -> dict[str, Fact]:
    """Index facts by id, rejecting conflicting duplicates."""
    table: dict[str, Fact] = {}
    for fact in facts:
        if fact.id in table and table[fact.id].text != fact.text:
            raise DuplicateIdError(f"id {fact.id!r} reused for different text")
        table[fact.id] = fact
    return table


def resolve_gold_ids(question: Question, facts: Iterable[Fact] | dict[str, Fact]) -> list[str | None]:
    """Map a question's gold fact texts to corpus fact ids (None when absent)."""
    table = facts if isinstance(facts, dict) else fact_lookup(facts)
    by_text = {fact.text.strip(): fact.id for fact in table.values()}
    return [by_text.get(text.strip()) for text in question.gold_facts]
