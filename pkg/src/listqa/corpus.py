"""HTML support documents to titled, line-numbered passages with list blocks.

Every heading (h1-h6) opens a new passage. Block-level elements become one
line each; ``<li>`` elements become list-item lines, and the items of one
top-level ``<ul>``/``<ol>`` (nested lists flattened) form one list block.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from html.parser import HTMLParser
from pathlib import Path
from typing import Iterable, Iterator

from .listlogic import ListType, LogicalRelation

log = logging.getLogger(__name__)

BULLET = "•"


class CorpusError(ValueError):
    pass


class EmptyDocument(CorpusError):
    pass


class InvalidPassage(CorpusError):
    pass


@dataclass(frozen=True)
class Line:
    line_id: int
    text: str
    is_list_item: bool = False


@dataclass(frozen=True)
class ListBlock:
    item_line_ids: tuple[int, ...]
    lead_in_line_id: int | None = None
    list_type: ListType | None = None
    logical_relation: LogicalRelation | None = None


@dataclass(frozen=True)
class Passage:
    passage_id: str
    title: str
    lines: tuple[Line, ...] = ()
    list_blocks: tuple[ListBlock, ...] = ()

    @property
    def empty(self) -> bool:
        """Heading-only passage (no body lines)."""
        return not self.lines

    def line(self, line_id: int) -> Line:
        for line in self.lines:
            if line.line_id == line_id:
                return line
        raise KeyError(line_id)

    @property
    def list_item_ids(self) -> set[int]:
        return {lid for block in self.list_blocks for lid in block.item_line_ids}

    @property
    def text(self) -> str:
        return "\n".join([self.title, *(line.text for line in self.lines)]).strip()

    def validate(self) -> Passage:
        ids = [line.line_id for line in self.lines]
        if ids != list(range(1, len(ids) + 1)):
            raise InvalidPassage(f"{self.passage_id}: line ids must be 1..n, got {ids}")
        for line in self.lines:
            if not " ".join(line.text.split()):
                raise InvalidPassage(f"{self.passage_id}: line {line.line_id} is blank")
        seen: set[int] = set()
        for block in self.list_blocks:
            if not block.item_line_ids:
                raise InvalidPassage(f"{self.passage_id}: empty list block")
            for lid in block.item_line_ids:
                if lid in seen or not 1 <= lid <= len(ids) or not self.lines[lid - 1].is_list_item:
                    raise InvalidPassage(f"{self.passage_id}: bad list item reference {lid}")
                seen.add(lid)
            if block.logical_relation is not None and block.list_type is not ListType.CONDITION:
                raise InvalidPassage(f"{self.passage_id}: logical relation on a non-condition list")
        return self

    def to_json(self) -> dict:
        return {
            "passage_id": self.passage_id,
            "title": self.title,
            "lines": [{"id": l.line_id, "text": l.text, "is_list_item": l.is_list_item} for l in self.lines],
            "list_blocks": [{"lead_in": b.lead_in_line_id, "items": list(b.item_line_ids)} for b in self.list_blocks],
        }

    @classmethod
    def from_json(cls, data: dict) -> Passage:
        return cls(
            passage_id=data["passage_id"],
            title=data["title"],
            lines=tuple(Line(int(l["id"]), l["text"], bool(l["is_list_item"])) for l in data["lines"]),
            list_blocks=tuple(
                ListBlock(tuple(int(i) for i in b["items"]), b.get("lead_in"))
                for b in data["list_blocks"]
            ),
        ).validate()


@dataclass(frozen=True)
class Document:
    doc_id: str
    source_name: str = ""
    passages: tuple[Passage, ...] = ()


def number_lines(passage: Passage) -> Passage:
    """Assign line ids 1..n in document order, remapping list-block references."""
    if not passage.lines:
        raise InvalidPassage(f"{passage.passage_id}: nothing to number")
    old_ids = [line.line_id for line in passage.lines]
    if passage.list_blocks and len(set(old_ids)) != len(old_ids):
        raise InvalidPassage(f"{passage.passage_id}: ambiguous line ids in a passage with list blocks")
    mapping = {old: new for new, old in enumerate(old_ids, start=1)}
    return replace(
        passage,
        lines=tuple(replace(line, line_id=i) for i, line in enumerate(passage.lines, start=1)),
        list_blocks=tuple(
            replace(
                block,
                item_line_ids=tuple(mapping[i] for i in block.item_line_ids),
                lead_in_line_id=None if block.lead_in_line_id is None else mapping[block.lead_in_line_id],
            )
            for block in passage.list_blocks
        ),
    )


# -- HTML parsing ---------------------------------------------------------

HEADINGS = {"h1", "h2", "h3", "h4", "h5", "h6"}
LISTS = {"ul", "ol"}
SKIP = {"script", "style", "nav", "head", "noscript", "template", "svg"}
BLOCKS = {
    "p", "div", "section", "article", "main", "header", "footer", "aside", "blockquote",
    "pre", "table", "tr", "dl", "dt", "dd", "figure", "figcaption", "address", "details",
    "summary", "form", "fieldset", "body", "html", "hr", "caption", "thead", "tbody",
}
CELLS = {"td", "th"}
VOID = {"br", "hr", "img", "input", "meta", "link", "wbr", "area", "base", "col", "source"}


def _norm(text: str) -> str:
    return " ".join(text.split())


@dataclass
class _Section:
    title: str
    lines: list[tuple[str, bool]] = field(default_factory=list)
    blocks: list[list[int]] = field(default_factory=list)


class _PassageBuilder(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.sections: list[_Section] = [_Section(title="")]
        self.buffer: list[str] = []
        self.skip_depth = 0
        self.skip_stack: list[str] = []
        self.list_depth = 0
        self.li_depth = 0
        self.heading: str | None = None
        self.block_open = False
        self.row_cells = 0

    # text flushing
    def _flush(self) -> None:
        text = _norm("".join(self.buffer))
        self.buffer = []
        if not text:
            return
        if self.heading is not None:
            # heading text accumulates into the title of the current section
            section = self.sections[-1]
            section.title = _norm(f"{section.title} {text}")
            return
        section = self.sections[-1]
        is_item = self.li_depth > 0
        section.lines.append((text, is_item))
        index = len(section.lines) - 1
        if is_item:
            if not self.block_open:
                section.blocks.append([])
                self.block_open = True
            section.blocks[-1].append(index)

    def handle_starttag(self, tag: str, attrs) -> None:
        if self.skip_depth:
            if tag in SKIP:
                self.skip_depth += 1
            return
        if tag in SKIP:
            self._flush()
            self.skip_depth = 1
            return
        if self.heading is not None and (tag in BLOCKS or tag in LISTS or tag in CELLS or tag == "li"):
            # unclosed heading: block content ends it
            self._flush()
            self.heading = None
        if tag in HEADINGS:
            self._flush()
            self._close_block_if_outside_list()
            self.sections.append(_Section(title=""))
            self.heading = tag
            self.block_open = False
        elif tag in LISTS:
            self._flush()
            if self.list_depth == 0:
                self.block_open = False
            self.list_depth += 1
        elif tag == "li":
            self._flush()
            self.li_depth += 1
        elif tag in CELLS:
            if self.row_cells:
                self.buffer.append(" | ")
            self.row_cells += 1
        elif tag == "tr":
            self._flush()
            self.row_cells = 0
        elif tag in BLOCKS:
            self._flush()
        elif tag in ("br", "wbr"):
            self.buffer.append(" ")

    def handle_startendtag(self, tag: str, attrs) -> None:
        self.handle_starttag(tag, attrs)
        if tag not in VOID:
            self.handle_endtag(tag)

    def handle_endtag(self, tag: str) -> None:
        if self.skip_depth:
            if tag in SKIP:
                self.skip_depth -= 1
            return
        if tag in HEADINGS:
            self._flush()
            self.heading = None
        elif tag in LISTS:
            self._flush()
            if self.list_depth:
                self.list_depth -= 1
            if self.list_depth == 0:
                self.li_depth = 0
                self.block_open = False
        elif tag == "li":
            self._flush()
            if self.li_depth:
                self.li_depth -= 1
        elif tag in BLOCKS or tag == "tr":
            self._flush()

    def _close_block_if_outside_list(self) -> None:
        if self.list_depth == 0:
            self.block_open = False

    def handle_data(self, data: str) -> None:
        if self.skip_depth:
            return
        # a bare <li> outside any list still counts as an item; text after a
        # closed list at depth 0 ends the current block
        if self.li_depth == 0 and self.list_depth == 0 and data.strip():
            self.block_open = False
        self.buffer.append(data)

    def close(self) -> None:
        super().close()
        self._flush()


def _to_passage(section: _Section, passage_id: str) -> Passage:
    lines = tuple(Line(i, text, is_item) for i, (text, is_item) in enumerate(section.lines, start=1))
    blocks = []
    for indexes in section.blocks:
        first = indexes[0]
        lead_in = next((i + 1 for i in range(first - 1, -1, -1) if not section.lines[i][1]), None)
        blocks.append(ListBlock(tuple(i + 1 for i in indexes), lead_in))
    return Passage(passage_id, section.title, lines, tuple(blocks)).validate()


def parse_html(raw_html: str, doc_id: str, source_name: str = "") -> Document:
    """Split an HTML document into passages.

    Text before the first heading forms an untitled passage. Heading-only
    passages are kept (``Passage.empty``) so corpus statistics stay honest.
    Raises EmptyDocument when the document has no text at all.
    """
    builder = _PassageBuilder()
    try:
        builder.feed(raw_html)
        builder.close()
    except Exception as exc:  # html.parser is lenient; guard against odd input anyway
        log.warning("%s: HTML parse stopped early: %s", doc_id, exc)
        builder._flush()
    sections = builder.sections
    if not sections[0].lines:
        sections = sections[1:]
    if not any(s.title or s.lines for s in sections):
        raise EmptyDocument(f"{doc_id}: no textual content")
    passages = tuple(_to_passage(s, f"{doc_id}-p{i}") for i, s in enumerate(sections, start=1))
    return Document(doc_id, source_name, passages)


def select_list_passages(corpus: Iterable[Document]) -> list[Passage]:
    return [p for doc in corpus for p in doc.passages if p.list_blocks]


# -- corpus files ---------------------------------------------------------

def read_manifest(path: str | Path) -> list[tuple[Path, str, str]]:
    """Manifest lines: ``path doc_id source_name`` (tab or whitespace separated, # comments)."""
    path = Path(path)
    entries = []
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.rsplit(None, 2)
        if len(parts) != 3:
            raise CorpusError(f"{path}:{number}: expected 'path doc_id source_name'")
        file_path, doc_id, source = (p.strip() for p in parts)
        file_path = Path(file_path)
        if not file_path.is_absolute():
            file_path = path.parent / file_path
        entries.append((file_path, doc_id, source))
    return entries


def discover_html(root: str | Path, source_name: str = "") -> list[tuple[Path, str, str]]:
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in (".html", ".htm"))
    return [(p, p.relative_to(root).with_suffix("").as_posix(), source_name) for p in files]


def load_corpus(entries: Iterable[tuple[Path, str, str]]) -> tuple[list[Document], dict[str, str]]:
    """Parse every entry; per-document failures are collected, not raised."""
    documents, failures = [], {}
    seen = set()
    for file_path, doc_id, source in entries:
        if doc_id in seen:
            failures[doc_id] = "duplicate doc_id"
            continue
        seen.add(doc_id)
        try:
            raw = Path(file_path).read_text(encoding="utf-8", errors="replace")
            documents.append(parse_html(raw, doc_id, source))
        except (OSError, CorpusError) as exc:
            log.warning("skipping %s: %s", doc_id, exc)
            failures[doc_id] = str(exc)
    return documents, failures


def write_corpus(documents: Iterable[Document], path: str | Path, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"_header": header}, sort_keys=True) + "\n")
        for doc in documents:
            for passage in doc.passages:
                row = {"doc_id": doc.doc_id, "source_name": doc.source_name, **passage.to_json()}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_corpus(path: str | Path) -> list[Document]:
    docs: dict[str, tuple[str, list[Passage]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if "_header" in row:
                continue
            source, passages = docs.setdefault(row["doc_id"], (row["source_name"], []))
            passages.append(Passage.from_json(row))
    return [Document(doc_id, source, tuple(ps)) for doc_id, (source, ps) in docs.items()]


# -- prompt text format ---------------------------------------------------

@dataclass(frozen=True)
class PromptContext:
    """Passages rendered for a prompt, with line ids renumbered across passages."""

    text: str
    passages: tuple[Passage, ...]
    # prompt line id -> (passage ordinal, passage_id, original line id)
    line_map: dict[int, tuple[int, str, int]]

    def offsets(self) -> list[int]:
        out, offset = [], 0
        for passage in self.passages:
            out.append(offset)
            offset += len(passage.lines)
        return out

    def to_prompt_id(self, ordinal: int, line_id: int) -> int:
        return self.offsets()[ordinal - 1] + line_id


def _render_lines(passage: Passage, offset: int) -> list[str]:
    out = []
    item_ids = passage.list_item_ids
    block_of = {lid: n for n, b in enumerate(passage.list_blocks) for lid in b.item_line_ids}
    previous_block = None
    for line in passage.lines:
        block = block_of.get(line.line_id)
        if block is not None and previous_block is not None and block != previous_block:
            out.append("")  # separates adjacent list blocks
        previous_block = block
        prefix = f"{BULLET} " if line.line_id in item_ids else ""
        out.append(f"{prefix}[{line.line_id + offset}] {line.text}")
    return out


def render_passages(passages: Iterable[Passage], *, include_title: bool = True, continuous: bool = True) -> PromptContext:
    """Render passages as ``Passage k`` sections with ``[i]`` line prefixes.

    With ``continuous`` numbering, ids run on across passages ([1]-[5],
    [6]-[10], ...); otherwise each passage restarts at 1.
    """
    passages = tuple(passages)
    chunks, line_map, offset = [], {}, 0
    for ordinal, passage in enumerate(passages, start=1):
        shift = offset if continuous else 0
        chunk = [f"Passage {ordinal}"]
        if include_title and passage.title:
            chunk.append(f"Title: {passage.title}")
        chunk.extend(_render_lines(passage, shift))
        chunks.append("\n".join(chunk))
        for line in passage.lines:
            line_map[line.line_id + shift] = (ordinal, passage.passage_id, line.line_id)
        offset += len(passage.lines)
    return PromptContext("\n".join(chunks), passages, line_map)


_PASSAGE_RE = re.compile(r"^passage\s+(\d+)\s*$", re.IGNORECASE)
_LINE_RE = re.compile(r"^(?:([•\-*])\s*)?\[(\d+)\]\s?(.*)$")


def parse_passages(text: str, passage_ids: list[str] | None = None) -> list[Passage]:
    """Inverse of ``render_passages``; line ids are renumbered per passage from 1."""
    sections: list[tuple[str, list[tuple[str, bool, bool]]]] = []
    for raw in text.splitlines():
        line = raw.strip()
        if _PASSAGE_RE.match(line):
            sections.append(("", []))
            continue
        if not sections:
            if line:
                raise CorpusError(f"text before the first 'Passage' header: {raw!r}")
            continue
        title, rows = sections[-1]
        if not line:
            rows.append(("", False, True))
        elif line.lower().startswith("title:") and not rows:
            sections[-1] = (line[6:].strip(), rows)
        else:
            match = _LINE_RE.match(line)
            if not match:
                raise CorpusError(f"unrecognised passage line: {raw!r}")
            rows.append((match.group(3).strip(), match.group(1) is not None, False))
    passages = []
    for n, (title, rows) in enumerate(sections):
        section = _Section(title=title)
        open_block = False
        for text_, is_item, separator in rows:
            if separator:
                open_block = False
                continue
            section.lines.append((text_, is_item))
            if is_item:
                if not open_block:
                    section.blocks.append([])
                    open_block = True
                section.blocks[-1].append(len(section.lines) - 1)
            else:
                open_block = False
        pid = passage_ids[n] if passage_ids else f"passage-{n + 1}"
        passages.append(_to_passage(section, pid))
    return passages


def iter_passages(documents: Iterable[Document]) -> Iterator[tuple[Document, Passage]]:
    for doc in documents:
        for passage in doc.passages:
            yield doc, passage
