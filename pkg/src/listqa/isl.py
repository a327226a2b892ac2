"""Intermediate Steps for Lists (ISL): render, parse and check the structured block.

Canonical form::

    Intermediate Steps:
        Relevant Passage: 2
        List Type: Condition
        User-to-Item Status: [7]Unknown, [8]Contradicted
        Logical Relation: And

    Response: No, you are not eligible ...

Step and option lists carry ``Selected Items: [3]`` instead of the status and
relation lines; an unanswerable question has ``Relevant Passage: none`` and
no further steps.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .listlogic import (
    ListType,
    LogicalRelation,
    ShortAnswer,
    UserItemStatus,
    deduce_answer,
)

HEADER = "Intermediate Steps:"
INDENT = "    "


class IslError(ValueError):
    pass


class InvalidBlock(IslError):
    pass


class ParseError(IslError):
    def __init__(self, message: str, line_no: int | None = None, line: str | None = None):
        self.line_no = line_no
        self.line = line
        where = f" (line {line_no}: {line!r})" if line_no is not None else ""
        super().__init__(message + where)


class MissingResponse(ParseError):
    pass


@dataclass(frozen=True)
class IslBlock:
    relevant_passage: int | None
    list_type: ListType | None = None
    user_item_statuses: tuple[tuple[int, UserItemStatus], ...] = ()
    selected_items: tuple[int, ...] = ()
    logical_relation: LogicalRelation | None = None

    def validate(self) -> IslBlock:
        if self.relevant_passage is None:
            if self.list_type or self.user_item_statuses or self.selected_items or self.logical_relation:
                raise InvalidBlock("an unanswerable block carries no further steps")
            return self
        if self.relevant_passage < 1:
            raise InvalidBlock(f"passage ordinal must be >= 1, got {self.relevant_passage}")
        if self.list_type is None:
            raise InvalidBlock("list type is required when a passage is selected")
        is_condition = self.list_type is ListType.CONDITION
        if is_condition != (self.logical_relation is not None):
            raise InvalidBlock("logical relation is present iff the list is a condition list")
        if is_condition != bool(self.user_item_statuses):
            raise InvalidBlock("user-to-item statuses are used iff the list is a condition list")
        selects = self.list_type in (ListType.STEP, ListType.OPTION)
        if selects != bool(self.selected_items):
            raise InvalidBlock("selected items are used iff the list is a step or option list")
        return self


@dataclass(frozen=True)
class IslAnswer:
    isl: IslBlock
    response: str

    def validate(self) -> IslAnswer:
        self.isl.validate()
        if self.response != self.response.strip():
            raise InvalidBlock("response must not have surrounding whitespace")
        if self.isl.relevant_passage is not None and not self.response:
            raise InvalidBlock("response is required when a passage is selected")
        if "response:" in self.response.lower():
            raise InvalidBlock("response text must not contain a 'Response:' marker")
        return self


def render_isl(answer: IslAnswer) -> str:
    answer.validate()
    block = answer.isl
    lines = [HEADER]
    if block.relevant_passage is None:
        lines.append(f"{INDENT}Relevant Passage: none")
    else:
        lines.append(f"{INDENT}Relevant Passage: {block.relevant_passage}")
        lines.append(f"{INDENT}List Type: {block.list_type.label}")
        if block.list_type is ListType.CONDITION:
            statuses = ", ".join(f"[{lid}]{status.label}" for lid, status in block.user_item_statuses)
            lines.append(f"{INDENT}User-to-Item Status: {statuses}")
            lines.append(f"{INDENT}Logical Relation: {block.logical_relation.label}")
        elif block.selected_items:
            lines.append(f"{INDENT}Selected Items: " + ", ".join(f"[{lid}]" for lid in block.selected_items))
    lines.append("")
    lines.append(f"Response: {answer.response}".rstrip())
    return "\n".join(lines)


def _label_key(label: str) -> str:
    return re.sub(r"[^a-z]", "", label.lower())


_FIELDS = {
    "intermediatesteps": "header",
    "relevantpassage": "passage",
    "listtype": "list_type",
    "usertoitemstatus": "statuses",
    "usertoitemstatuses": "statuses",
    "logicalrelation": "relation",
    "selecteditems": "selected",
    "selecteditem": "selected",
    "response": "response",
}
_LABEL_RE = re.compile(r"^[\s*_#>-]*([A-Za-z][A-Za-z \t\-]*?)[\s*_]*:[\s*_]*(.*)$", re.DOTALL)
_STATUS_RE = re.compile(r"\[\s*(\d+)\s*\]\s*([A-Za-z]+)")
_ITEM_RE = re.compile(r"\[\s*(\d+)\s*\]")


def _parse_statuses(value: str, line_no: int, raw: str) -> tuple[tuple[int, UserItemStatus], ...]:
    out = []
    for chunk in filter(None, (c.strip() for c in value.split(","))):
        match = _STATUS_RE.fullmatch(chunk)
        if not match:
            raise ParseError("malformed user-to-item status", line_no, raw)
        try:
            out.append((int(match.group(1)), UserItemStatus.parse(match.group(2))))
        except ValueError as exc:
            raise ParseError(str(exc), line_no, raw) from None
    return tuple(out)


def _parse_items(value: str, line_no: int, raw: str) -> tuple[int, ...]:
    chunks = [c.strip() for c in value.split(",") if c.strip()]
    items = []
    for chunk in chunks:
        match = _ITEM_RE.fullmatch(chunk)
        if not match:
            raise ParseError("malformed selected item", line_no, raw)
        items.append(int(match.group(1)))
    return tuple(items)


def parse_isl(text: str) -> IslAnswer:
    """Parse model output into an IslAnswer.

    Labels match case-insensitively with loose whitespace (and stray markdown
    emphasis); everything after the first ``Response:`` label is the response.
    Raises ParseError (or MissingResponse) and nothing else.
    """
    if not isinstance(text, str):
        raise ParseError(f"expected a string, got {type(text).__name__}")
    fields: dict[str, object] = {}
    lines = text.splitlines()
    response = None
    for index, raw in enumerate(lines):
        line_no = index + 1
        if not raw.strip():
            continue
        match = _LABEL_RE.match(raw)
        name = _FIELDS.get(_label_key(match.group(1))) if match else None
        if name is None:
            raise ParseError("unrecognised line", line_no, raw)
        value = match.group(2).strip()
        if name == "response":
            rest = "\n".join([match.group(2), *lines[index + 1:]])
            response = rest.strip()
            break
        if name == "header":
            if value or fields:
                raise ParseError("misplaced 'Intermediate Steps' header", line_no, raw)
            fields["header"] = True
            continue
        if name in fields:
            raise ParseError(f"duplicate field {name}", line_no, raw)
        try:
            if name == "passage":
                if value.lower() in ("none", "n/a", "na", "null", "unanswerable"):
                    fields[name] = None
                elif value.isdigit():
                    fields[name] = int(value)
                else:
                    raise ParseError("relevant passage must be a number or 'none'", line_no, raw)
            elif name == "list_type":
                fields[name] = ListType.parse(value)
            elif name == "relation":
                fields[name] = LogicalRelation.parse(value)
            elif name == "statuses":
                fields[name] = _parse_statuses(value, line_no, raw)
            elif name == "selected":
                fields[name] = _parse_items(value, line_no, raw)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), line_no, raw) from None
    if response is None:
        raise MissingResponse("no 'Response:' field found")
    if "passage" not in fields:
        raise ParseError("missing 'Relevant Passage' field")
    block = IslBlock(
        relevant_passage=fields["passage"],
        list_type=fields.get("list_type"),
        user_item_statuses=fields.get("statuses", ()),
        selected_items=fields.get("selected", ()),
        logical_relation=fields.get("relation"),
    )
    if block.relevant_passage is not None and block.list_type is None:
        raise ParseError("missing 'List Type' field")
    try:
        return IslAnswer(block, response).validate()
    except InvalidBlock as exc:
        raise ParseError(str(exc)) from None


# -- consistency -----------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    code: str
    message: str
    severity: str = "error"


@dataclass
class ConsistencyReport:
    findings: list[Finding] = field(default_factory=list)
    deduced_answer: ShortAnswer | None = None
    response_polarity: ShortAnswer | None = None

    @property
    def consistent(self) -> bool:
        return not any(f.severity == "error" for f in self.findings)

    def codes(self) -> list[str]:
        return [f.code for f in self.findings]


_POLARITY_RE = re.compile(r"^\W*(yes|no)\b", re.IGNORECASE)


def response_polarity(response: str) -> ShortAnswer | None:
    match = _POLARITY_RE.match(response)
    if not match:
        return None
    return ShortAnswer.YES if match.group(1).lower() == "yes" else ShortAnswer.NO


def check_consistency(answer: IslAnswer, prompt_passages, *, continuous: bool = True) -> ConsistencyReport:
    """Check an ISL answer against the passages that were shown in the prompt.

    Line ids are read in prompt scope (numbering continued across passages)
    unless ``continuous`` is false. A referenced line outside the selected
    passage is an error; a line inside it that is not a list item is only a
    warning. For condition lists whose response opens with Yes/No, the
    deduced answer must match that polarity.
    """
    report = ConsistencyReport()
    block = answer.isl
    passages = list(prompt_passages)
    if block.relevant_passage is None:
        return report
    ordinal = block.relevant_passage
    if not 1 <= ordinal <= len(passages):
        report.findings.append(Finding("OrdinalOutOfRange", f"passage {ordinal} of {len(passages)}"))
        return report
    offset = sum(len(p.lines) for p in passages[: ordinal - 1]) if continuous else 0
    passage = passages[ordinal - 1]
    items = passage.list_item_ids
    referenced = [lid for lid, _ in block.user_item_statuses] + list(block.selected_items)
    for prompt_id in referenced:
        local = prompt_id - offset
        if not 1 <= local <= len(passage.lines):
            report.findings.append(
                Finding("LineOutOfPassage", f"line [{prompt_id}] is not in passage {ordinal}")
            )
        elif local not in items:
            report.findings.append(
                Finding("NotListItem", f"line [{prompt_id}] is not a list item", severity="warning")
            )
    if block.list_type is ListType.CONDITION:
        report.deduced_answer = deduce_answer(block.logical_relation, [s for _, s in block.user_item_statuses])
        report.response_polarity = response_polarity(answer.response)
        if report.response_polarity is not None and report.response_polarity is not report.deduced_answer:
            report.findings.append(
                Finding(
                    "PolarityMismatch",
                    f"deduced {report.deduced_answer.value} but response opens with {report.response_polarity.value}",
                )
            )
    return report
