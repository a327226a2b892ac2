from __future__ import annotations

import hashlib
import re
from pathlib import Path

import pytest

from listqa.corpus import parse_html
from listqa.gateway import Gateway, MockProvider

FIXTURES = Path(__file__).parent / "fixtures"
REFERENCE = FIXTURES / "reference"
CORPUS10 = FIXTURES / "corpus10"

POSITIVE_FILTER = (
    "<answerable>answerable</answerable> <correctness>correct</correctness> "
    "<faithfulness>faithful</faithfulness> <completeness>complete</completeness>"
)

REFERENCE_ISL = (
    "Intermediate Steps:\n"
    "    Relevant Passage: 2\n"
    "    List Type: Condition\n"
    "    User-to-Item Status: [7]Unknown, [8]Contradicted\n"
    "    Logical Relation: And\n"
    "\n"
    "Response: No, you are not eligible for a social work bursary because you hold "
    "a higher education social work qualification."
)


def load_doc(name: str, directory: Path = REFERENCE, source: str = ""):
    return parse_html((directory / f"{name}.html").read_text(encoding="utf-8"), name, source)


@pytest.fixture
def reference_prompt_passages():
    """The three passages of the worked prompt example, in prompt order."""
    loan = load_doc("masters_loan").passages[0]
    bursaries = load_doc("social_work_bursaries").passages
    return [loan, bursaries[0], bursaries[1]]


def scripted_responder(request) -> str:
    """A stand-in model that reads the pipeline prompts and answers plausibly.

    Classification keys on the phrase introducing the list, generation keys
    on the yes/no hint in the response prompt, and the filter judge always
    approves.
    """
    text = request.user_text
    tag = request.request_tag
    if tag == "classify_type":
        return "Condition"
    if tag == "classify_relation":
        return "Or" if "any of the following" in text else "And"
    if tag == "generate_question":
        ref = hashlib.sha256(text.encode()).hexdigest()[:8]
        return f"Given my situation, am I eligible? (case {ref})"
    if tag == "generate_response":
        if 'open the response with "Yes"' in text:
            return "Yes, you meet the conditions described in the passage."
        if 'open the response with "No"' in text:
            return "No, you do not meet the conditions described in the passage."
        return "It depends on the conditions in the passage that you have not mentioned."
    if tag in ("filter", "judge"):
        return POSITIVE_FILTER
    raise AssertionError(f"unexpected tag {tag}")


CONDITIONS = [
    "live in England or Wales", "be aged 18 or over", "have a valid passport",
    "work at least 16 hours a week", "care for a child under 5", "hold a UK bank account",
    "have lived in the UK for 3 years", "earn less than the income threshold",
]


def condition_html(i: int) -> str:
    n = 2 + i % 3
    items = [CONDITIONS[(i + j) % len(CONDITIONS)] for j in range(n)]
    lead = ("You qualify if any of the following apply, you:" if i % 2
            else "To qualify for scheme %d you must:" % i)
    lis = "".join(f"<li>{x}</li>" for x in items)
    return f"<h2>Scheme {i} eligibility</h2><p>Support scheme {i} helps households.</p><p>{lead}</p><ul>{lis}</ul>"


def condition_corpus(n: int = 100):
    return [parse_html(condition_html(i), f"scheme{i:03d}", "synthetic") for i in range(n)]


@pytest.fixture
def scripted_gateway():
    return Gateway(MockProvider(default=scripted_responder), max_concurrent=4)


def judge_text(answerable=True, correct="correct", faithful="faithful", complete="complete") -> str:
    if not answerable:
        return "<answerable>unanswerable</answerable> <correctness>na</correctness> " \
               "<faithfulness>na</faithfulness> <completeness>na</completeness>"
    return (f"<answerable>answerable</answerable> <correctness>{correct}</correctness> "
            f"<faithfulness>{faithful}</faithfulness> <completeness>{complete}</completeness>")


def first_number(text: str) -> int:
    return int(re.search(r"\d+", text).group())


RESPONSE_WORDS = ["Yes,", "No,", "you", "can", "apply", "online", "Réponse", "£50", "«", "if", "then",
                  "\n", "[3]", "status:", "Passage", "none", "Response"]


def random_isl_answer(rng):
    """A random valid IslAnswer drawn from ``rng`` (a random.Random)."""
    from listqa.isl import IslAnswer, IslBlock
    from listqa.listlogic import ListType, LogicalRelation, UserItemStatus

    words = [rng.choice(RESPONSE_WORDS) for _ in range(rng.randint(1, 25))]
    response = " ".join(words).strip()
    while "response:" in response.lower():
        response = response.replace(":", "")
    response = response or "Okay."
    if rng.random() < 0.1:
        return IslAnswer(IslBlock(None), response if rng.random() < 0.5 else "")
    list_type = rng.choice(list(ListType))
    ids = lambda: tuple(rng.randint(1, 60) for _ in range(rng.randint(1, 4)))  # noqa: E731
    ordinal = rng.randint(1, 9)
    if list_type is ListType.CONDITION:
        statuses = tuple((i, rng.choice(list(UserItemStatus))) for i in ids())
        block = IslBlock(ordinal, list_type, statuses, logical_relation=rng.choice(list(LogicalRelation)))
    elif list_type in (ListType.STEP, ListType.OPTION):
        block = IslBlock(ordinal, list_type, selected_items=ids())
    else:
        block = IslBlock(ordinal, list_type)
    return IslAnswer(block, response)


FUZZ_FRAGMENTS = [
    "Intermediate Steps:", "Relevant Passage:", "List Type:", "User-to-Item Status:", "Logical Relation:",
    "Selected Items:", "Response:", "none", "Condition", "Step", "Option", "Non-Action Info", "And", "Or",
    "[7]Unknown", "[8]", ", ", "[", "]", "**", "\n", "\n\n", "    ", ":", "2", "99999999999999999999", "-1",
    "²", "\x00", "퟿", "Yes", "No,", "supported", "maybe",
]


def fuzz_string(rng) -> str:
    parts = []
    for _ in range(rng.randint(0, 20)):
        if rng.random() < 0.7:
            parts.append(rng.choice(FUZZ_FRAGMENTS))
        else:
            parts.append("".join(chr(rng.randint(0, 0x2FFF)) for _ in range(rng.randint(1, 6))))
    return "".join(parts)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
