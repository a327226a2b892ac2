"""Dataset creation: classify lists, sample statuses, generate QA pairs, filter.

Every model call goes through a ``Gateway``; with a mock or replay provider
the whole pipeline runs offline and deterministically.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Protocol

from .corpus import BULLET, Document, ListBlock, Passage, render_passages
from .evalkit import JudgeTagParseError, ask_judge
from .gateway import GENERATION_TEMPERATURE, GatewayError
from .isl import IslAnswer, IslBlock
from .listlogic import (
    ListLogicError,
    ListType,
    LogicalRelation,
    ShortAnswer,
    StatusAssignment,
    UserItemStatus,
    check_assignment,
    sample_status_assignment,
)
from .prompts import fill_template, load_template

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
DEFAULT_SPLIT_RATIOS = (0.55, 0.075, 0.375)


class SynthesisError(RuntimeError):
    pass


class ClassifierParseError(SynthesisError):
    pass


class EmptyGeneration(SynthesisError):
    pass


class ConfigError(SynthesisError):
    pass


# -- records ------------------------------------------------------------------

@dataclass(frozen=True)
class FilterVerdict:
    answerable: bool
    correctness: str = "na"
    faithfulness: str = "na"
    completeness: str = "na"
    raw_judge_text: str = ""

    @property
    def keep(self) -> bool:
        return (self.answerable and self.correctness == "correct"
                and self.faithfulness == "faithful" and self.completeness == "complete")

    def to_json(self) -> dict:
        return {"answerable": self.answerable, "correctness": self.correctness,
                "faithfulness": self.faithfulness, "completeness": self.completeness,
                "keep": self.keep, "raw_judge_text": self.raw_judge_text}

    @classmethod
    def from_json(cls, data: dict) -> FilterVerdict:
        return cls(data["answerable"], data["correctness"], data["faithfulness"],
                   data["completeness"], data.get("raw_judge_text", ""))


@dataclass(frozen=True)
class DatasetRecord:
    record_id: str
    source: str
    passage_refs: tuple[str, ...]
    list_type: ListType
    logical_relation: LogicalRelation | None
    status_assignment: StatusAssignment
    question: str
    response: str
    filter_verdict: FilterVerdict | None = None
    split: str | None = None
    seed: int = 0

    @property
    def gold_passage_id(self) -> str:
        return self.passage_refs[0]

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "source": self.source,
            "passage_refs": list(self.passage_refs),
            "list_type": self.list_type.value,
            "logical_relation": self.logical_relation.value if self.logical_relation else None,
            "status_assignment": self.status_assignment.to_json(),
            "question": self.question,
            "response": self.response,
            "filter_verdict": self.filter_verdict.to_json() if self.filter_verdict else None,
            "split": self.split,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> DatasetRecord:
        relation = data.get("logical_relation")
        verdict = data.get("filter_verdict")
        return cls(
            record_id=data["record_id"],
            source=data["source"],
            passage_refs=tuple(data["passage_refs"]),
            list_type=ListType(data["list_type"]),
            logical_relation=LogicalRelation(relation) if relation else None,
            status_assignment=StatusAssignment.from_json(data["status_assignment"]),
            question=data["question"],
            response=data["response"],
            filter_verdict=FilterVerdict.from_json(verdict) if verdict else None,
            split=data.get("split"),
            seed=int(data.get("seed", 0)),
        )


def write_records(records, path: str | Path, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"_header": header}, sort_keys=True) + "\n")
        for record in records:
            fh.write(json.dumps(record.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[DatasetRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                if "_header" not in row:
                    out.append(DatasetRecord.from_json(row))
    return out


# -- few-shot bank --------------------------------------------------------------

@dataclass(frozen=True)
class Exemplar:
    passage: str
    background: str
    question: str
    response: str
    passage_id: str | None = None


@dataclass(frozen=True)
class FewShotBank:
    exemplars: dict[ListType, tuple[Exemplar, ...]]

    SIZE = 3

    def __post_init__(self) -> None:
        for list_type in ListType:
            got = len(self.exemplars.get(list_type, ()))
            if got != self.SIZE:
                raise ConfigError(f"few-shot bank needs {self.SIZE} {list_type.value} exemplars, has {got}")

    def __getitem__(self, list_type: ListType) -> tuple[Exemplar, ...]:
        return self.exemplars[list_type]

    @property
    def passage_ids(self) -> set[str]:
        return {e.passage_id for group in self.exemplars.values() for e in group if e.passage_id}

    @classmethod
    def from_json(cls, data: dict) -> FewShotBank:
        return cls({ListType.parse(k): tuple(Exemplar(**e) for e in v) for k, v in data.items()})

    @classmethod
    def load(cls, path: str | Path | None = None) -> FewShotBank:
        if path is None:
            text = resources.files("listqa").joinpath("data/fewshot.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_json(json.loads(text))


# -- prompt rendering -----------------------------------------------------------

def plain_passage(passage: Passage) -> str:
    """Passage as the judge sees it: title, then lines with bullets on list items."""
    items = passage.list_item_ids
    lines = [f"Title: {passage.title}"] if passage.title else []
    lines += [f"{BULLET} {l.text}" if l.line_id in items else l.text for l in passage.lines]
    return "\n".join(lines)


def numbered_passage(passage: Passage) -> str:
    text = render_passages([passage], continuous=False).text
    return text.split("\n", 1)[1] if "\n" in text else ""


_STATUS_PHRASES = {
    UserItemStatus.SUPPORTED: "the user's situation supports",
    UserItemStatus.CONTRADICTED: "the user's situation contradicts",
    UserItemStatus.UNKNOWN: "the user's situation says nothing about",
}


def describe_background(passage: Passage, list_type: ListType, assignment: StatusAssignment,
                        relation: LogicalRelation | None) -> str:
    if list_type is ListType.CONDITION:
        rows = [f"- {_STATUS_PHRASES[s]}: {passage.line(lid).text}" for lid, s in assignment.items]
        rows.append(f"Logical relation: {relation.value}")
        return "\n".join(rows)
    if list_type is ListType.STEP:
        (lid, _), = assignment.items
        return f"- the user has already done: {passage.line(lid).text}"
    if list_type is ListType.OPTION:
        (lid, _), = assignment.items
        return f"- the user is using or considering: {passage.line(lid).text}"
    return "No specific user background."


def format_examples(exemplars, *, with_response: bool) -> str:
    chunks = []
    for n, ex in enumerate(exemplars, start=1):
        chunk = [f"Example {n}:", "Passage:", ex.passage, "User background:", ex.background,
                 f"Question: {ex.question}"]
        if with_response:
            chunk.append(f"Response: {ex.response}")
        chunks.append("\n".join(chunk))
    return "\n\n".join(chunks)


def _items_label(block: ListBlock) -> str:
    return ", ".join(f"[{i}]" for i in block.item_line_ids)


# -- step 1: classification ------------------------------------------------------

class ListClassifier(Protocol):
    def classify_list_type(self, passage: Passage, block: ListBlock) -> ListType: ...

    def classify_logical_relation(self, passage: Passage, block: ListBlock) -> LogicalRelation: ...


_TYPE_PATTERNS = [
    (ListType.NON_ACTION_INFO, re.compile(r"non[\s\-_]*action(?:[\s\-_]*info(?:rmation)?)?", re.I)),
    (ListType.CONDITION, re.compile(r"\bconditions?\b", re.I)),
    (ListType.STEP, re.compile(r"\bsteps?\b", re.I)),
    (ListType.OPTION, re.compile(r"\boptions?\b", re.I)),
]
_RELATION_RE = re.compile(r"\b(and|or)\b", re.I)


def parse_list_type_label(text: str) -> ListType:
    """First label mentioned in the model output."""
    hits = [(m.start(), lt) for lt, rx in _TYPE_PATTERNS for m in [rx.search(text)] if m]
    if not hits:
        raise ClassifierParseError(f"no list type label in {text[:80]!r}")
    return min(hits, key=lambda h: h[0])[1]


def parse_relation_label(text: str) -> LogicalRelation:
    match = _RELATION_RE.search(text)
    if not match:
        raise ClassifierParseError(f"no and/or label in {text[:80]!r}")
    return LogicalRelation(match.group(1).lower())


class PromptClassifier:
    """List type and logical relation through gateway classification prompts."""

    def __init__(self, gateway, template_dir: str | Path | None = None):
        self.gateway = gateway
        self.type_template = load_template("classify_list_type", template_dir)
        self.relation_template = load_template("classify_relation", template_dir)

    def _ask(self, prompt: str, tag: str, parse):
        text = self.gateway.ask(prompt, tag=tag, max_output_tokens=16)
        try:
            return parse(text)
        except ClassifierParseError:
            text = self.gateway.ask(prompt + "\nAnswer with the label only.", tag=tag, max_output_tokens=16)
            return parse(text)

    def classify_list_type(self, passage: Passage, block: ListBlock) -> ListType:
        _check_block(passage, block)
        prompt = fill_template(self.type_template, PASSAGE=numbered_passage(passage), ITEMS=_items_label(block))
        return self._ask(prompt, "classify_type", parse_list_type_label)

    def classify_logical_relation(self, passage: Passage, block: ListBlock) -> LogicalRelation:
        _check_block(passage, block)
        if block.list_type is not None and block.list_type is not ListType.CONDITION:
            raise SynthesisError("logical relations are only classified for condition lists")
        prompt = fill_template(self.relation_template, PASSAGE=numbered_passage(passage), ITEMS=_items_label(block))
        return self._ask(prompt, "classify_relation", parse_relation_label)


def _check_block(passage: Passage, block: ListBlock) -> None:
    if block.item_line_ids not in [b.item_line_ids for b in passage.list_blocks]:
        raise SynthesisError(f"block {block.item_line_ids} does not belong to {passage.passage_id}")


# -- step 3: generation -----------------------------------------------------------

ANSWER_HINTS = {
    ShortAnswer.YES: ' The short answer is yes: open the response with "Yes".',
    ShortAnswer.NO: ' The short answer is no: open the response with "No".',
    ShortAnswer.UNCERTAIN: " The short answer is uncertain: explain what it depends on, without opening with yes or no.",
}


@dataclass
class Generator:
    gateway: object
    template_dir: str | Path | None = None
    temperature: float = GENERATION_TEMPERATURE

    def __post_init__(self) -> None:
        self.question_template = load_template("question", self.template_dir)
        self.response_template = load_template("response", self.template_dir)

    def generate_qa(self, passage: Passage, assignment: StatusAssignment, bank: FewShotBank,
                    list_type: ListType, relation: LogicalRelation | None = None) -> tuple[str, str]:
        """Question first, then a response conditioned on that question."""
        background = describe_background(passage, list_type, assignment, relation)
        common = dict(PASSAGE=numbered_passage(passage), LIST_TYPE=list_type.value, BACKGROUND=background)
        question = self.gateway.ask(
            fill_template(self.question_template, EXAMPLES=format_examples(bank[list_type], with_response=False), **common),
            tag="generate_question", temperature=self.temperature, max_output_tokens=256,
        ).strip()
        if not question:
            raise EmptyGeneration("empty question")
        hint = ANSWER_HINTS[assignment.deduced_answer] if assignment.deduced_answer else ""
        response = self.gateway.ask(
            fill_template(self.response_template, EXAMPLES=format_examples(bank[list_type], with_response=True),
                          QUESTION=question, ANSWER_HINT=hint, **common),
            tag="generate_response", temperature=self.temperature, max_output_tokens=384,
        ).strip()
        if not response:
            raise EmptyGeneration("empty response")
        return question, response


# -- step 4: filtering --------------------------------------------------------------

FILTER_TAGS = ("answerable", "correctness", "faithfulness", "completeness")
_TOKENS = {
    "correctness": ("correct", "incorrect"),
    "faithfulness": ("faithful", "unfaithful"),
    "completeness": ("complete", "incomplete"),
}


def _token(dim: str, value: bool | None) -> str:
    return "na" if value is None else _TOKENS[dim][0 if value else 1]


def judge_record(record: DatasetRecord, context_passages, gateway, template: str | None = None) -> FilterVerdict:
    """Model-based filter verdict for one synthesized record."""
    passages = list(context_passages)
    if record.gold_passage_id not in [p.passage_id for p in passages]:
        raise SynthesisError(f"context for {record.record_id} lacks the gold passage")
    template = template or load_template("filter")
    prompt = fill_template(template, CONTEXT="\n\n".join(plain_passage(p) for p in passages),
                           QUESTION=record.question, RESPONSE=record.response)
    tags, raw = ask_judge(gateway, prompt, FILTER_TAGS, tag="filter")
    if not tags["answerable"]:
        return FilterVerdict(False, raw_judge_text=raw)
    return FilterVerdict(True, *(_token(d, tags[d]) for d in ("correctness", "faithfulness", "completeness")),
                         raw_judge_text=raw)


# -- pipeline -------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    split_ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS
    filtering: bool = True
    unseen_sources: tuple[str, ...] = ()
    max_workers: int | None = None
    template_dir: str | None = None

    def __post_init__(self) -> None:
        ratios = tuple(float(r) for r in self.split_ratios)
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
        self.split_ratios = ratios


def derive_seed(run_seed: int, *parts) -> int:
    key = json.dumps([run_seed, *parts]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


@dataclass
class PipelineReport:
    blocks: int = 0
    kept: int = 0
    dropped_by_verdict: int = 0
    dropped_by_error: int = 0
    error_reasons: dict[str, int] = field(default_factory=dict)
    generated_by_type: dict[str, int] = field(default_factory=dict)
    kept_by_type: dict[str, int] = field(default_factory=dict)
    split_by_type: dict[str, dict[str, int]] = field(default_factory=dict)
    deduced_answers: dict[str, int] = field(default_factory=dict)
    verdict_failures: dict[str, int] = field(default_factory=dict)

    @property
    def retention_rate(self) -> float:
        judged = self.kept + self.dropped_by_verdict
        return self.kept / judged if judged else 0.0

    def to_json(self) -> dict:
        return {
            "blocks": self.blocks,
            "kept": self.kept,
            "dropped_by_verdict": self.dropped_by_verdict,
            "dropped_by_error": self.dropped_by_error,
            "retention": f"{self.kept}/{self.kept + self.dropped_by_verdict}",
            "retention_rate": round(self.retention_rate, 6),
            "error_reasons": dict(sorted(self.error_reasons.items())),
            "generated_by_type": dict(sorted(self.generated_by_type.items())),
            "kept_by_type": dict(sorted(self.kept_by_type.items())),
            "split_by_type": {s: dict(sorted(v.items())) for s, v in self.split_by_type.items()},
            "deduced_answers": dict(sorted(self.deduced_answers.items())),
            "verdict_failures": dict(sorted(self.verdict_failures.items())),
        }


@dataclass
class DroppedRecord:
    record_id: str
    reason: str
    record: DatasetRecord | None = None

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "reason": self.reason,
                "record": self.record.to_json() if self.record else None}


@dataclass
class PipelineResult:
    records: list[DatasetRecord]
    dropped: list[DroppedRecord]
    report: PipelineReport

    def split(self, name: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == name]


def assign_splits(records: list[DatasetRecord], ratios, seed: int) -> list[DatasetRecord]:
    """Seeded split assignment; records from unseen sources only go to test."""
    seen_idx = [i for i, r in enumerate(records) if r.source != "unseen"]
    rng = random.Random(derive_seed(seed, "splits"))
    order = seen_idx[:]
    rng.shuffle(order)
    n = len(order)
    n_train = round(n * ratios[0])
    n_dev = min(n - n_train, round(n * ratios[1]))
    split_of = {}
    for pos, i in enumerate(order):
        split_of[i] = "train" if pos < n_train else "dev" if pos < n_train + n_dev else "test"
    return [replace(r, split=split_of.get(i, "test")) for i, r in enumerate(records)]


def run_pipeline(corpus: list[Document], config: PipelineConfig, gateway, *,
                 classifier: ListClassifier | None = None, bank: FewShotBank | None = None) -> PipelineResult:
    """Run classification, status sampling, generation and filtering for every list block."""
    bank = bank or FewShotBank.load()
    classifier = classifier or PromptClassifier(gateway, config.template_dir)
    generator = Generator(gateway, config.template_dir)
    filter_template = load_template("filter", config.template_dir)
    unseen = set(config.unseen_sources)
    excluded = bank.passage_ids

    jobs = []
    for doc in corpus:
        source = "unseen" if doc.source_name in unseen else "seen"
        for passage in doc.passages:
            if passage.passage_id in excluded:
                continue
            for index, block in enumerate(passage.list_blocks):
                jobs.append((source, passage, index, block))

    def work(job):
        source, passage, index, block = job
        record_id = f"{passage.passage_id}-b{index}"
        seed = derive_seed(config.seed, passage.passage_id, index)
        try:
            list_type = classifier.classify_list_type(passage, block)
            relation = None
            if list_type is ListType.CONDITION:
                relation = classifier.classify_logical_relation(passage, replace(block, list_type=list_type))
            assignment = sample_status_assignment(block, list_type, relation, seed,
                                                  passage_id=passage.passage_id, block_index=index)
            check_assignment(assignment, block, list_type, relation)
            question, response = generator.generate_qa(passage, assignment, bank, list_type, relation)
            record = DatasetRecord(record_id, source, (passage.passage_id,), list_type, relation,
                                   assignment, question, response, seed=seed)
        except ClassifierParseError as exc:
            return "error", record_id, "classifier_unparseable", None, str(exc)
        except EmptyGeneration as exc:
            return "error", record_id, "empty_generation", None, str(exc)
        except GatewayError as exc:
            return "error", record_id, type(exc).__name__, None, str(exc)
        except ListLogicError as exc:
            return "error", record_id, "invalid_assignment", None, str(exc)
        if not config.filtering:
            return "kept", record_id, None, record, ""
        try:
            verdict = judge_record(record, [passage], gateway, filter_template)
        except JudgeTagParseError as exc:
            return "error", record_id, "judge_unparseable", record, str(exc)
        except GatewayError as exc:
            return "error", record_id, type(exc).__name__, record, str(exc)
        record = replace(record, filter_verdict=verdict)
        return ("kept" if verdict.keep else "dropped"), record_id, None, record, ""

    workers = config.max_workers or getattr(gateway, "max_concurrent", 1)
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(work, jobs))
    else:
        outcomes = [work(job) for job in jobs]

    report = PipelineReport(blocks=len(jobs))
    kept, dropped = [], []
    errors, generated, failures = Counter(), Counter(), Counter()
    for status, record_id, reason, record, detail in outcomes:
        if record is not None:
            generated[record.list_type.value] += 1
        if status == "kept":
            kept.append(record)
        elif status == "dropped":
            report.dropped_by_verdict += 1
            verdict = record.filter_verdict
            if not verdict.answerable:
                failures["unanswerable"] += 1
            for dim in ("correctness", "faithfulness", "completeness"):
                if verdict.answerable and getattr(verdict, dim) != _TOKENS[dim][0]:
                    failures[dim] += 1
            dropped.append(DroppedRecord(record_id, "verdict", record))
        else:
            log.warning("%s dropped: %s (%s)", record_id, reason, detail)
            report.dropped_by_error += 1
            errors[reason] += 1
            dropped.append(DroppedRecord(record_id, reason, record))

    kept = assign_splits(kept, config.split_ratios, config.seed)
    report.kept = len(kept)
    report.error_reasons = dict(errors)
    report.generated_by_type = dict(generated)
    report.kept_by_type = dict(Counter(r.list_type.value for r in kept))
    report.split_by_type = {
        s: dict(Counter(r.list_type.value for r in kept if r.split == s)) for s in SPLITS
    }
    report.deduced_answers = dict(Counter(
        r.status_assignment.deduced_answer.value for r in kept if r.status_assignment.deduced_answer
    ))
    report.verdict_failures = dict(failures)
    return PipelineResult(kept, dropped, report)


# -- ISL targets --------------------------------------------------------------------

def record_isl(record: DatasetRecord, ordinal: int = 1, line_offset: int = 0) -> IslAnswer:
    """The ISL block a model should emit for ``record`` when its gold passage is shown at ``ordinal``."""
    assignment = record.status_assignment
    if record.list_type is ListType.CONDITION:
        block = IslBlock(ordinal, record.list_type,
                         tuple((lid + line_offset, s) for lid, s in assignment.items),
                         logical_relation=record.logical_relation)
    elif record.list_type in (ListType.STEP, ListType.OPTION):
        block = IslBlock(ordinal, record.list_type, selected_items=tuple(lid + line_offset for lid, _ in assignment.items))
    else:
        block = IslBlock(ordinal, record.list_type)
    return IslAnswer(block, record.response.strip())
