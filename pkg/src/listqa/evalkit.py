"""Response scoring: ROUGE-L, LLM-judge verdicts, Cohen's kappa, MTLD and reports."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from statistics import mean
from typing import Iterable

from .prompts import fill_template, load_template

METRICS = ("rouge_l", "correctness", "faithfulness", "completeness")
COLUMN_NAMES = {
    "rouge_l": "ROUGE-L",
    "correctness": "Correctness",
    "faithfulness": "Faithfulness",
    "completeness": "Completeness",
}
MTLD_THRESHOLD = 0.72


class EvalError(ValueError):
    pass


class LengthMismatch(EvalError):
    pass


class EmptyText(EvalError):
    pass


class EmptyReport(EvalError):
    pass


class UnknownRecordId(EvalError):
    pass


class JudgeTagParseError(EvalError):
    pass


_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def lcs_length(a: list[str], b: list[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            current.append(previous[j - 1] + 1 if x == y else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1 (beta = 1) over lowercase alphanumeric tokens."""
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision, recall = lcs / len(cand), lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def cohens_kappa(labels_a, labels_b) -> float:
    labels_a, labels_b = [bool(x) for x in labels_a], [bool(x) for x in labels_b]
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(f"{len(labels_a)} vs {len(labels_b)} labels")
    if not labels_a:
        raise LengthMismatch("label lists must be non-empty")
    n = len(labels_a)
    observed = sum(a == b for a, b in zip(labels_a, labels_b)) / n
    pa, pb = sum(labels_a) / n, sum(labels_b) / n
    expected = pa * pb + (1 - pa) * (1 - pb)
    if expected == 1.0:
        # both raters used a single, identical category
        return 1.0
    return (observed - expected) / (1 - expected)


def _mtld_pass(tokens: list[str], threshold: float) -> float:
    factors = 0.0
    types: set[str] = set()
    count = 0
    ttr = 1.0
    for token in tokens:
        count += 1
        types.add(token)
        ttr = len(types) / count
        if ttr < threshold:
            factors += 1
            types, count, ttr = set(), 0, 1.0
    if count:
        factors += (1 - ttr) / (1 - threshold)
    if factors == 0:
        # no diversity lost anywhere: the whole text is one unfinished factor
        return float(len(tokens))
    return len(tokens) / factors


def mtld(text: str, threshold: float = MTLD_THRESHOLD) -> float:
    """Measure of Textual Lexical Diversity, averaged over forward and reversed passes."""
    tokens = tokenize(text)
    if not tokens:
        raise EmptyText("MTLD needs at least one token")
    return (_mtld_pass(tokens, threshold) + _mtld_pass(tokens[::-1], threshold)) / 2


# -- judge --------------------------------------------------------------------

JUDGE_VOCAB = {
    "answerable": {"answerable": True, "unanswerable": False},
    "correctness": {"correct": True, "incorrect": False, "na": None},
    "faithfulness": {"faithful": True, "unfaithful": False, "na": None},
    "completeness": {"complete": True, "incomplete": False, "na": None},
}


def parse_tags(text: str, names: Iterable[str]) -> dict[str, bool | None]:
    """Read ``<name>value</name>`` assessments; the last occurrence of each tag wins."""
    out = {}
    for name in names:
        found = re.findall(rf"<{name}>\s*(.*?)\s*</{name}>", text, re.IGNORECASE | re.DOTALL)
        if not found:
            raise JudgeTagParseError(f"missing <{name}> tag")
        value = found[-1].strip().strip("\"'.").lower().replace("n/a", "na")
        vocab = JUDGE_VOCAB[name]
        if value not in vocab:
            raise JudgeTagParseError(f"<{name}> has unexpected value {found[-1]!r}")
        out[name] = vocab[value]
    return out


def ask_judge(gateway, prompt: str, names: Iterable[str], *, tag: str) -> tuple[dict, str]:
    """Send a judge prompt; reprompt once if the tags do not parse."""
    names = list(names)
    text = gateway.ask(prompt, tag=tag, max_output_tokens=1024)
    try:
        return parse_tags(text, names), text
    except JudgeTagParseError as first:
        retry = prompt + (
            "\n\nYour previous answer could not be read ("
            + str(first)
            + "). Answer again and include every assessment tag exactly as instructed."
        )
        text = gateway.ask(retry, tag=tag, max_output_tokens=1024)
        return parse_tags(text, names), text


@dataclass(frozen=True)
class EvalVerdict:
    record_id: str
    rouge_l: float
    correctness: bool | None = None
    faithfulness: bool | None = None
    completeness: bool | None = None
    raw_judge_text: str = field(default="", compare=False)

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "rouge_l": self.rouge_l,
            "correctness": self.correctness,
            "faithfulness": self.faithfulness,
            "completeness": self.completeness,
        }

    @classmethod
    def from_json(cls, data: dict) -> EvalVerdict:
        return cls(data["record_id"], float(data["rouge_l"]), data.get("correctness"),
                   data.get("faithfulness"), data.get("completeness"))


def judge_response(gateway, context: str, question: str, response: str, *,
                   template: str | None = None) -> tuple[dict[str, bool | None], str]:
    """Judge correctness/faithfulness/completeness; None means NA."""
    template = template or load_template("evaluate")
    prompt = fill_template(template, CONTEXT=context, QUESTION=question, RESPONSE=response)
    return ask_judge(gateway, prompt, ("correctness", "faithfulness", "completeness"), tag="judge")


# -- reports --------------------------------------------------------------------

@dataclass
class MetricSummary:
    means: dict[str, float | None]
    counts: dict[str, int]
    na: dict[str, int]
    n: int

    @property
    def average(self) -> float | None:
        values = [self.means[m] for m in METRICS]
        if any(v is None for v in values):
            return None
        return sum(values) / len(values)

    def to_json(self) -> dict:
        return {"n": self.n, "means": self.means, "counts": self.counts, "na": self.na, "average": self.average}


def _metric_value(verdict: EvalVerdict, metric: str) -> float | None:
    value = getattr(verdict, metric)
    if value is None:
        return None
    return 100.0 * float(value)


def summarize(verdicts: list[EvalVerdict]) -> MetricSummary:
    means, counts, na = {}, {}, {}
    for metric in METRICS:
        values = [v for v in (_metric_value(x, metric) for x in verdicts) if v is not None]
        means[metric] = mean(values) if values else None
        counts[metric] = len(values)
        na[metric] = len(verdicts) - len(values)
    return MetricSummary(means, counts, na, len(verdicts))


@dataclass
class Report:
    overall: MetricSummary
    by_list_type: dict[str, MetricSummary]
    by_domain: dict[str, MetricSummary]

    @property
    def average(self) -> float | None:
        return self.overall.average

    def to_json(self) -> dict:
        return {
            "overall": self.overall.to_json(),
            "average": self.average,
            "by_list_type": {k: v.to_json() for k, v in self.by_list_type.items()},
            "by_domain": {k: v.to_json() for k, v in self.by_domain.items()},
        }

    def table(self) -> str:
        return format_table(self)


def aggregate(verdicts: list[EvalVerdict], records) -> Report:
    """Percent means over non-NA judgments, overall and per list type / domain."""
    if not verdicts:
        raise EmptyReport("no verdicts to aggregate")
    by_id = {r.record_id: r for r in records}
    groups_type: dict[str, list[EvalVerdict]] = {}
    groups_domain: dict[str, list[EvalVerdict]] = {}
    for verdict in verdicts:
        record = by_id.get(verdict.record_id)
        if record is None:
            raise UnknownRecordId(verdict.record_id)
        groups_type.setdefault(record.list_type.value, []).append(verdict)
        groups_domain.setdefault(record.source, []).append(verdict)
    return Report(
        overall=summarize(verdicts),
        by_list_type={k: summarize(v) for k, v in sorted(groups_type.items())},
        by_domain={k: summarize(v) for k, v in sorted(groups_domain.items())},
    )


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.1f}"


def format_table(report: Report) -> str:
    headers = ["Group", "N", *(COLUMN_NAMES[m] for m in METRICS), "Average"]
    rows = [("overall", report.overall)]
    rows += [(f"type:{k}", v) for k, v in report.by_list_type.items()]
    rows += [(f"domain:{k}", v) for k, v in report.by_domain.items()]
    body = [[name, str(s.n), *(_fmt(s.means[m]) for m in METRICS), _fmt(s.average)] for name, s in rows]
    widths = [max(len(r[i]) for r in [headers, *body]) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [headers, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_verdicts(verdicts: Iterable[EvalVerdict], path, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"_header": header}, sort_keys=True) + "\n")
        for verdict in verdicts:
            fh.write(json.dumps(verdict.to_json(), sort_keys=True) + "\n")


def read_verdicts(path) -> list[EvalVerdict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                if "_header" not in row:
                    out.append(EvalVerdict.from_json(row))
    return out
