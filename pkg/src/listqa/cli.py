"""Command-line entry point: ingest, synthesize, index, answer, evaluate, report.

Each stage reads and writes files under the output directory, so any stage
can be re-run on its own. Every output file starts with a header object
carrying the tool version, a config digest and the seeds.
"""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .corpus import (
    Passage,
    discover_html,
    load_corpus,
    read_corpus,
    read_manifest,
    render_passages,
    select_list_passages,
    write_corpus,
)
from .evalkit import (
    EvalVerdict,
    JudgeTagParseError,
    aggregate,
    format_table,
    judge_response,
    read_verdicts,
    rouge_l,
    write_verdicts,
)
from .gateway import Gateway, GatewayError, HttpProvider, MockProvider, ProviderConfig, RecordReplayProvider, digest_of
from .isl import IslAnswer, IslBlock, ParseError, check_consistency, parse_isl, render_isl
from .listlogic import ListType
from .prompts import fill_template, load_template
from .retrieval import DEFAULT_TOP_K, PassageIndex, build_index, retrieve, route, UNANSWERABLE
from .synthesis import (
    SPLITS,
    ConfigError,
    FewShotBank,
    PipelineConfig,
    plain_passage,
    read_records,
    record_isl,
    run_pipeline,
    write_records,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("listqa")

UNANSWERABLE_RESPONSE = "Sorry, I could not find information about this in the documents."


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    base_dir: Path = field(default_factory=Path.cwd)
    corpus_paths: list[str] = field(default_factory=list)
    manifest: str | None = None
    source_name: str = ""
    provider: dict = field(default_factory=dict)
    seed: int = 0
    filtering: bool = True
    unseen_sources: list[str] = field(default_factory=list)
    split_ratios: tuple[float, float, float] = (0.55, 0.075, 0.375)
    fewshot_bank: str | None = None
    backend: str = "lexical"
    top_k: int = DEFAULT_TOP_K
    list_only: bool = False
    score_floor: float | None = None
    mode: str = "isl"
    shots: int = 0
    include_titles: bool = True
    template_dir: str | None = None
    out_dir: str = "out"
    replay: str | None = None
    record: str | None = None

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.mode not in ("isl", "direct"):
            raise ConfigError(f"mode must be isl or direct, got {self.mode!r}")
        if self.backend not in ("lexical", "embedding"):
            raise ConfigError(f"backend must be lexical or embedding, got {self.backend!r}")
        if self.shots < 0:
            raise ConfigError("shots must be >= 0")

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.path(self.out_dir)

    def digest(self) -> str:
        # run-location fields are left out so relocated runs stay comparable
        payload = {
            "corpus_paths": self.corpus_paths, "manifest": self.manifest, "source_name": self.source_name,
            "provider": {k: v for k, v in self.provider.items() if k != "api_key"},
            "seed": self.seed, "filtering": self.filtering, "unseen_sources": self.unseen_sources,
            "split_ratios": list(self.split_ratios), "fewshot_bank": self.fewshot_bank,
            "backend": self.backend, "top_k": self.top_k, "list_only": self.list_only,
            "score_floor": self.score_floor, "mode": self.mode, "shots": self.shots,
            "include_titles": self.include_titles, "template_dir": self.template_dir,
        }
        return digest_of(payload)[:16]

    def header(self, stage: str, **extra) -> dict:
        return {"tool": "listqa", "version": __version__, "stage": stage,
                "config_digest": self.digest(), "seeds": {"run": self.seed}, **extra}


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    data: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent.resolve()
    corpus = data.get("corpus", {})
    pipeline = data.get("pipeline", {})
    splits = data.get("splits", {})
    retrieval = data.get("retrieval", {})
    answer = data.get("answer", {})
    paths = data.get("paths", {})
    kwargs = dict(
        base_dir=base,
        corpus_paths=list(corpus.get("paths", [])),
        manifest=corpus.get("manifest"),
        source_name=corpus.get("source_name", ""),
        provider=dict(data.get("provider", {})),
        seed=int(pipeline.get("seed", 0)),
        filtering=bool(pipeline.get("filtering", True)),
        unseen_sources=list(pipeline.get("unseen_sources", [])),
        split_ratios=(float(splits.get("train", 0.55)), float(splits.get("dev", 0.075)),
                      float(splits.get("test", 0.375))),
        fewshot_bank=data.get("fewshot", {}).get("bank"),
        backend=retrieval.get("backend", "lexical"),
        top_k=int(retrieval.get("top_k", DEFAULT_TOP_K)),
        list_only=bool(retrieval.get("list_only", False)),
        score_floor=retrieval.get("score_floor"),
        mode=answer.get("mode", "isl"),
        shots=int(answer.get("shots", 0)),
        include_titles=bool(answer.get("include_titles", True)),
        template_dir=paths.get("templates"),
        out_dir=paths.get("out", "out"),
    )
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- shared plumbing -------------------------------------------------------------

def make_gateway(config: RunConfig) -> Gateway:
    section = config.provider
    kind = section.get("kind", "http")
    max_concurrent = int(section.get("max_concurrent", 4))
    if config.replay:
        provider = RecordReplayProvider(config.path(config.replay))
    else:
        if kind == "mock":
            script = section.get("script")
            provider = MockProvider.from_script_file(config.path(script)) if script else MockProvider()
        elif kind == "http":
            provider = HttpProvider(ProviderConfig(
                base_url=section.get("base_url", ProviderConfig.base_url),
                api_key_env_var=section.get("api_key_env_var", ProviderConfig.api_key_env_var),
                model=section.get("model", ProviderConfig.model),
                embedding_model=section.get("embedding_model", ProviderConfig.embedding_model),
                max_concurrent=max_concurrent,
                max_retries=int(section.get("max_retries", ProviderConfig.max_retries)),
                backoff_base_ms=int(section.get("backoff_base_ms", ProviderConfig.backoff_base_ms)),
            ))
        else:
            raise ConfigError(f"unknown provider kind {kind!r}")
        if config.record:
            provider = RecordReplayProvider(config.path(config.record), provider)
    return Gateway(provider, max_concurrent=max_concurrent, model_name=section.get("model", "default"))


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `listqa {hint}` first")
    return path


def _write_json(path: Path, header: dict, payload: dict) -> None:
    path.write_text(json.dumps({"_header": header, **payload}, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def _corpus_passages(config: RunConfig) -> dict[str, Passage]:
    docs = read_corpus(_require(config.out / "corpus.jsonl", "ingest"))
    return {p.passage_id: p for d in docs for p in d.passages}


# -- stages ---------------------------------------------------------------------

def cmd_ingest(config: RunConfig) -> Path:
    entries = []
    if config.manifest:
        entries += read_manifest(config.path(config.manifest))
    for raw in config.corpus_paths:
        p = config.path(raw)
        if p.is_dir():
            entries += discover_html(p, config.source_name)
        elif p.exists():
            entries.append((p, p.stem, config.source_name))
        else:
            raise MissingArtifact(f"corpus path not found: {p}")
    if not entries:
        raise ConfigError("no corpus inputs configured")
    documents, failures = load_corpus(entries)
    config.out.mkdir(parents=True, exist_ok=True)
    out = config.out / "corpus.jsonl"
    passages = [p for d in documents for p in d.passages]
    write_corpus(documents, out, config.header(
        "ingest", documents=len(documents), passages=len(passages),
        list_passages=len(select_list_passages(documents)),
        empty_passages=sum(p.empty for p in passages), failures=failures,
    ))
    log.info("ingested %d documents (%d failed) into %s", len(documents), len(failures), out)
    return out


def cmd_synthesize(config: RunConfig, gateway: Gateway | None = None) -> dict:
    gateway = gateway or make_gateway(config)
    documents = read_corpus(_require(config.out / "corpus.jsonl", "ingest"))
    bank = FewShotBank.load(config.path(config.fewshot_bank)) if config.fewshot_bank else FewShotBank.load()
    pipeline = PipelineConfig(seed=config.seed, split_ratios=config.split_ratios, filtering=config.filtering,
                              unseen_sources=tuple(config.unseen_sources),
                              template_dir=str(config.path(config.template_dir)) if config.template_dir else None)
    result = run_pipeline(documents, pipeline, gateway, bank=bank)
    dataset_dir = config.out / "dataset"
    dataset_dir.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        write_records(result.split(split), dataset_dir / f"{split}.jsonl", config.header("synthesize", split=split))
    with open(dataset_dir / "dropped.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_header": config.header("synthesize", split="dropped")}, sort_keys=True) + "\n")
        for item in result.dropped:
            fh.write(json.dumps(item.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
    report = result.report.to_json()
    _write_json(dataset_dir / "report.json", config.header("synthesize"), {"report": report})
    log.info("synthesized %d records, kept %d (%s)", report["blocks"], report["kept"], report["retention"])
    return report


def cmd_index(config: RunConfig, gateway: Gateway | None = None) -> Path:
    passages = list(_corpus_passages(config).values())
    if config.list_only:
        passages = [p for p in passages if p.list_blocks]
    passages = [p for p in passages if not p.empty]
    if config.backend == "embedding":
        gateway = gateway or make_gateway(config)
    index = build_index(passages, config.backend, gateway)
    out = config.out / "index.jsonl"
    index.save(out, config.header("index", backend=config.backend, passages=len(index)))
    return out


def _load_index(config: RunConfig, gateway: Gateway | None) -> PassageIndex:
    path = config.out / "index.jsonl"
    if not path.exists():
        cmd_index(config, gateway)
    return PassageIndex.load(path)


def build_answer_prompt(passages: list[Passage], question: str, mode: str, *, include_titles: bool = True,
                        examples: str = "", template_dir=None):
    context = render_passages(passages, include_title=include_titles)
    template = load_template("answer_isl" if mode == "isl" else "answer_direct", template_dir)
    prompt = fill_template(template, EXAMPLES=examples, PASSAGES=context.text, QUESTION=question)
    return prompt, context


def fewshot_examples(config: RunConfig, passages: dict[str, Passage], mode: str) -> str:
    """One training example per list type, chosen with the run seed."""
    if config.shots == 0:
        return ""
    train = config.out / "dataset" / "train.jsonl"
    if not train.exists():
        raise MissingArtifact(f"{train} is needed for {config.shots}-shot prompting")
    records = read_records(train)
    rng = random.Random(config.seed)
    chosen = []
    for list_type in ListType:
        pool = [r for r in records if r.list_type is list_type]
        if pool:
            chosen.append(rng.choice(pool))
    chosen = chosen[: config.shots]
    chunks = []
    for record in chosen:
        passage = passages[record.gold_passage_id]
        prompt, _ = build_answer_prompt([passage], record.question, mode, include_titles=config.include_titles,
                                        template_dir=config.path(config.template_dir))
        target = render_isl(record_isl(record)) if mode == "isl" else record.response
        chunks.append(f"{prompt}\n{target}\n\n")
    return "".join(chunks)


def answer_question(config: RunConfig, gateway: Gateway, index: PassageIndex, passages: dict[str, Passage],
                    question: str, mode: str, examples: str = "") -> dict:
    result = retrieve(index, question, config.top_k, gateway if index.backend == "embedding" else None)
    row: dict = {"question": question, "mode": mode, "retrieved": result.passage_ids}
    if route(result, score_floor=config.score_floor) == UNANSWERABLE:
        answer = IslAnswer(IslBlock(None), UNANSWERABLE_RESPONSE)
        row.update(route=UNANSWERABLE, raw_output=None, response=answer.response,
                   isl=render_isl(answer) if mode == "isl" else None, consistency=None, error=None)
        return row
    shown = [passages[pid] for pid in result.passage_ids]
    prompt, context = build_answer_prompt(shown, question, mode, include_titles=config.include_titles,
                                          examples=examples, template_dir=config.path(config.template_dir))
    raw = gateway.ask(prompt, tag=f"answer_{mode}", max_output_tokens=512)
    row.update(route="answerable", raw_output=raw,
               line_map=[[k, *v[1:]] for k, v in sorted(context.line_map.items())])
    if mode == "direct":
        row.update(response=raw.strip(), isl=None, consistency=None, error=None)
        return row
    try:
        answer = parse_isl(raw)
    except ParseError as exc:
        tail = raw.split("Response:", 1)
        row.update(response=tail[1].strip() if len(tail) == 2 else raw.strip(), isl=None,
                   consistency=None, error=f"isl_parse: {exc}")
        return row
    report = check_consistency(answer, shown)
    row.update(
        response=answer.response,
        isl=render_isl(answer),
        consistency={"consistent": report.consistent,
                     "findings": [{"code": f.code, "severity": f.severity, "message": f.message}
                                  for f in report.findings],
                     "deduced_answer": report.deduced_answer.value if report.deduced_answer else None},
        error=None,
    )
    return row


def cmd_answer(config: RunConfig, *, question: str | None = None, split: str = "test",
               gateway: Gateway | None = None) -> dict | Path:
    """Answer one question (returns the answer row) or a whole dataset split (returns the answers file)."""
    gateway = gateway or make_gateway(config)
    passages = _corpus_passages(config)
    index = _load_index(config, gateway)
    examples = fewshot_examples(config, passages, config.mode)
    if question is not None:
        return answer_question(config, gateway, index, passages, question, config.mode, examples)

    records = read_records(_require(config.out / "dataset" / f"{split}.jsonl", "synthesize"))

    def work(record):
        try:
            row = answer_question(config, gateway, index, passages, record.question, config.mode, examples)
        except GatewayError as exc:
            row = {"question": record.question, "mode": config.mode, "response": None, "error": f"gateway: {exc}"}
        gold = record.gold_passage_id
        return {"record_id": record.record_id, "gold_passage": gold,
                "gold_retrieved": gold in row.get("retrieved", []), **row}

    with ThreadPoolExecutor(max_workers=gateway.max_concurrent) as pool:
        rows = list(pool.map(work, records))
    errors = sum(1 for r in rows if r.get("error"))
    hits = sum(1 for r in rows if r["gold_retrieved"])
    answers_dir = config.out / "answers"
    answers_dir.mkdir(parents=True, exist_ok=True)
    out = answers_dir / f"{split}.{config.mode}.jsonl"
    header = config.header("answer", split=split, mode=config.mode, top_k=config.top_k, items=len(rows),
                           errors=errors, recall_at_k=(hits / len(rows)) if rows else None)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_header": header}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    return out


def read_answers(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                if "_header" not in row:
                    rows.append(row)
    return rows


def cmd_evaluate(config: RunConfig, *, split: str = "test", answers: str | Path | None = None,
                 gateway: Gateway | None = None) -> dict:
    gateway = gateway or make_gateway(config)
    passages = _corpus_passages(config)
    records = read_records(_require(config.out / "dataset" / f"{split}.jsonl", "synthesize"))
    by_id = {r.record_id: r for r in records}
    answers_path = Path(answers) if answers else config.out / "answers" / f"{split}.{config.mode}.jsonl"
    rows = read_answers(_require(answers_path, "answer"))
    template = load_template("evaluate", config.path(config.template_dir))

    def work(row):
        record = by_id.get(row["record_id"])
        if record is None:
            return None, f"unknown record {row['record_id']}"
        response = row.get("response")
        if not response:
            return None, f"{row['record_id']}: no response ({row.get('error')})"
        context = plain_passage(passages[record.gold_passage_id])
        try:
            tags, raw = judge_response(gateway, context, record.question, response, template=template)
        except (JudgeTagParseError, GatewayError) as exc:
            return None, f"{row['record_id']}: judge failed: {exc}"
        return EvalVerdict(record.record_id, rouge_l(response, record.response), tags["correctness"],
                           tags["faithfulness"], tags["completeness"], raw), None

    with ThreadPoolExecutor(max_workers=gateway.max_concurrent) as pool:
        outcomes = list(pool.map(work, rows))
    verdicts = [v for v, _ in outcomes if v is not None]
    errors = [e for _, e in outcomes if e is not None]
    for error in errors:
        log.warning("evaluate: %s", error)
    eval_dir = config.out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{split}.{config.mode}"
    header = config.header("evaluate", split=split, mode=config.mode, items=len(rows), errors=len(errors))
    write_verdicts(verdicts, eval_dir / f"{stem}.verdicts.jsonl", header)
    if not verdicts:
        payload = {"report": None, "errors": errors}
        _write_json(eval_dir / f"{stem}.report.json", header, payload)
        return payload
    report = aggregate(verdicts, records)
    payload = {"report": report.to_json(), "errors": errors}
    _write_json(eval_dir / f"{stem}.report.json", header, payload)
    (eval_dir / f"{stem}.report.txt").write_text(format_table(report) + "\n", encoding="utf-8")
    return payload


def cmd_report(config: RunConfig, *, split: str = "test") -> str:
    stem = f"{split}.{config.mode}"
    verdicts = read_verdicts(_require(config.out / "eval" / f"{stem}.verdicts.jsonl", "evaluate"))
    records = read_records(_require(config.out / "dataset" / f"{split}.jsonl", "synthesize"))
    return format_table(aggregate(verdicts, records))


# -- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="listqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"listqa {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="out_dir", help="output directory")
    common.add_argument("--replay", help="serve model calls from a recorded session")
    common.add_argument("--record", help="record model calls to a session file")
    common.add_argument("--top-k", dest="top_k", type=int)
    common.add_argument("--mode", choices=["direct", "isl"])
    common.add_argument("--shots", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse HTML into the corpus file")
    sub.add_parser("synthesize", parents=[common], help="build the filtered dataset")
    sub.add_parser("index", parents=[common], help="build the passage index")
    answer = sub.add_parser("answer", parents=[common], help="answer one question or a dataset split")
    answer.add_argument("--question")
    answer.add_argument("--split", default="test", choices=SPLITS)
    evaluate = sub.add_parser("evaluate", parents=[common], help="score answers for a split")
    evaluate.add_argument("--split", default="test", choices=SPLITS)
    evaluate.add_argument("--answers", help="answers file (default: the answer stage output)")
    report = sub.add_parser("report", parents=[common], help="print the evaluation table")
    report.add_argument("--split", default="test", choices=SPLITS)
    run = sub.add_parser("run", parents=[common], help="all stages in order")
    run.add_argument("--split", default="test", choices=SPLITS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # path flags are relative to the working directory, config paths to the config file
        out_dir, replay, record = (str(Path(p).resolve()) if p else None
                                   for p in (args.out_dir, args.replay, args.record))
        config = load_config(args.config, seed=args.seed, out_dir=out_dir, replay=replay,
                             record=record, top_k=args.top_k, mode=args.mode, shots=args.shots)
        if args.command == "ingest":
            print(cmd_ingest(config))
        elif args.command == "synthesize":
            print(json.dumps(cmd_synthesize(config), indent=2, sort_keys=True))
        elif args.command == "index":
            print(cmd_index(config))
        elif args.command == "answer":
            result = cmd_answer(config, question=args.question, split=args.split)
            if isinstance(result, dict):
                print(result["isl"] if result.get("isl") else result["response"])
                if result.get("error"):
                    print(f"warning: {result['error']}", file=sys.stderr)
            else:
                print(result)
        elif args.command == "evaluate":
            payload = cmd_evaluate(config, split=args.split, answers=args.answers)
            print(cmd_report(config, split=args.split) if payload["report"] else "no verdicts")
        elif args.command == "report":
            print(cmd_report(config, split=args.split))
        elif args.command == "run":
            gateway = make_gateway(config)
            cmd_ingest(config)
            cmd_synthesize(config, gateway)
            cmd_index(config, gateway)
            cmd_answer(config, split=args.split, gateway=gateway)
            payload = cmd_evaluate(config, split=args.split, gateway=gateway)
            print(cmd_report(config, split=args.split) if payload["report"] else "no verdicts")
    except (ConfigError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GatewayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
