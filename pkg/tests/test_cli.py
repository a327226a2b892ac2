from __future__ import annotations

import json
import re
from pathlib import Path

import pytest

from conftest import CORPUS10, REFERENCE, REFERENCE_ISL, judge_text
from listqa import cli
from listqa.cli import (
    ConfigError, MissingArtifact, RunConfig, cmd_answer, cmd_evaluate, cmd_index, cmd_ingest,
    cmd_synthesize, load_config, main, read_answers,
)
from listqa.isl import parse_isl
from listqa.synthesis import DatasetRecord, write_records

SRC = Path(cli.__file__).parent


def write_script(path: Path, script: dict) -> str:
    path.write_text(json.dumps({"script": script}), encoding="utf-8")
    return str(path)


def reference_config(tmp_path, script: dict, **kwargs) -> RunConfig:
    return RunConfig(
        base_dir=tmp_path,
        corpus_paths=[str(REFERENCE / "masters_loan.html"), str(REFERENCE / "social_work_bursaries.html")],
        provider={"kind": "mock", "script": write_script(tmp_path / "script.json", script)},
        include_titles=False,
        **kwargs,
    )


def test_answer_reference_example(tmp_path):
    config = reference_config(tmp_path, {"answer_isl": REFERENCE_ISL})
    cmd_ingest(config)
    row = cmd_answer(config, question="I hold a higher education social work qualification. "
                                      "Am I eligible for a social work bursary?")
    assert len(row["retrieved"]) == 3
    assert row["error"] is None
    assert parse_isl(row["isl"]) == parse_isl(REFERENCE_ISL)
    assert row["consistency"]["consistent"] is True
    assert row["consistency"]["deduced_answer"] == "no"
    assert row["response"].startswith("No, you are not eligible")
    assert [entry[0] for entry in row["line_map"]] == list(range(1, 16))


def test_answer_prompt_layout(tmp_path):
    config = reference_config(tmp_path, {"answer_isl": REFERENCE_ISL})
    cmd_ingest(config)
    gateway = cli.make_gateway(config)
    cmd_answer(config, question="Am I eligible for a social work bursary?", gateway=gateway)
    prompt = gateway.provider.calls[-1].user_text
    assert prompt.startswith("Given the passages, generate the system response to the user's question, "
                             "including intermediate steps:")
    assert re.search(r"^Passage 3$", prompt, re.M)
    assert "• [15]" in prompt
    assert prompt.rstrip().endswith("User question: Am I eligible for a social work bursary?")


def test_answer_parse_failure_is_reported(tmp_path):
    config = reference_config(tmp_path, {"answer_isl": "I think so.\nResponse: Yes, probably."})
    cmd_ingest(config)
    row = cmd_answer(config, question="Am I eligible for a social work bursary?")
    assert row["error"].startswith("isl_parse") and row["response"] == "Yes, probably."


def test_direct_mode(tmp_path):
    config = reference_config(tmp_path, {"answer_direct": "Yes, you can."}, mode="direct")
    cmd_ingest(config)
    row = cmd_answer(config, question="Can I get a Master's Loan?")
    assert row["response"] == "Yes, you can." and row["isl"] is None


def test_unanswerable_route(tmp_path):
    config = reference_config(tmp_path, {}, score_floor=1e9)
    cmd_ingest(config)
    row = cmd_answer(config, question="Can I get a Master's Loan?")
    assert row["route"] == "unanswerable" and "Relevant Passage: none" in row["isl"]


def test_evaluate_single_record(tmp_path):
    config = reference_config(tmp_path, {"judge": judge_text(complete="incomplete")})
    cmd_ingest(config)
    from listqa.corpus import read_corpus
    passage = read_corpus(config.out / "corpus.jsonl")[1].passages[0]
    from listqa.listlogic import ListType, LogicalRelation, StatusAssignment, UserItemStatus, ShortAnswer
    assignment = StatusAssignment(passage.passage_id, 0, ((5, UserItemStatus.CONTRADICTED),), ShortAnswer.NO, 1)
    record = DatasetRecord("r1", "seen", (passage.passage_id,), ListType.CONDITION, LogicalRelation.AND,
                           assignment, "Am I eligible?", "No, you are not eligible.")
    (config.out / "dataset").mkdir()
    write_records([record], config.out / "dataset" / "test.jsonl")
    answers = tmp_path / "answers.jsonl"
    answers.write_text(json.dumps({"record_id": "r1", "response": "No, you are not eligible."}) + "\n")
    payload = cmd_evaluate(config, answers=answers)
    lines = (config.out / "eval" / "test.isl.verdicts.jsonl").read_text().splitlines()
    assert len(lines) == 2 and "_header" in json.loads(lines[0])
    verdict = json.loads(lines[1])
    assert verdict == {"record_id": "r1", "rouge_l": 1.0, "correctness": True, "faithfulness": True,
                       "completeness": False}
    assert payload["report"]["average"] == pytest.approx(75.0)


def run_cli(tmp_path, *args):
    return main(["run", "--config", str(CORPUS10 / "config.toml"), "--out", str(tmp_path / "out"), *args])


def test_full_run_headers(tmp_path, capsys):
    assert run_cli(tmp_path) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split()[:3] == ["Group", "N", "ROUGE-L"]
    out = tmp_path / "out"
    files = [p for p in out.rglob("*") if p.is_file()]
    assert {p.relative_to(out).as_posix() for p in files} == {
        "corpus.jsonl", "index.jsonl", "dataset/train.jsonl", "dataset/dev.jsonl", "dataset/test.jsonl",
        "dataset/dropped.jsonl", "dataset/report.json", "answers/test.isl.jsonl",
        "eval/test.isl.verdicts.jsonl", "eval/test.isl.report.json", "eval/test.isl.report.txt",
    }
    digests = set()
    for path in files:
        if path.suffix == ".txt":
            continue
        first = path.read_text(encoding="utf-8").splitlines()[0] if path.suffix == ".jsonl" else path.read_text()
        header = json.loads(first)["_header"]
        assert header["tool"] == "listqa" and header["seeds"] == {"run": 7}
        digests.add(header["config_digest"])
    assert len(digests) == 1
    answers = read_answers(out / "answers" / "test.isl.jsonl")
    assert {a["record_id"] for a in answers} == {"carers_credit-p2-b0", "medical_exam-p1-b0"}
    assert all(a["consistency"]["consistent"] for a in answers)
    report = json.loads((out / "eval" / "test.isl.report.json").read_text())["report"]
    assert set(report["by_domain"]) == {"seen", "unseen"}


def test_stagewise_commands(tmp_path, capsys):
    cfg = ["--config", str(CORPUS10 / "config.toml"), "--out", str(tmp_path / "o")]
    assert main(["ingest", *cfg]) == 0
    assert main(["synthesize", *cfg]) == 0
    report = json.loads(capsys.readouterr().out.split("\n", 1)[1])
    assert report["retention"] == "3/5"
    assert main(["index", *cfg]) == 0
    assert main(["answer", *cfg, "--split", "train"]) == 0
    assert main(["evaluate", *cfg, "--split", "train"]) == 0
    assert main(["report", *cfg, "--split", "train"]) == 0
    assert "type:condition" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    assert main(["ingest", "--config", str(tmp_path / "nope.toml")]) == 2
    assert main(["synthesize", "--config", str(CORPUS10 / "config.toml"), "--out", str(tmp_path / "x")]) == 2
    assert main(["report", "--config", str(CORPUS10 / "config.toml"), "--out", str(tmp_path / "x")]) == 2
    cfg = ["--config", str(CORPUS10 / "config.toml"), "--out", str(tmp_path / "y")]
    assert main(["ingest", *cfg]) == 0
    # a mock with an empty script cannot answer: provider failure exits with 1
    empty = tmp_path / "empty.toml"
    empty.write_text(f"[corpus]\nmanifest = '{CORPUS10 / 'manifest.tsv'}'\n[provider]\nkind = 'mock'\n")
    assert main(["ingest", "--config", str(empty), "--out", str(tmp_path / "z")]) == 0
    assert main(["answer", "--config", str(empty), "--out", str(tmp_path / "z"), "--question", "carer"]) == 1
    assert main(["ingest", *cfg, "--replay", str(tmp_path / "missing.jsonl")]) == 0
    assert main(["answer", *cfg, "--replay", str(tmp_path / "missing.jsonl"), "--question", "x"]) == 1
    assert main(["ingest", *cfg, "--top-k", "0"]) == 2
    capsys.readouterr()


def test_config_loading(tmp_path):
    config = load_config(CORPUS10 / "config.toml")
    assert config.seed == 7 and config.split_ratios == (0.5, 0.0, 0.5)
    assert config.path(config.manifest) == CORPUS10 / "manifest.tsv"
    assert load_config(CORPUS10 / "config.toml", seed=3).seed == 3
    assert load_config(CORPUS10 / "config.toml", seed=3).digest() != config.digest()
    bad = tmp_path / "bad.toml"
    bad.write_text("[answer]\nmode = 'sideways'\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("not = [valid")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_shots_need_training_data(tmp_path):
    config = reference_config(tmp_path, {"answer_isl": REFERENCE_ISL}, shots=4)
    cmd_ingest(config)
    with pytest.raises(MissingArtifact):
        cmd_answer(config, question="Am I eligible?")


def test_fewshot_prompt_uses_train_records(tmp_path):
    out = tmp_path / "out"
    assert run_cli(tmp_path) == 0
    config = load_config(CORPUS10 / "config.toml", out_dir=str(out), shots=4)
    gateway = cli.make_gateway(config)
    cmd_index(config, gateway)
    cmd_answer(config, question="I already get Carer's Allowance. Can I get Carer's Credit?", gateway=gateway)
    prompt = gateway.provider.calls[-1].user_text
    assert prompt.count("including intermediate steps") == 2
    assert "Relevant Passage: 1" in prompt


def test_only_gateway_touches_the_network():
    for path in SRC.rglob("*.py"):
        text = path.read_text(encoding="utf-8")
        uses_net = re.search(r"^\s*(import|from)\s+(httpx|requests|urllib|socket|http\.client)\b", text, re.M)
        assert not uses_net or path.name == "gateway.py", path


def test_synthesize_uses_shared_gateway(tmp_path):
    config = load_config(CORPUS10 / "config.toml", out_dir=str(tmp_path / "o"))
    cmd_ingest(config)
    report = cmd_synthesize(config)
    assert report["kept"] == 3
