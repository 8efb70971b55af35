import json

import pytest

from app import cli
from tests.helpers import BANK_FAQS, lost_deb_script, write_bank_corpus, write_jsonl


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr(cli, "setup_logging", lambda *args, **kwargs: None)


def _workspace(tmp_path, script=None, dataset_format="bank", corpus_records=None):
    corpus_path = (write_jsonl(tmp_path / "faqs.jsonl", corpus_records) if corpus_records is not None
                   else write_bank_corpus(tmp_path / "faqs.jsonl"))
    labels_path = write_jsonl(tmp_path / "labels.jsonl", [
        {"utterance": "lost deb", "gold_ids": ["card-lost"]},
        {"utterance": "sba", "gold_ids": ["sba-open"]},
    ])
    script = lost_deb_script() if script is None else script
    script_path = tmp_path / "script.json"
    script_path.write_text(json.dumps({
        "chat": [{"match": match, "response": response} for match, response in script.items()],
        "embeddings": {"hashing": 32},
    }), encoding="utf-8")
    config = {
        "dataset": {"format": dataset_format, "corpus_path": corpus_path, "labels_path": labels_path},
        "backend": {"kind": "scripted", "script_path": str(script_path), "backoff_base_ms": 0},
        "pipeline": {"few_shots_per_agent": 0},
        "cache_path": str(tmp_path / "cache" / "annotations.jsonl"),
        "index_dir": str(tmp_path / "index"),
        "output_dir": str(tmp_path / "reports"),
    }
    config_path = tmp_path / "run_config.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")
    return str(config_path)


def test_index_writes_both_indexes_and_statistics(tmp_path, capsys) -> None:
    config = _workspace(tmp_path)
    assert cli.main(["index", "--config", config]) == 0
    assert (tmp_path / "index" / "faq_embeddings_q.bin").exists()
    assert (tmp_path / "index" / "faq_embeddings_qa.bin").exists()
    out = capsys.readouterr().out
    assert "Number of FAQs" in out
    assert "Number of Test Utterances" in out


def test_index_rejects_duplicate_ids(tmp_path, capsys) -> None:
    records = [{"id": i, "question": q, "answer": a} for i, q, a in BANK_FAQS]
    records.append({"id": "card-lock", "question": "Another lock question?", "answer": ""})
    config = _workspace(tmp_path, corpus_records=records)
    assert cli.main(["index", "--config", config]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "card-lock" in err


def test_annotate_prints_ranked_faqs_and_caches(tmp_path, capsys) -> None:
    config = _workspace(tmp_path)
    assert cli.main(["annotate", "Lost DEB", "--config", config]) == 0
    first = json.loads(capsys.readouterr().out)
    assert [item["faq_id"] for item in first["reranked_faqs"]] == [
        "card-lost", "card-lock", "card-declined", "pwd-reset", "balance"
    ]
    assert first["mode"] == "judged"
    assert first["cache_hit"] is False

    assert cli.main(["annotate", "lost   deb", "--config", config]) == 0
    assert json.loads(capsys.readouterr().out)["cache_hit"] is True

    assert cli.main(["annotate", "lost deb", "--config", config, "--no-cache"]) == 0
    assert json.loads(capsys.readouterr().out)["cache_hit"] is False


def test_annotate_blank_utterance_is_usage_error(tmp_path, capsys) -> None:
    config = _workspace(tmp_path)
    assert cli.main(["annotate", "   ", "--config", config]) == 2
    assert "empty" in capsys.readouterr().err


def test_annotate_ablation_uses_fallback_and_own_cache(tmp_path, capsys) -> None:
    config = _workspace(tmp_path)
    assert cli.main(["annotate", "lost deb", "--config", config, "--ablation", "no-judge", "--sequential"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["mode"] == "fallback"
    assert (tmp_path / "cache" / "annotations.no-judge.jsonl").exists()
    assert not (tmp_path / "cache" / "annotations.jsonl").exists()


def test_annotate_unknown_ablation(tmp_path) -> None:
    config = _workspace(tmp_path)
    assert cli.main(["annotate", "lost deb", "--config", config, "--ablation", "no-such-thing"]) == 2


def test_annotate_backend_failure_exit_code(tmp_path, capsys) -> None:
    config = _workspace(tmp_path, script={})
    assert cli.main(["annotate", "lost deb", "--config", config]) == 4
    assert capsys.readouterr().err.startswith("error:")


def test_evaluate_writes_reports(tmp_path, capsys) -> None:
    config = _workspace(tmp_path)
    assert cli.main(["evaluate", "--config", config, "--single-agents"]) == 0
    report = json.loads((tmp_path / "reports" / "bank_report.json").read_text(encoding="utf-8"))
    methods = [row["method"] for row in report["reports"]]
    assert methods[0] == "MAFA (Specialized)"
    assert "Direct LLM" in methods and "BM25" in methods
    assert report["reports"][0]["top1"] == 0.5
    assert (tmp_path / "reports" / "bank_report.txt").exists()
    assert "Top-1 Acc" in capsys.readouterr().out


def test_evaluate_custom_output(tmp_path) -> None:
    config = _workspace(tmp_path)
    out_dir = tmp_path / "elsewhere"
    args = ["evaluate", "--config", config, "--no-baselines", "--output-dir", str(out_dir),
            "--report-name", "run1", "--latency", "1"]
    assert cli.main(args) == 0
    timing = json.loads((out_dir / "run1.timing.json").read_text(encoding="utf-8"))
    assert [row["configuration"] for row in timing["latency"]] == ["MAFA (Sequential)", "MAFA (Parallel)", "Single Agent"]


def test_invalid_dataset_format_in_config(tmp_path, capsys) -> None:
    config = _workspace(tmp_path, dataset_format="xml")
    assert cli.main(["evaluate", "--config", config]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_config_file(tmp_path) -> None:
    assert cli.main(["annotate", "sba", "--config", str(tmp_path / "nope.json")]) == 2


def test_parser_requires_a_command() -> None:
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args([])
