import json
from pathlib import Path

import pytest

from app.core.config import ABLATIONS, PipelineConfig, RunConfig, load_run_config
from app.core.errors import ConfigError
from app.runtime import create_runtime

BACKEND_DIR = Path(__file__).resolve().parents[1]


@pytest.mark.parametrize("name, check", [
    ("no-judge", lambda cfg: cfg.use_judge is False),
    ("shared-fewshots", lambda cfg: cfg.few_shot_mode == "shared"),
    ("no-planner", lambda cfg: cfg.use_planner is False),
    ("no-answers", lambda cfg: [a.name for a in cfg.agents] == ["direct", "embed"]),
    ("no-embeddings", lambda cfg: [a.name for a in cfg.agents] == ["direct", "direct_ans"]),
    ("agents=embed_ans, direct", lambda cfg: [a.name for a in cfg.agents] == ["embed_ans", "direct"]),
])
def test_ablations(name, check) -> None:
    base = PipelineConfig()
    assert check(base.with_ablation(name))
    # The original is untouched
    assert base.use_judge and len(base.agents) == 4


@pytest.mark.parametrize("name", ["agents=", "agents=direct,nope", "judge-only"])
def test_bad_ablation(name) -> None:
    with pytest.raises(ConfigError):
        PipelineConfig().with_ablation(name)


def test_every_listed_ablation_is_accepted() -> None:
    for name in ABLATIONS:
        PipelineConfig().with_ablation(name)


def test_corpus_path_defaults_to_dataset() -> None:
    config = RunConfig.model_validate({"dataset": {"format": "bank", "corpus_path": "faqs.jsonl"}})
    assert config.corpus_path == "faqs.jsonl"


def test_load_run_config_errors(tmp_path) -> None:
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "absent.json"))

    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"pipeline": {"judge_samples": 0}}), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(str(invalid))

    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"corpus_path": str(tmp_path / "nope.jsonl")}), encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_run_config(str(missing))
    assert "nope.jsonl" in str(info.value)
    assert load_run_config(str(missing), check_paths=False).corpus_path.endswith("nope.jsonl")


def test_shipped_run_config_is_valid(monkeypatch) -> None:
    monkeypatch.chdir(BACKEND_DIR)
    config = load_run_config("data/run_config.json")
    assert config.backend.kind == "live"
    assert config.pipeline.few_shot_mode == "disjoint"
    assert config.dataset.training_path == "data/sample_training.jsonl"


def test_demo_config_annotates_offline(monkeypatch, tmp_path) -> None:
    monkeypatch.chdir(BACKEND_DIR)
    config = load_run_config("data/demo_config.json")
    config = config.model_copy(update={"cache_path": None, "index_dir": str(tmp_path / "index")})
    runtime = create_runtime(config)
    assert len(runtime.corpus) == 24
    assert len(runtime.training) == 26
    assert len(runtime.test) == 8

    result = runtime.pipeline.annotate_with_cache("Lost DEB")
    payload = result.verdict.to_payload(runtime.corpus)
    assert payload["mode"] == "judged"
    assert [item["faq_id"] for item in payload["reranked_faqs"]][:2] == ["card-lost", "card-lock"]

    generic = runtime.pipeline.annotate_with_cache("help")
    assert generic.verdict.to_payload(runtime.corpus)["reranked_faqs"][0]["faq_id"] == "balance"
