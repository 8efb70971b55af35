# Backend/app/core/config.py
import os
import sys
from pathlib import Path
from typing import List, Literal, Optional

from dotenv import load_dotenv
from loguru import logger
from pydantic import BaseModel, Field, ValidationError, model_validator

from app.core.errors import ConfigError
from app.core.models import AgentSpec, standard_agents

# Load environment variables first (API keys live here, never in the config file)
load_dotenv()

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
LOGS_DIR = os.getenv("LOGS_DIR", "logs")
DEFAULT_CONFIG_PATH = os.getenv("FAQ_CONFIG_PATH", "data/run_config.json")

_logging_ready = False


def setup_logging(level: str = LOG_LEVEL, logs_dir: Optional[str] = LOGS_DIR) -> None:
    """
    Configure loguru: console sink plus an audit file that only receives
    records bound with ``audit=True``.
    """
    global _logging_ready
    if _logging_ready:
        return
    logger.remove()
    logger.add(sys.stderr, level=level, format="{time:YYYY-MM-DD HH:mm:ss} - {level} - {name} - {message}",
               filter=lambda record: not record["extra"].get("audit"))
    if logs_dir:
        try:
            os.makedirs(logs_dir, exist_ok=True)
            logger.add(os.path.join(logs_dir, "audit.log"), level="INFO", format="{message}",
                       filter=lambda record: bool(record["extra"].get("audit")), enqueue=True)
        except OSError as e:
            logger.warning(f"Audit log disabled, cannot create {logs_dir}: {e}")
    _logging_ready = True


audit_logger = logger.bind(audit=True)


class BackendConfig(BaseModel):
    """
    Where and how LLM calls are made.

    Attributes:
        kind: live (HTTP), record (HTTP + write replay store), replay (replay store only)
              or scripted (tests)
        endpoint_url: Base URL of an OpenAI-compatible API
        api_key_env_name: Name of the environment variable holding the API key
        chat_model_name: Chat completion model
        embed_model_name: Embedding model
        max_retries: Retries after the first attempt on transient failures
        timeout_ms: Per-request timeout
        backoff_base_ms: First backoff delay; doubles per retry, jitter of 20%
        replay_path: JSON-lines replay store for record/replay
        embed_batch_size: Inputs per embeddings request
        script_path: JSON script for the scripted backend (offline demos)
    """
    kind: Literal["live", "record", "replay", "scripted"] = "live"
    endpoint_url: str = "https://api.openai.com/v1"
    api_key_env_name: str = "OPENAI_API_KEY"
    chat_model_name: str = "gpt-4o"
    embed_model_name: str = "text-embedding-ada-002"
    max_retries: int = Field(default=3, ge=0)
    timeout_ms: int = Field(default=60000, gt=0)
    backoff_base_ms: float = Field(default=250.0, ge=0.0)
    replay_path: Optional[str] = None
    embed_batch_size: int = Field(default=64, ge=1)
    script_path: Optional[str] = None

    def api_key(self) -> Optional[str]:
        return os.getenv(self.api_key_env_name)


ABLATIONS = ("no-judge", "shared-fewshots", "no-planner", "no-answers", "no-embeddings")


class PipelineConfig(BaseModel):
    """
    Knobs of the annotation pipeline. Defaults reproduce the full four-agent
    ensemble with a single judge pass.
    """
    agents: List[AgentSpec] = Field(default_factory=standard_agents)
    judge_samples: int = Field(default=1, ge=1)
    parallel: bool = True
    cache_enabled: bool = True
    top_k_out: int = Field(default=5, ge=1)
    use_planner: bool = True
    use_judge: bool = True
    expansion_in_embedding: bool = True
    ranker_temperature: float = Field(default=0.1, ge=0.0, le=2.0)
    judge_temperature: float = Field(default=0.3, ge=0.0, le=2.0)
    planner_temperature: float = Field(default=0.1, ge=0.0, le=2.0)
    prompt_budget_chars: int = Field(default=100_000, gt=0)
    answer_truncate_words: int = Field(default=60, ge=1)
    fallback_mode: Literal["proposing", "all_agents"] = "proposing"
    few_shot_mode: Literal["disjoint", "independent", "shared"] = "disjoint"
    few_shots_per_agent: int = Field(default=5, ge=0)
    repair_unparseable: bool = True
    max_workers: Optional[int] = Field(default=None, ge=1)

    def with_ablation(self, name: str) -> "PipelineConfig":
        """
        Return a copy configured for one ablation: no-judge, shared-fewshots,
        no-planner, no-answers, no-embeddings or agents=<a,b,...>.
        """
        if name == "no-judge":
            return self.model_copy(update={"use_judge": False})
        if name == "shared-fewshots":
            return self.model_copy(update={"few_shot_mode": "shared"})
        if name == "no-planner":
            return self.model_copy(update={"use_planner": False})
        if name == "no-answers":
            return self.model_copy(update={"agents": [a for a in self.agents if not a.use_answers]})
        if name == "no-embeddings":
            return self.model_copy(update={"agents": [a for a in self.agents if not a.use_embeddings]})
        if name.startswith("agents="):
            wanted = [n.strip() for n in name.split("=", 1)[1].split(",") if n.strip()]
            known = {a.name: a for a in self.agents}
            unknown = [n for n in wanted if n not in known]
            if unknown or not wanted:
                raise ConfigError(f"Unknown agents in ablation '{name}': {unknown}")
            return self.model_copy(update={"agents": [known[n] for n in wanted]})
        raise ConfigError(f"Unknown ablation '{name}'. Expected one of {', '.join(ABLATIONS)} or agents=<list>")


class DatasetSpec(BaseModel):
    """
    Evaluation dataset. bank: corpus_path + labels_path (JSON-lines).
    lcqmc: lcqmc_path (TSV q1, q2, label). fiqa: questions/answers/links
    (+ optional variations) JSON-lines files.
    """
    format: Literal["bank", "lcqmc", "fiqa"] = "bank"
    corpus_path: Optional[str] = None
    labels_path: Optional[str] = None
    lcqmc_path: Optional[str] = None
    fiqa_questions_path: Optional[str] = None
    fiqa_answers_path: Optional[str] = None
    fiqa_links_path: Optional[str] = None
    fiqa_variations_path: Optional[str] = None
    training_path: Optional[str] = None
    sample_size: Optional[int] = Field(default=None, ge=1)

    def input_paths(self) -> List[str]:
        return [p for p in (
            self.corpus_path, self.labels_path, self.lcqmc_path, self.fiqa_questions_path,
            self.fiqa_answers_path, self.fiqa_links_path, self.fiqa_variations_path, self.training_path,
        ) if p]


class ServiceConfig(BaseModel):
    host: str = "0.0.0.0"
    port: int = 8001
    max_concurrency: int = Field(default=8, ge=1)


class RunConfig(BaseModel):
    """
    The single JSON run configuration shared by every subcommand.
    """
    corpus_path: Optional[str] = None
    dataset: Optional[DatasetSpec] = None
    backend: BackendConfig = Field(default_factory=BackendConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    cache_path: Optional[str] = "data/cache/annotations.jsonl"
    index_dir: str = "data/index"
    training_path: Optional[str] = None
    seed: int = 42
    output_dir: str = "reports"
    audit_log: bool = False
    eval_workers: int = Field(default=4, ge=1)
    service: ServiceConfig = Field(default_factory=ServiceConfig)

    @model_validator(mode="after")
    def _default_corpus(self):
        if self.corpus_path is None and self.dataset is not None:
            self.corpus_path = self.dataset.corpus_path
        return self

    def check_paths(self) -> None:
        missing = [p for p in self._input_paths() if not Path(p).exists()]
        if missing:
            raise ConfigError(f"Config references missing files: {', '.join(missing)}")

    def _input_paths(self) -> List[str]:
        paths = [p for p in (self.corpus_path, self.training_path) if p]
        if self.dataset is not None:
            paths.extend(self.dataset.input_paths())
        if self.backend.kind == "replay" and self.backend.replay_path:
            paths.append(self.backend.replay_path)
        if self.backend.kind == "scripted" and self.backend.script_path:
            paths.append(self.backend.script_path)
        return list(dict.fromkeys(paths))


def load_run_config(path: Optional[str] = None, check_paths: bool = True) -> RunConfig:
    """
    Load and validate the JSON run configuration.
    """
    config_path = Path(path or DEFAULT_CONFIG_PATH)
    logger.info(f"Loading run config from {config_path}")
    try:
        raw = config_path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {config_path}: {e}") from e
    try:
        config = RunConfig.model_validate_json(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config file {config_path}: {e}") from e
    if check_paths:
        config.check_paths()
    return config
