# Backend/app/runtime.py
from dataclasses import dataclass, field
from typing import List, Optional

from loguru import logger

from app.core.config import RunConfig
from app.core.errors import ConfigError
from app.core.models import FaqCorpus, FewShotExample, LabeledUtterance
from app.evaluation.datasets import load_corpus_jsonl, load_dataset, load_labels_jsonl
from app.pipeline.agents import few_shots_from_labeled
from app.pipeline.orchestrator import AnnotationPipeline, pipeline_from_config
from app.utils.llm_utils import LLMGateway, build_gateway


@dataclass
class Runtime:
    """Everything a command or the service needs, loaded once from a RunConfig."""
    config: RunConfig
    corpus: FaqCorpus
    gateway: LLMGateway
    training: List[FewShotExample] = field(default_factory=list)
    test: List[LabeledUtterance] = field(default_factory=list)
    training_labels: List[LabeledUtterance] = field(default_factory=list)
    _pipeline: Optional[AnnotationPipeline] = None

    @property
    def pipeline(self) -> AnnotationPipeline:
        if self._pipeline is None:
            self._pipeline = pipeline_from_config(self.config, self.corpus, self.gateway, self.training)
        return self._pipeline


def load_corpus_and_labels(config: RunConfig, gateway=None):
    if config.dataset is not None:
        return load_dataset(config.dataset, gateway=gateway, seed=config.seed)
    if not config.corpus_path:
        raise ConfigError("Config needs corpus_path or a dataset section")
    return load_corpus_jsonl(config.corpus_path), []


def create_runtime(config: RunConfig, backend=None) -> Runtime:
    """
    Build the gateway, load corpus, test labels and training examples. The
    pipeline itself (indexes, cache) is assembled on first use.
    """
    gateway = build_gateway(config.backend, backend)
    corpus, test = load_corpus_and_labels(config, gateway)
    training_path = config.training_path or (config.dataset.training_path if config.dataset else None)
    training_labels = load_labels_jsonl(training_path, corpus) if training_path else []
    training = few_shots_from_labeled(training_labels, corpus)
    logger.info(f"Runtime ready: {len(corpus)} FAQs, {len(training)} training examples, "
                f"{len(test)} test utterances, backend={gateway.kind}")
    return Runtime(config=config, corpus=corpus, gateway=gateway, training=training,
                   test=test, training_labels=training_labels)
