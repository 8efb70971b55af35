# Backend/app/evaluation/runner.py
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field

from app.core.config import PipelineConfig, RunConfig
from app.core.errors import EmptyRuns, FaqAnnotationError
from app.core.models import EvalReport, FaqCorpus, FewShotExample, LabeledUtterance, normalize_utterance
from app.evaluation.metrics import Run, metric_summary
from app.pipeline.orchestrator import AnnotationPipeline, build_pipeline
from app.utils.retrieval_utils import (
    EmbeddingIndex,
    build_bm25_index,
    bm25_top_k,
    cosine_top_k,
    embed_query,
    load_or_build_indexes,
)

BASELINE_K = 5


class LatencyRow(BaseModel):
    configuration: str
    mean_ms: float
    p95_ms: float
    n: int


class BenchmarkReport(BaseModel):
    """Main method first, then extra configurations and retrieval baselines."""
    dataset: str
    rows: List[EvalReport]
    latency: List[LatencyRow] = Field(default_factory=list)

    @property
    def main(self) -> EvalReport:
        return self.rows[0]

    def to_json(self) -> str:
        """Metrics only; timing is excluded so identical runs serialize identically."""
        payload = {
            "dataset": self.dataset,
            "reports": [row.model_dump(exclude={"latency_mean_ms", "latency_p95_ms"}) for row in self.rows],
        }
        return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)

    def timing_json(self) -> str:
        payload = {
            "per_method": {row.method: {"mean_ms": row.latency_mean_ms, "p95_ms": row.latency_p95_ms} for row in self.rows},
            "latency": [row.model_dump() for row in self.latency],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _latency_stats(latencies: Sequence[float]) -> Tuple[float, float]:
    if not latencies:
        return 0.0, 0.0
    values = np.asarray(latencies, dtype=np.float64)
    return float(values.mean()), float(np.percentile(values, 95))


def _report(method: str, runs: List[Run], errors: int, latencies: Sequence[float]) -> EvalReport:
    mean_ms, p95_ms = _latency_stats(latencies)
    return EvalReport(method=method, n=len(runs), errors=errors,
                      latency_mean_ms=mean_ms, latency_p95_ms=p95_ms, **metric_summary(runs))


def evaluate_pipeline(
    pipeline: AnnotationPipeline,
    labeled: Sequence[LabeledUtterance],
    method: str = "MAFA",
    workers: int = 4,
    use_cache: bool = True,
) -> EvalReport:
    """
    Annotate every labeled utterance and score the rankings. A failed
    utterance counts as an empty ranking; the run fails only when every
    utterance fails.
    """
    if not labeled:
        raise EmptyRuns()

    def annotate(item: LabeledUtterance):
        try:
            return pipeline.annotate_with_cache(item.utterance, use_cache=use_cache), None
        except FaqAnnotationError as e:
            logger.warning(f"[{method}] '{item.utterance}' failed: {e}")
            return None, e

    with ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="eval") as pool:
        outcomes = list(pool.map(annotate, labeled))

    failures = [error for result, error in outcomes if error is not None]
    if len(failures) == len(labeled):
        raise failures[0]
    runs: List[Run] = []
    latencies: List[float] = []
    for item, (result, _) in zip(labeled, outcomes):
        ranking = result.verdict.ranked.faq_ids if result is not None else []
        runs.append((ranking, item.gold_ids, item.graded))
        if result is not None and not result.cache_hit:
            latencies.append(result.total_latency_ms)
    report = _report(method, runs, len(failures), latencies)
    logger.info(f"[{method}] top1={report.top1:.3f} top5={report.top5:.3f} mrr={report.mrr:.3f} "
                f"({report.errors} errors over {report.n})")
    return report


def evaluate_bm25(corpus: FaqCorpus, labeled: Sequence[LabeledUtterance], with_answers: bool = False) -> EvalReport:
    index = build_bm25_index(corpus, with_answers=with_answers)
    runs: List[Run] = []
    latencies: List[float] = []
    for item in labeled:
        started = time.perf_counter()
        hits = bm25_top_k(index, normalize_utterance(item.utterance), BASELINE_K)
        latencies.append((time.perf_counter() - started) * 1000.0)
        runs.append((hits.faq_ids, item.gold_ids, item.graded))
    return _report("BM25", runs, 0, latencies)


def evaluate_embedding(index: EmbeddingIndex, gateway, labeled: Sequence[LabeledUtterance]) -> EvalReport:
    method = "Embedding-Only (Q+A)" if index.with_answers else "Embedding-Only (Q)"
    runs: List[Run] = []
    latencies: List[float] = []
    errors = 0
    for item in labeled:
        started = time.perf_counter()
        try:
            hits = cosine_top_k(index, embed_query(gateway, normalize_utterance(item.utterance).normalized), BASELINE_K)
            ranking = hits.faq_ids
        except FaqAnnotationError as e:
            logger.warning(f"[{method}] '{item.utterance}' failed: {e}")
            ranking, errors = [], errors + 1
        latencies.append((time.perf_counter() - started) * 1000.0)
        runs.append((ranking, item.gold_ids, item.graded))
    return _report(method, runs, errors, latencies)


def single_agent_configs(cfg: PipelineConfig) -> List[Tuple[str, PipelineConfig]]:
    """One judge-less configuration per roster agent; the direct agent doubles as the Direct LLM row."""
    configs = []
    for agent in cfg.agents:
        label = "Direct LLM" if agent.name == "direct" else f"Single Agent ({agent.name})"
        configs.append((label, cfg.model_copy(update={"agents": [agent], "use_judge": False})))
    return configs


def main_method_label(cfg: PipelineConfig) -> str:
    return "MAFA (Standard)" if cfg.few_shot_mode == "shared" else "MAFA (Specialized)"


def evaluate_run(
    corpus: FaqCorpus,
    labeled: Sequence[LabeledUtterance],
    config: RunConfig,
    gateway,
    training: Sequence[FewShotExample] = (),
    extra_methods: Sequence[Tuple[str, PipelineConfig]] = (),
    baselines: bool = True,
    use_cache: bool = True,
    dataset_name: str = "dataset",
    indexes: Optional[Dict[bool, EmbeddingIndex]] = None,
) -> BenchmarkReport:
    """
    Evaluate the configured pipeline, any extra configurations and the
    retrieval baselines on the same labeled utterances.
    """
    if not labeled:
        raise EmptyRuns()
    if indexes is None:
        indexes = _indexes_for_evaluation(corpus, gateway, config, baselines, extra_methods)

    main_pipeline = build_pipeline(
        corpus, gateway, config.pipeline, training=training, seed=config.seed,
        indexes=indexes, cache_path=config.cache_path, audit=config.audit_log,
    )
    rows = [evaluate_pipeline(main_pipeline, labeled, main_method_label(config.pipeline),
                              config.eval_workers, use_cache)]

    for label, cfg in extra_methods:
        # Extra configurations keep an in-memory cache only
        pipeline = build_pipeline(corpus, gateway, cfg, training=training, seed=config.seed, indexes=indexes)
        rows.append(evaluate_pipeline(pipeline, labeled, label, config.eval_workers, use_cache))

    if baselines:
        rows.append(evaluate_bm25(corpus, labeled))
        for with_answers in (False, True):
            if with_answers in indexes:
                rows.append(evaluate_embedding(indexes[with_answers], gateway, labeled))
    return BenchmarkReport(dataset=dataset_name, rows=rows)


def _indexes_for_evaluation(corpus, gateway, config: RunConfig, baselines: bool,
                            extra_methods: Sequence[Tuple[str, PipelineConfig]]) -> Dict[bool, EmbeddingIndex]:
    pipeline_needed = {a.use_answers for a in config.pipeline.agents if a.use_embeddings}
    for _, cfg in extra_methods:
        pipeline_needed |= {a.use_answers for a in cfg.agents if a.use_embeddings}
    needed = pipeline_needed | ({False, True} if baselines else set())
    if not needed:
        return {}
    try:
        return load_or_build_indexes(corpus, gateway, config.index_dir, tuple(sorted(needed)))
    except FaqAnnotationError as e:
        if pipeline_needed:
            raise
        logger.warning(f"Embedding indexes unavailable, skipping embedding baselines: {e}")
        return {}


def measure_latency(
    corpus: FaqCorpus,
    utterances: Sequence[str],
    config: RunConfig,
    gateway,
    training: Sequence[FewShotExample] = (),
    indexes: Optional[Dict[bool, EmbeddingIndex]] = None,
) -> List[LatencyRow]:
    """
    Uncached end-to-end latency of the pipeline run sequentially and in
    parallel, plus a single direct agent for reference.
    """
    if not utterances:
        raise EmptyRuns()
    base = config.pipeline
    configurations = [
        ("MAFA (Sequential)", base.model_copy(update={"parallel": False})),
        ("MAFA (Parallel)", base.model_copy(update={"parallel": True})),
    ]
    direct = [a for a in base.agents if a.name == "direct"] or base.agents[:1]
    configurations.append(("Single Agent", base.model_copy(update={"agents": direct, "use_judge": False})))

    if indexes is None:
        needed = tuple(sorted({a.use_answers for a in base.agents if a.use_embeddings}))
        indexes = load_or_build_indexes(corpus, gateway, config.index_dir, needed) if needed else {}

    rows = []
    for label, cfg in configurations:
        pipeline = build_pipeline(corpus, gateway, cfg.model_copy(update={"cache_enabled": False}),
                                  training=training, seed=config.seed, indexes=indexes)
        latencies = []
        for utterance in utterances:
            try:
                latencies.append(pipeline.annotate_with_cache(utterance, use_cache=False).total_latency_ms)
            except FaqAnnotationError as e:
                logger.warning(f"[{label}] '{utterance}' failed: {e}")
        mean_ms, p95_ms = _latency_stats(latencies)
        rows.append(LatencyRow(configuration=label, mean_ms=mean_ms, p95_ms=p95_ms, n=len(latencies)))
        logger.info(f"[{label}] mean latency {mean_ms:.0f} ms over {len(latencies)} utterances")
    return rows


# --- Rendering ---
METRIC_COLUMNS = {
    "method": "Method",
    "top1": "Top-1 Acc",
    "top3": "Top-3 Acc",
    "top5": "Top-5 Acc",
    "mrr": "MRR",
    "ndcg3": "NDCG@3",
    "ndcg5": "NDCG@5",
}


def render_table(report: BenchmarkReport) -> str:
    frame = pd.DataFrame([row.model_dump() for row in report.rows])
    table = frame[list(METRIC_COLUMNS)].rename(columns=METRIC_COLUMNS)
    text = table.to_string(index=False, float_format=lambda v: f"{v:.3f}")
    if report.latency:
        latency = pd.DataFrame([row.model_dump() for row in report.latency]).rename(columns={
            "configuration": "Configuration", "mean_ms": "Mean Latency (ms)", "p95_ms": "P95 (ms)", "n": "N",
        })
        text += "\n\n" + latency.to_string(index=False, float_format=lambda v: f"{v:.0f}")
    return text


def write_reports(report: BenchmarkReport, output_dir: str, stem: str = "report") -> Dict[str, Path]:
    target = Path(output_dir)
    target.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": target / f"{stem}.txt",
        "json": target / f"{stem}.json",
        "timing": target / f"{stem}.timing.json",
    }
    paths["table"].write_text(render_table(report) + "\n", encoding="utf-8")
    paths["json"].write_text(report.to_json() + "\n", encoding="utf-8")
    paths["timing"].write_text(report.timing_json() + "\n", encoding="utf-8")
    logger.info(f"Wrote reports to {target}")
    return paths
