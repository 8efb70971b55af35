# Backend/app/pipeline/orchestrator.py
import json
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from app.core.config import PipelineConfig, RunConfig, audit_logger
from app.core.errors import AgentFailed, GatewayError, JudgeFailed, NoCandidates
from app.core.models import (
    AgentSpec,
    AnnotationResult,
    Candidate,
    FaqCorpus,
    FewShotExample,
    JudgeVerdict,
    RankedList,
    UserQuery,
    normalize_utterance,
    rank_key,
)
from app.pipeline.agents import plan_query, prepare_agents, ranker_predict
from app.pipeline.judge import fallback_average, meta_judge
from app.utils.retrieval_utils import EmbeddingIndex, embed_query, load_or_build_indexes


def _elapsed_ms(started: float) -> float:
    return (time.perf_counter() - started) * 1000.0


def dedup_max_score(all_candidates: Sequence[Candidate]) -> List[Candidate]:
    """
    Keep one candidate per FAQ: the highest-scoring instance, the first
    listed one on equal scores. Output follows the score/faq_id rank order.
    """
    best: Dict[str, Candidate] = {}
    for cand in all_candidates:
        current = best.get(cand.faq_id)
        if current is None or cand.score > current.score:
            best[cand.faq_id] = cand
    return sorted(best.values(), key=rank_key)


class ResultCache:
    """
    Final annotation results keyed by normalized utterance, persisted as
    JSON-lines {normalized_utterance, result}. Access is serialized. When the
    file cannot be written the entry is not kept, so the pipeline behaves as
    uncached.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = Path(path) if path else None
        self._entries: Dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        try:
            with self.path.open("r", encoding="utf-8") as f:
                for line in f:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    self._entries[record["normalized_utterance"]] = record["result"]
            logger.info(f"Loaded {len(self._entries)} cached annotations from {self.path}")
        except (OSError, json.JSONDecodeError, KeyError) as e:
            logger.warning(f"Ignoring unreadable cache file {self.path}: {e}")

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, serialized: str) -> bool:
        with self._lock:
            if self.path is not None:
                try:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    with self.path.open("a", encoding="utf-8") as f:
                        f.write(json.dumps({"normalized_utterance": key, "result": serialized}, ensure_ascii=False) + "\n")
                except OSError as e:
                    logger.warning(f"Cache write to {self.path} failed, continuing uncached: {e}")
                    return False
            self._entries[key] = serialized
            return True


@dataclass
class AnnotationPipeline:
    """
    The full annotation flow: plan, fan out to the ranker agents, deduplicate,
    judge (or fall back to averaging) and keep the top results.
    """
    corpus: FaqCorpus
    gateway: object
    cfg: PipelineConfig
    agents: List[AgentSpec]
    indexes: Dict[bool, EmbeddingIndex] = field(default_factory=dict)
    judge_few_shots: Tuple[FewShotExample, ...] = ()
    cache: Optional[ResultCache] = None
    audit: bool = False

    def _index_for(self, agent: AgentSpec) -> Optional[EmbeddingIndex]:
        if not agent.use_embeddings:
            return None
        index = self.indexes.get(agent.use_answers)
        if index is None:
            raise ValueError(f"No embedding index (with_answers={agent.use_answers}) for agent '{agent.name}'")
        return index

    def _run_agent(self, agent: AgentSpec, query: UserQuery,
                   query_vec: Optional[np.ndarray]) -> Tuple[Tuple[Candidate, ...], float, Optional[AgentFailed]]:
        started = time.perf_counter()
        try:
            preds = ranker_predict(agent, query, self.corpus, self._index_for(agent), self.gateway, self.cfg, query_vec)
        except AgentFailed as e:
            logger.warning(f"{e}; contributing no candidates")
            return (), _elapsed_ms(started), e
        return tuple(preds), _elapsed_ms(started), None

    def map_utterance(self, query: UserQuery, request_id: Optional[str] = None) -> AnnotationResult:
        rid = request_id or uuid.uuid4().hex[:8]
        started = time.perf_counter()
        stages: Dict[str, float] = {}

        if self.cfg.use_planner:
            t0 = time.perf_counter()
            query = plan_query(query, self.gateway, self.cfg.planner_temperature, self.cfg.repair_unparseable)
            stages["planner"] = _elapsed_ms(t0)

        query_vec = None
        if any(agent.use_embeddings for agent in self.agents):
            t0 = time.perf_counter()
            try:
                query_vec = embed_query(self.gateway, query.retrieval_text(self.cfg.expansion_in_embedding))
            except Exception as e:
                logger.warning(f"RID: {rid} - Query embedding failed ({e}); embedding agents will retry individually")
            stages["query_embedding"] = _elapsed_ms(t0)

        t0 = time.perf_counter()
        if self.cfg.parallel and len(self.agents) > 1:
            workers = self.cfg.max_workers or len(self.agents)
            with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="agent") as pool:
                futures = [pool.submit(self._run_agent, agent, query, query_vec) for agent in self.agents]
                outcomes = [future.result() for future in futures]
        else:
            outcomes = [self._run_agent(agent, query, query_vec) for agent in self.agents]
        stages["agents"] = _elapsed_ms(t0)

        agent_preds: Dict[str, Tuple[Candidate, ...]] = {}
        per_agent_latency: Dict[str, float] = {}
        all_candidates: List[Candidate] = []
        failures: List[AgentFailed] = []
        for agent, (preds, latency, error) in zip(self.agents, outcomes):
            if error is not None:
                failures.append(error)
            agent_preds[agent.name] = preds
            per_agent_latency[agent.name] = latency
            all_candidates.extend(preds)

        t0 = time.perf_counter()
        unique = dedup_max_score(all_candidates)
        stages["dedup"] = _elapsed_ms(t0)
        if not unique:
            # The cause marks a backend outage only when it took down every agent
            gateway_down = len(failures) == len(self.agents) and all(isinstance(f.cause, GatewayError) for f in failures)
            if gateway_down:
                cause = failures[0].cause
                logger.error(f"RID: {rid} - Every agent lost the backend: {cause}")
            else:
                cause = next((f.cause for f in failures if not isinstance(f.cause, GatewayError)), None)
            raise NoCandidates(f"No agent produced candidates for '{query.normalized}'") from cause

        t0 = time.perf_counter()
        verdict = self._judge(query, unique, agent_preds, rid)
        stages["judge"] = _elapsed_ms(t0)

        if len(verdict.ranked) > self.cfg.top_k_out:
            ranked = RankedList[Candidate](items=verdict.ranked.items[:self.cfg.top_k_out], k=self.cfg.top_k_out)
            verdict = verdict.model_copy(update={"ranked": ranked})

        result = AnnotationResult(
            utterance=query.normalized,
            verdict=verdict,
            per_agent_latency_ms=per_agent_latency,
            stage_latency_ms=stages,
            total_latency_ms=_elapsed_ms(started),
            cache_hit=False,
            agent_preds=agent_preds,
        )
        logger.info(f"RID: {rid} - '{query.normalized}' -> {verdict.ranked.faq_ids} "
                    f"({verdict.mode.value}, {result.total_latency_ms:.0f} ms)")
        if self.audit:
            self._write_audit(rid, query, result)
        return result

    def _judge(self, query: UserQuery, unique: List[Candidate],
               agent_preds: Dict[str, Tuple[Candidate, ...]], rid: str) -> JudgeVerdict:
        if self.cfg.use_judge:
            try:
                return meta_judge(query, unique, agent_preds, self.judge_few_shots, self.corpus,
                                  self.gateway, self.cfg.judge_samples, self.cfg)
            except JudgeFailed as e:
                logger.warning(f"RID: {rid} - {e}; falling back to average agent scores")
        return fallback_average(agent_preds, k=self.cfg.top_k_out, mode=self.cfg.fallback_mode)

    def _write_audit(self, rid: str, query: UserQuery, result: AnnotationResult) -> None:
        record = {
            "request_id": rid,
            "query": query.model_dump(mode="json"),
            "agent_outputs": {name: [c.model_dump(mode="json") for c in preds]
                              for name, preds in result.agent_preds.items()},
            "verdict": result.verdict.to_payload(self.corpus),
            "latencies": {
                "per_agent_ms": result.per_agent_latency_ms,
                "stages_ms": result.stage_latency_ms,
                "total_ms": result.total_latency_ms,
            },
        }
        audit_logger.info(json.dumps(record, ensure_ascii=False))

    def annotate_with_cache(self, raw_utterance: str, use_cache: bool = True) -> AnnotationResult:
        """
        Normalize, answer from the result cache when possible, otherwise run
        the pipeline and store the result.
        """
        query = normalize_utterance(raw_utterance)
        cache = self.cache if (use_cache and self.cfg.cache_enabled) else None
        if cache is not None:
            stored = cache.get(query.normalized)
            if stored is not None:
                logger.info(f"Cache hit for '{query.normalized}'")
                return AnnotationResult.model_validate_json(stored).model_copy(update={"cache_hit": True})
        result = self.map_utterance(query)
        if cache is not None:
            cache.put(query.normalized, result.model_dump_json())
        return result


def build_pipeline(
    corpus: FaqCorpus,
    gateway,
    cfg: PipelineConfig,
    training: Sequence[FewShotExample] = (),
    seed: int = 42,
    index_dir: Optional[str] = None,
    indexes: Optional[Dict[bool, EmbeddingIndex]] = None,
    cache_path: Optional[str] = None,
    audit: bool = False,
) -> AnnotationPipeline:
    """
    Assemble a pipeline: attach few-shot examples, load or build the
    embedding indexes the roster needs and open the result cache.
    """
    agents = prepare_agents(cfg, training, seed)
    needed = tuple(sorted({agent.use_answers for agent in agents if agent.use_embeddings}))
    if indexes is None:
        indexes = load_or_build_indexes(corpus, gateway, index_dir, needed) if needed else {}
    judge_few_shots = tuple(dict.fromkeys(shot for agent in agents for shot in agent.few_shots))
    cache = ResultCache(cache_path) if cfg.cache_enabled else None
    return AnnotationPipeline(
        corpus=corpus, gateway=gateway, cfg=cfg, agents=agents, indexes=dict(indexes),
        judge_few_shots=judge_few_shots, cache=cache, audit=audit,
    )


def pipeline_from_config(config: RunConfig, corpus: FaqCorpus, gateway,
                         training: Sequence[FewShotExample] = ()) -> AnnotationPipeline:
    return build_pipeline(
        corpus, gateway, config.pipeline,
        training=training, seed=config.seed, index_dir=config.index_dir,
        cache_path=config.cache_path, audit=config.audit_log,
    )
