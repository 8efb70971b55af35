# Backend/app/pipeline/agents.py
import random
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
from loguru import logger

from app.core.config import PipelineConfig
from app.core.errors import AgentFailed, FaqAnnotationError, InsufficientTraining
from app.core.models import (
    AgentSpec,
    Candidate,
    FaqCorpus,
    FewShotExample,
    FewShotPlan,
    LabeledUtterance,
    PlannerResponse,
    UserQuery,
    normalize_text,
)
from app.utils.prompt_utils import build_planner_prompt, build_ranker_prompt, request_structured
from app.utils.retrieval_utils import EmbeddingIndex, cosine_top_k, embed_query

FewShotMode = Literal["disjoint", "independent", "shared"]


def few_shots_from_labeled(labeled: Sequence[LabeledUtterance], corpus: FaqCorpus) -> List[FewShotExample]:
    """Training utterances rendered as (utterance, title of the first gold FAQ)."""
    return [
        FewShotExample(utterance=item.utterance, gold_title=corpus.title(item.gold_ids[0]))
        for item in labeled
        if item.gold_ids[0] in corpus.by_id
    ]


def select_few_shots(
    training: Sequence[FewShotExample],
    n_agents: int,
    per_agent: int,
    seed: int,
    agent_names: Optional[Sequence[str]] = None,
    mode: FewShotMode = "disjoint",
) -> FewShotPlan:
    """
    Sample few-shot examples for every agent with a seeded generator.

    disjoint: n_agents * per_agent distinct examples split into disjoint sets.
    independent: each agent samples its own set; sets may overlap.
    shared: a single set reused by every agent.
    """
    names = list(agent_names) if agent_names is not None else [f"agent_{i}" for i in range(n_agents)]
    if len(names) != n_agents:
        raise ValueError("agent_names must have n_agents entries")
    pool = list(dict.fromkeys(training))
    rng = random.Random(seed)
    required = n_agents * per_agent if mode == "disjoint" else per_agent
    if len(pool) < required:
        raise InsufficientTraining(len(pool), required)

    per_agent_sets: Dict[str, tuple] = {}
    if mode == "disjoint":
        drawn = rng.sample(pool, n_agents * per_agent)
        for i, name in enumerate(names):
            per_agent_sets[name] = tuple(drawn[i * per_agent:(i + 1) * per_agent])
    elif mode == "independent":
        for name in names:
            per_agent_sets[name] = tuple(rng.sample(pool, per_agent))
    else:
        shared = tuple(rng.sample(pool, per_agent))
        per_agent_sets = {name: shared for name in names}
    return FewShotPlan(per_agent=per_agent_sets, seed=seed)


def assign_few_shots(agents: Sequence[AgentSpec], plan: FewShotPlan) -> List[AgentSpec]:
    return [agent.model_copy(update={"few_shots": plan.per_agent.get(agent.name, ())}) for agent in agents]


def prepare_agents(cfg: PipelineConfig, training: Sequence[FewShotExample], seed: int) -> List[AgentSpec]:
    """Attach few-shot examples to the configured roster."""
    if not training or cfg.few_shots_per_agent == 0:
        if cfg.few_shots_per_agent:
            logger.warning("No training examples available; agents run without few-shot examples")
        return list(cfg.agents)
    plan = select_few_shots(
        training,
        n_agents=len(cfg.agents),
        per_agent=cfg.few_shots_per_agent,
        seed=seed,
        agent_names=[agent.name for agent in cfg.agents],
        mode=cfg.few_shot_mode,
    )
    return assign_few_shots(cfg.agents, plan)


def plan_query(query: UserQuery, gateway, temperature: float = 0.1, repair: bool = True) -> UserQuery:
    """
    Fill intent analysis and expansion terms from the planner. Any failure
    returns the query unchanged.
    """
    try:
        response: PlannerResponse = request_structured(
            gateway, build_planner_prompt(query, temperature=temperature), "planner", repair=repair
        )
    except Exception as e:
        logger.warning(f"Query planner failed for '{query.normalized}', continuing without expansion: {e}")
        return query
    terms = tuple(dict.fromkeys(t for t in (normalize_text(term) for term in response.expansion_terms) if t))
    logger.debug(f"Planner: '{query.normalized}' -> intent={response.intent!r}, terms={list(terms)}")
    return query.model_copy(update={
        "intent_analysis": response.intent,
        "category": response.category or None,
        "expansion_terms": terms,
    })


def ranker_predict(
    spec: AgentSpec,
    query: UserQuery,
    corpus: FaqCorpus,
    emb_index: Optional[EmbeddingIndex],
    gateway,
    cfg: Optional[PipelineConfig] = None,
    query_vec: Optional[np.ndarray] = None,
) -> List[Candidate]:
    """
    Run one ranker agent. Embedding variants rank a cosine-curated pool of
    ``candidate_pool_size`` FAQs; direct variants see the whole corpus.
    Any failure is raised as AgentFailed.
    """
    cfg = cfg or PipelineConfig()
    if spec.use_embeddings != (emb_index is not None):
        raise ValueError(f"Agent '{spec.name}': embedding index must be given iff the agent uses embeddings")
    try:
        if spec.use_embeddings:
            if query_vec is None:
                query_vec = embed_query(gateway, query.retrieval_text(cfg.expansion_in_embedding))
            pool = cosine_top_k(emb_index, query_vec, spec.candidate_pool_size)
            faqs = [corpus.by_id[faq_id] for faq_id in pool.faq_ids]
        else:
            faqs = list(corpus.entries)
        bundle = build_ranker_prompt(
            spec.use_answers,
            query,
            faqs,
            spec.few_shots,
            temperature=cfg.ranker_temperature,
            budget=cfg.prompt_budget_chars,
            answer_words=cfg.answer_truncate_words,
            tag=f"ranker:{spec.name}",
        )
        response = request_structured(
            gateway, bundle, "ranker", corpus,
            repair=cfg.repair_unparseable,
            allowed_ids=[faq.id for faq in faqs],
        )
    except FaqAnnotationError as e:
        raise AgentFailed(spec.name, e) from e
    except Exception as e:
        logger.exception(f"Unexpected error in agent '{spec.name}'")
        raise AgentFailed(spec.name, e) from e

    candidates = [
        Candidate(faq_id=match.faq_id, score=match.relevance_score, reasoning=match.reasoning, source_agent=spec.name)
        for match in response.relevant_faqs
    ]
    logger.debug(f"Agent '{spec.name}' proposed {[c.faq_id for c in candidates]} "
                 f"(confidence {response.confidence_in_mapping.value})")
    return candidates
