# Backend/app/pipeline/judge.py
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from itertools import combinations
from typing import Dict, List, Literal, Mapping, Optional, Sequence

from loguru import logger

from app.core.config import PipelineConfig
from app.core.errors import JudgeFailed, NoCandidates
from app.core.models import (
    Candidate,
    FaqCorpus,
    FewShotExample,
    JudgeResponse,
    JudgeVerdict,
    RankedList,
    UserQuery,
    VerdictMode,
    rank_key,
)
from app.utils.prompt_utils import build_judge_prompt, request_structured

JUDGE_AGENT = "judge"
FALLBACK_AGENT = "fallback"


def judge_rerank(
    query: UserQuery,
    candidates: Sequence[Candidate],
    agent_preds: Mapping[str, Sequence[Candidate]],
    few_shots: Sequence[FewShotExample],
    corpus: FaqCorpus,
    gateway,
    cfg: Optional[PipelineConfig] = None,
    tag: str = "judge",
) -> JudgeVerdict:
    """
    One judge pass over the deduplicated candidates. Titles outside the
    candidate set are dropped; missing slots are backfilled from the
    candidates' own scores in rank order.
    """
    cfg = cfg or PipelineConfig()
    if not candidates:
        raise NoCandidates("Judge needs at least one candidate")
    expected = min(5, len(candidates))
    try:
        bundle = build_judge_prompt(
            query, candidates, agent_preds, few_shots, corpus,
            temperature=cfg.judge_temperature,
            budget=cfg.prompt_budget_chars,
            answer_words=cfg.answer_truncate_words,
            tag=tag,
        )
        response: JudgeResponse = request_structured(
            gateway, bundle, "judge", corpus,
            repair=cfg.repair_unparseable,
            allowed_ids=[c.faq_id for c in candidates],
            expected_count=expected,
        )
    except Exception as e:
        logger.warning(f"Judge pass '{tag}' failed for '{query.normalized}': {e}")
        raise JudgeFailed(e) from e

    judged = [
        Candidate(faq_id=m.faq_id, score=m.relevance_score, reasoning=m.reasoning, source_agent=JUDGE_AGENT)
        for m in response.reranked_faqs
    ]
    if len(judged) < expected:
        present = {c.faq_id for c in judged}
        backfill = [c for c in sorted(candidates, key=rank_key) if c.faq_id not in present]
        logger.info(f"Judge returned {len(judged)} usable FAQs; backfilling {expected - len(judged)} from agent scores")
        judged.extend(backfill[:expected - len(judged)])
    return JudgeVerdict(ranked=RankedList[Candidate].from_items(judged, k=expected), mode=VerdictMode.JUDGED)


def rank_agreement(first: Sequence[str], second: Sequence[str]) -> float:
    """
    Kendall-tau style concordance over item pairs ranked by both lists:
    (concordant - discordant) / pairs. Fewer than two shared items gives 0.
    """
    pos_a = {faq_id: i for i, faq_id in enumerate(first)}
    pos_b = {faq_id: i for i, faq_id in enumerate(second)}
    shared = [faq_id for faq_id in first if faq_id in pos_b]
    pairs = list(combinations(shared, 2))
    if not pairs:
        return 0.0
    concordant = sum(1 for x, y in pairs if (pos_a[x] - pos_a[y]) * (pos_b[x] - pos_b[y]) > 0)
    return (2 * concordant - len(pairs)) / len(pairs)


def select_most_consistent(verdicts: Sequence[JudgeVerdict]) -> int:
    """Index of the verdict with the highest mean agreement with the others (lowest index on ties)."""
    if len(verdicts) == 1:
        return 0
    rankings = [v.ranked.faq_ids for v in verdicts]
    best_index, best_score = 0, float("-inf")
    for i, ranking in enumerate(rankings):
        others = [rank_agreement(ranking, other) for j, other in enumerate(rankings) if j != i]
        mean = sum(others) / len(others)
        if mean > best_score:
            best_index, best_score = i, mean
    return best_index


def meta_judge(
    query: UserQuery,
    candidates: Sequence[Candidate],
    agent_preds: Mapping[str, Sequence[Candidate]],
    few_shots: Sequence[FewShotExample],
    corpus: FaqCorpus,
    gateway,
    n_samples: int,
    cfg: Optional[PipelineConfig] = None,
) -> JudgeVerdict:
    """
    Judge-as-a-judge: collect ``n_samples`` independent verdicts and keep the
    one that agrees most with the rest.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = cfg or PipelineConfig()
    if n_samples == 1:
        return judge_rerank(query, candidates, agent_preds, few_shots, corpus, gateway, cfg)

    def sample(index: int) -> Optional[JudgeVerdict]:
        try:
            return judge_rerank(query, candidates, agent_preds, few_shots, corpus, gateway, cfg, tag=f"judge:{index}")
        except JudgeFailed:
            return None

    if cfg.parallel:
        with ThreadPoolExecutor(max_workers=n_samples, thread_name_prefix="judge") as pool:
            results = list(pool.map(sample, range(n_samples)))
    else:
        results = [sample(i) for i in range(n_samples)]

    verdicts = [v for v in results if v is not None]
    if not verdicts:
        raise JudgeFailed(f"all {n_samples} judge samples failed")
    chosen = verdicts[select_most_consistent(verdicts)]
    logger.debug(f"Meta-judge kept 1 of {len(verdicts)} verdicts for '{query.normalized}'")
    return chosen.model_copy(update={"mode": VerdictMode.META_JUDGED})


def fallback_average(
    agent_preds: Mapping[str, Sequence[Candidate]],
    k: int = 5,
    mode: Literal["proposing", "all_agents"] = "proposing",
) -> JudgeVerdict:
    """
    Rank FAQs by their mean agent score. ``proposing`` averages over the
    agents that proposed the FAQ; ``all_agents`` counts the others as 0.
    """
    scores: Dict[str, List[float]] = defaultdict(list)
    best: Dict[str, Candidate] = {}
    for preds in agent_preds.values():
        for cand in preds:
            scores[cand.faq_id].append(cand.score)
            if cand.faq_id not in best or cand.score > best[cand.faq_id].score:
                best[cand.faq_id] = cand
    if not scores:
        raise NoCandidates()
    n_agents = len(agent_preds)
    averaged: List[Candidate] = []
    for faq_id, values in scores.items():
        denominator = len(values) if mode == "proposing" else n_agents
        mean = sum(values) / denominator
        reasoning = f"Average score {mean:.1f} over {len(values)} of {n_agents} agents. {best[faq_id].reasoning}".strip()
        averaged.append(Candidate(faq_id=faq_id, score=mean, reasoning=reasoning, source_agent=FALLBACK_AGENT))
    return JudgeVerdict(ranked=RankedList[Candidate].from_items(averaged, k=k), mode=VerdictMode.FALLBACK)

