# Backend/app/core/models.py
from enum import Enum
from typing import Dict, Generic, List, Optional, Sequence, Tuple, TypeVar
from functools import cached_property

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.errors import DuplicateId, EmptyCorpus, EmptyQuestion, EmptyUtterance


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True)


# --- Corpus and queries ---
class FaqEntry(FrozenModel):
    """
    One FAQ of the knowledge base.

    Attributes:
        id: Unique opaque identifier within a corpus
        question: The FAQ question, also used as its title in prompts
        answer: The FAQ answer text (may be empty)
        category: Optional label, e.g. "Security"
    """
    id: str
    question: str
    answer: str = ""
    category: Optional[str] = None


class FaqCorpus(FrozenModel):
    """
    Ordered, validated collection of FAQs. Build it with ``validate_faq_set``.
    """
    entries: Tuple[FaqEntry, ...]

    @cached_property
    def by_id(self) -> Dict[str, FaqEntry]:
        return {entry.id: entry for entry in self.entries}

    @cached_property
    def ids(self) -> Tuple[str, ...]:
        return tuple(entry.id for entry in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, faq_id: str) -> Optional[FaqEntry]:
        return self.by_id.get(faq_id)

    def title(self, faq_id: str) -> str:
        return self.by_id[faq_id].question


def validate_faq_set(entries: Sequence[FaqEntry]) -> FaqCorpus:
    """Check corpus invariants and return the corpus.

    Raises EmptyCorpus, EmptyQuestion(index) or DuplicateId(id).
    """
    if not entries:
        raise EmptyCorpus()
    seen = set()
    for index, entry in enumerate(entries):
        if not entry.question.strip():
            raise EmptyQuestion(index)
        if entry.id in seen:
            raise DuplicateId(entry.id)
        seen.add(entry.id)
    return FaqCorpus(entries=tuple(entries))


class UserQuery(FrozenModel):
    """
    A user utterance plus what the query planner learned about it.
    """
    raw: str
    normalized: str
    intent_analysis: Optional[str] = None
    category: Optional[str] = None
    expansion_terms: Tuple[str, ...] = ()

    @field_validator("normalized")
    @classmethod
    def _normalized_nonempty(cls, value: str) -> str:
        if not value:
            raise ValueError("normalized utterance must be nonempty")
        return value

    @field_validator("expansion_terms")
    @classmethod
    def _unique_terms(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        if len(set(value)) != len(value):
            raise ValueError("expansion_terms must not contain duplicates")
        return value

    def retrieval_text(self, with_expansion: bool = True) -> str:
        if with_expansion and self.expansion_terms:
            return " ".join([self.normalized, *self.expansion_terms])
        return self.normalized


def normalize_text(raw: str) -> str:
    return " ".join(raw.casefold().split())


def normalize_utterance(raw: str) -> UserQuery:
    normalized = normalize_text(raw or "")
    if not normalized:
        raise EmptyUtterance(raw or "")
    return UserQuery(raw=raw, normalized=normalized)


# --- Scored items and rankings ---
class ScoredItem(FrozenModel):
    faq_id: str
    score: float


class RetrievalHit(ScoredItem):
    """Raw BM25 or cosine score; never leaves the retrieval layer as a Candidate."""


class Candidate(ScoredItem):
    """
    A FAQ proposed by an agent or the judge, scored on the 0-100 scale.
    """
    score: float = Field(ge=0.0, le=100.0)
    reasoning: str = ""
    source_agent: str = ""


ItemT = TypeVar("ItemT", bound=ScoredItem)


def rank_key(item: ScoredItem) -> Tuple[float, str]:
    """Score descending, then faq_id ascending."""
    return (-item.score, item.faq_id)


class RankedList(FrozenModel, Generic[ItemT]):
    items: Tuple[ItemT, ...] = ()
    k: int = Field(default=5, ge=1)

    @model_validator(mode="after")
    def _check_order(self):
        if len(self.items) > self.k:
            raise ValueError(f"ranked list holds {len(self.items)} items, bound is {self.k}")
        ids = [item.faq_id for item in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("ranked list contains duplicate faq_id")
        keys = [rank_key(item) for item in self.items]
        if keys != sorted(keys):
            raise ValueError("ranked list is not sorted by score desc, faq_id asc")
        return self

    @classmethod
    def from_items(cls, items: Sequence[ItemT], k: int) -> "RankedList[ItemT]":
        """Sort by the tie rule and keep the first k. Items must have distinct ids."""
        return cls(items=tuple(sorted(items, key=rank_key)[:k]), k=k)

    @property
    def faq_ids(self) -> List[str]:
        return [item.faq_id for item in self.items]

    def __len__(self) -> int:
        return len(self.items)


# --- LLM requests and structured responses ---
class ChatRequest(FrozenModel):
    """
    One chat completion call. ``tag`` names the caller (planner, ranker:<agent>,
    judge, repair, paraphrase) and takes part in the replay digest.
    """
    system: str = Field(min_length=1)
    user: str = Field(min_length=1)
    temperature: float = Field(default=0.1, ge=0.0, le=2.0)
    force_json: bool = True
    tag: str = ""


class PromptBundle(FrozenModel):
    system: str
    user: str
    temperature: float
    force_json: bool = True
    tag: str = ""

    def to_request(self) -> ChatRequest:
        return ChatRequest(
            system=self.system, user=self.user, temperature=self.temperature,
            force_json=self.force_json, tag=self.tag,
        )


class FaqMatch(FrozenModel):
    faq: str
    relevance_score: float
    reasoning: str = ""
    faq_id: Optional[str] = None


class Confidence(str, Enum):
    HIGH = "HIGH"
    MEDIUM = "MEDIUM"
    LOW = "LOW"


class RankerResponse(FrozenModel):
    user_utterance: str
    intent_analysis: str
    primary_banking_category: str
    relevant_faqs: Tuple[FaqMatch, ...] = ()
    confidence_in_mapping: Confidence
    explanation_of_confidence: str
    recommended_clarification_question: Optional[str] = None

    @field_validator("relevant_faqs")
    @classmethod
    def _at_most_five(cls, value: Tuple[FaqMatch, ...]) -> Tuple[FaqMatch, ...]:
        if len(value) > 5:
            raise ValueError("relevant_faqs holds more than 5 entries")
        return value


class JudgeResponse(FrozenModel):
    reranked_faqs: Tuple[FaqMatch, ...]


class PlannerResponse(FrozenModel):
    intent: str
    category: str
    expansion_terms: Tuple[str, ...] = ()


# --- Agents ---
class FewShotExample(FrozenModel):
    utterance: str
    gold_title: str


class AgentSpec(FrozenModel):
    """
    One ranker agent of the ensemble.

    Attributes:
        name: Agent tag (direct, embed, direct_ans, embed_ans)
        use_embeddings: Rank a cosine-curated candidate pool instead of the whole corpus
        use_answers: Show FAQ answers in the prompt (and embed them)
        few_shots: The agent's worked examples
        candidate_pool_size: Pool size for the embedding variants
    """
    name: str
    use_embeddings: bool = False
    use_answers: bool = False
    few_shots: Tuple[FewShotExample, ...] = ()
    candidate_pool_size: int = Field(default=20, ge=1)


STANDARD_AGENT_FLAGS: Dict[str, Tuple[bool, bool]] = {
    "direct": (False, False),
    "embed": (True, False),
    "direct_ans": (False, True),
    "embed_ans": (True, True),
}


def standard_agents(pool_size: int = 20) -> List[AgentSpec]:
    return [
        AgentSpec(name=name, use_embeddings=emb, use_answers=ans, candidate_pool_size=pool_size)
        for name, (emb, ans) in STANDARD_AGENT_FLAGS.items()
    ]


class FewShotPlan(FrozenModel):
    per_agent: Dict[str, Tuple[FewShotExample, ...]]
    seed: int


# --- Judge and pipeline results ---
class VerdictMode(str, Enum):
    JUDGED = "judged"
    META_JUDGED = "meta_judged"
    FALLBACK = "fallback"


class JudgeVerdict(FrozenModel):
    ranked: RankedList[Candidate]
    mode: VerdictMode

    @property
    def per_item_reasoning(self) -> List[str]:
        return [item.reasoning for item in self.ranked.items]

    def to_payload(self, corpus: FaqCorpus) -> dict:
        """Judge output JSON shape, extended with mode and faq_id."""
        return {
            "reranked_faqs": [
                {
                    "faq": corpus.title(item.faq_id) if corpus.get(item.faq_id) else item.faq_id,
                    "faq_id": item.faq_id,
                    "relevance_score": item.score,
                    "reasoning": item.reasoning,
                }
                for item in self.ranked.items
            ],
            "mode": self.mode.value,
        }


class AnnotationResult(FrozenModel):
    utterance: str
    verdict: JudgeVerdict
    per_agent_latency_ms: Dict[str, float] = Field(default_factory=dict)
    stage_latency_ms: Dict[str, float] = Field(default_factory=dict)
    total_latency_ms: float = 0.0
    cache_hit: bool = False
    agent_preds: Dict[str, Tuple[Candidate, ...]] = Field(default_factory=dict)


# --- Evaluation ---
class LabeledUtterance(FrozenModel):
    """
    A test utterance and its gold FAQ ids. With ``graded`` the ids are
    ordered best-first and drive graded NDCG gains.
    """
    utterance: str
    gold_ids: Tuple[str, ...] = Field(min_length=1)
    graded: bool = False


class EvalReport(FrozenModel):
    method: str = "MAFA"
    top1: float = Field(ge=0.0, le=1.0)
    top3: float = Field(ge=0.0, le=1.0)
    top5: float = Field(ge=0.0, le=1.0)
    mrr: float = Field(ge=0.0, le=1.0)
    ndcg3: float = Field(ge=0.0, le=1.0)
    ndcg5: float = Field(ge=0.0, le=1.0)
    n: int = 0
    errors: int = 0
    latency_mean_ms: float = 0.0
    latency_p95_ms: float = 0.0

    @model_validator(mode="after")
    def _monotone(self):
        if not (self.top1 <= self.top3 <= self.top5):
            raise ValueError("top-k accuracy must be non-decreasing in k")
        return self


# --- HTTP models ---
class AnnotateRequest(BaseModel):
    """
    Request body for POST /annotate.
    """
    utterance: str = Field(description="Raw user utterance")


class RerankedFaq(BaseModel):
    faq: str
    faq_id: str
    relevance_score: float
    reasoning: str


class AnnotateResponse(BaseModel):
    """
    Verdict in the judge output shape plus cache and latency information.
    """
    reranked_faqs: List[RerankedFaq]
    mode: str
    cache_hit: bool
    latency_ms: float


class HealthResponse(BaseModel):
    status: str = Field(description="Overall service status")
    corpus_size: int = Field(description="Number of FAQs loaded")
    backend: str = Field(description="Backend kind in use (live, replay, scripted)")


class SystemInfoResponse(BaseModel):
    version: str = Field(description="API version")
    chat_model: str
    embed_model: str
    agents: List[str]
    judge_samples: int
