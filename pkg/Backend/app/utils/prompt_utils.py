# Backend/app/utils/prompt_utils.py
import json
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Set, Union

from loguru import logger

from app.core.errors import NoCandidates, PromptTooLarge, SchemaViolation, UnknownFaqTitle, Unparseable
from app.core.models import (
    Candidate,
    Confidence,
    FaqCorpus,
    FaqEntry,
    FaqMatch,
    FewShotExample,
    JudgeResponse,
    PlannerResponse,
    PromptBundle,
    RankerResponse,
    UserQuery,
)
from app.utils.llm_utils import clean_and_parse_json

RANKER_TEMPERATURE = 0.1
JUDGE_TEMPERATURE = 0.3
PLANNER_TEMPERATURE = 0.1
DEFAULT_PROMPT_BUDGET = 100_000
ANSWER_TRUNCATE_WORDS = 60
REPAIR_MESSAGE = "Your previous output was not valid JSON; return only the JSON object."

# --- Ranker prompts (question-only and answer-aware variants) ---
RANKER_SYSTEM = """You are an expert FAQ annotation system for our banking application. Your role is to accurately map user utterances to the most relevant FAQs from the bank's knowledge base.
IMPORTANT GUIDELINES:
1. Analyze the user's intent thoroughly
2. Match the intent to the most relevant FAQs
3. Rank FAQs by relevance (0-100 scale)
4. Provide clear reasoning for each match
5. Return exactly 5 FAQs unless there are fewer relevant ones
6. Be precise - banking customers need accurate information"""

RANKER_SYSTEM_WITH_ANSWERS = """You are an expert FAQ annotation system for our banking application. Your role is to accurately map user utterances to the most relevant FAQs from the bank's knowledge base.
IMPORTANT GUIDELINES:
1. Analyze the user's intent thoroughly
2. Match the intent to the most relevant FAQs based on both the FAQ question and its answer content
3. Rank FAQs by relevance (0-100 scale)
4. Provide clear reasoning for each match, considering the full context of the FAQ including its answer
5. Return exactly 5 FAQs unless there are fewer relevant ones
6. Be precise - banking customers need accurate information"""

_RANKER_TASK = """You will be given a user utterance and a list of available FAQs. Your task is to:
1. Analyze what the user is truly asking about (identify the core intent)
2. Search through the available FAQs for relevant matches
3. Rank the top 5 most relevant FAQs based on:
    - Semantic similarity to the user's intent
    - Specificity to the question
    - Likelihood of containing the information the user needs
4. Provide a confidence score (0-100) for each match
5. Explain your reasoning process"""

_RANKER_TASK_WITH_ANSWERS = """You will be given a user utterance and a list of available FAQs with their answers. Your task is to:
1. Analyze what the user is truly asking about (identify the core intent)
2. Search through the available FAQs for relevant matches
3. Rank the top 5 most relevant FAQs based on:
    - Semantic similarity to the user's intent
    - Specificity to the question
    - Whether the answer content directly addresses the user's needs
    - Likelihood of containing the information the user needs
4. Provide a confidence score (0-100) for each match
5. Explain your reasoning process"""

_BANKING_CONSIDERATIONS = """For banking-related queries, consider:
- Security concerns take priority
- Account access questions require specific authentication-related FAQs
- Transaction questions should match to relevant transaction FAQs
- General inquiries should match to general information FAQs"""


def _ranker_schema(reasoning_hint: str) -> str:
    return """You must produce your analysis as a JSON object according to the following schema:
{
"user_utterance": "The original user utterance",
"intent_analysis": "A thorough analysis of what the user is asking for, including likely underlying needs",
"primary_banking_category": "The main banking category this query falls under (Account Management, Security, Transactions, etc.)",
"relevant_faqs": [
{
"faq": "The title of the FAQ",
"relevance_score": 95,
"reasoning": "%s"
},
...
],
"confidence_in_mapping": "HIGH/MEDIUM/LOW",
"explanation_of_confidence": "Brief explanation of why you're confident or uncertain about these mappings",
"recommended_clarification_question": "If confidence is MEDIUM or LOW, provide a question that would help clarify the user's intent"
}""" % reasoning_hint


RANKER_SCHEMA = _ranker_schema("Detailed explanation of why this FAQ is relevant to the user's query")
RANKER_SCHEMA_WITH_ANSWERS = _ranker_schema(
    "Detailed explanation of why this FAQ is relevant to the user's query, including how the answer content addresses the query"
)
FEWER_RELEVANT_NOTE = "If there are fewer than 5 relevant FAQs, only include those that are actually relevant."

# --- Judge prompt ---
JUDGE_SYSTEM = """You are an expert judge of FAQ relevance for our bank.
Your task is to carefully analyze user utterances and determine which FAQs best address their needs.
Be precise and thorough in your analysis, as banking customers depend on accurate information.
Always consider both the semantic similarity and the practical relevance of each FAQ to the user's query.
When a user is asking about financial products, security features, or account management, prioritize exact matches.
You must return your rankings in proper JSON format with detailed reasoning for each decision."""

JUDGE_INSTRUCTIONS = """You are tasked with reranking candidate FAQs based on their relevance to a user utterance for our bank.

Given a user utterance and a list of candidate FAQs (with their original relevance scores), please rerank them based on your expert judgment. Consider:
1. Semantic similarity to the user's query
2. Intent matching (what the user is trying to accomplish)
3. Specificity (how directly the FAQ addresses the user's needs)
4. Banking domain knowledge (what would be most helpful for a banking customer)

Provide your reasoning for each FAQ and assign a new relevance score from 0-100 for each.

Your response must be in JSON format:
{
    "reranked_faqs": [
        {
            "faq": "FAQ Title",
            "relevance_score": 95,
            "reasoning": "Your reasoning for this ranking"
        },
        ...
    ]
}

Return exactly 5 FAQs, ranked by relevance to the user's query."""

JUDGE_REASONING_PROCESS = """Follow this reasoning process:
1. Intent analysis: Analyze the user's utterance to identify their core intent and any implied needs.
2. Candidate assessment: Evaluate each candidate FAQ based on how well it addresses the identified intent.
3. Agent consensus consideration: Consider which FAQs were recommended by multiple agents and analyze why.
4. Answer content analysis: Review the answer content of each FAQ to determine if it provides the information the user needs.
5. Banking context application: Apply domain knowledge about banking to prioritize FAQs that address security, compliance, and customer service needs.
6. Final ranking determination: Synthesize all findings to produce a final ranked list with relevance scores."""

# --- Query planner ---
PLANNER_SYSTEM = """You are the query planning agent of a banking FAQ annotation system.
You analyze short, often abbreviated customer utterances before they are matched to FAQs.
You must return your analysis in proper JSON format."""

PLANNER_INSTRUCTIONS = """Analyze the user utterance below:
1. Identify the user's core intent (what they are trying to accomplish).
2. Assign the main banking category (Account Management, Security, Cards, Transactions, etc.).
3. Propose expansion terms that improve retrieval: add only terms related to the inferred intent (intent-based expansion), such as expanded abbreviations and close synonyms. Do not add terms about unrelated topics. Do not repeat words already in the utterance.

Your response must be in JSON format:
{
    "intent": "One or two sentences describing the user's intent",
    "category": "The main banking category",
    "expansion_terms": ["term1", "term2"]
}
expansion_terms may be [] when the utterance needs no expansion."""

# --- Utterance variations (FiQA adaptation) ---
PARAPHRASE_SYSTEM = """You write realistic customer utterances for a financial FAQ system.
You must return proper JSON."""

PARAPHRASE_INSTRUCTIONS = """Rewrite the FAQ question below the way a customer would type it into a banking app search box: short, informal, possibly abbreviated.
The variation must keep exactly the same intent as the original question.

Your response must be in JSON format:
{
    "variation": "The rewritten utterance"
}"""

# Free-form chain-of-thought comparison prompt; documented, not used by the pipeline.
COT_SYSTEM = """You are an expert FAQ annotation system for our banking application. Your role is to accurately map user utterances to the most relevant FAQs from the bank's knowledge base."""

COT_USER_TEMPLATE = """You will be given a user utterance and a list of available FAQs. Your task is to find the most relevant FAQs for the user's query.
First, think step-by-step about what the user is asking for. Analyze their intent carefully.
Then, identify which FAQs in the provided list would best address their query.
Rank the top 5 most relevant FAQs, providing your reasoning for each selection.
Available FAQs:
{faq_list}
User Utterance: "{user_utterance}\""""


def truncate_words(text: str, max_words: int) -> str:
    words = text.split()
    if len(words) <= max_words:
        return text
    return " ".join(words[:max_words]) + " ..."


def _faq_line(faq: FaqEntry, with_answers: bool, max_answer_words: Optional[int]) -> str:
    if not with_answers:
        return f"- {faq.question}"
    answer = truncate_words(faq.answer, max_answer_words) if max_answer_words else faq.answer
    return f"- {faq.question} ||| {answer}"


def _few_shot_lines(few_shots: Sequence[FewShotExample]) -> List[str]:
    return [f'Example: "{shot.utterance}" -> {shot.gold_title}' for shot in few_shots]


def _planner_lines(query: UserQuery) -> List[str]:
    lines = []
    if query.intent_analysis:
        lines.append(f"Query analysis: {query.intent_analysis}")
    if query.expansion_terms:
        lines.append(f"Related terms: {', '.join(query.expansion_terms)}")
    return lines


def _check_budget(bundle: PromptBundle, budget: int) -> bool:
    return len(bundle.system) + len(bundle.user) <= budget


def build_ranker_prompt(
    with_answers: bool,
    query: UserQuery,
    faqs: Sequence[FaqEntry],
    few_shots: Sequence[FewShotExample] = (),
    temperature: float = RANKER_TEMPERATURE,
    budget: int = DEFAULT_PROMPT_BUDGET,
    answer_words: int = ANSWER_TRUNCATE_WORDS,
    tag: str = "ranker",
) -> PromptBundle:
    """
    Build the structured ranker prompt. Answers are rendered in full first and
    cut to ``answer_words`` only when the prompt would exceed ``budget``.
    """
    if not faqs:
        raise ValueError("build_ranker_prompt needs at least one FAQ")

    def render(max_answer_words: Optional[int]) -> PromptBundle:
        parts = [
            _RANKER_TASK_WITH_ANSWERS if with_answers else _RANKER_TASK,
            _BANKING_CONSIDERATIONS,
            RANKER_SCHEMA_WITH_ANSWERS if with_answers else RANKER_SCHEMA,
        ]
        if not with_answers:
            parts.append(FEWER_RELEVANT_NOTE)
        if few_shots:
            parts.append("Examples of correct mappings:\n" + "\n".join(_few_shot_lines(few_shots)))
        header = "Available FAQs with their Answers:" if with_answers else "Available FAQs:"
        parts.append(header + "\n" + "\n".join(_faq_line(f, with_answers, max_answer_words) for f in faqs))
        parts.extend(_planner_lines(query))
        parts.append(f'User Utterance: "{query.normalized}"')
        return PromptBundle(
            system=RANKER_SYSTEM_WITH_ANSWERS if with_answers else RANKER_SYSTEM,
            user="\n".join(parts),
            temperature=temperature,
            force_json=True,
            tag=tag,
        )

    bundle = render(None)
    if _check_budget(bundle, budget):
        return bundle
    if with_answers:
        logger.info(f"Ranker prompt over budget ({len(bundle.user)} chars); truncating answers to {answer_words} words")
        bundle = render(answer_words)
        if _check_budget(bundle, budget):
            return bundle
    raise PromptTooLarge(len(bundle.system) + len(bundle.user), budget)


def build_judge_prompt(
    query: UserQuery,
    candidates: Sequence[Candidate],
    agent_preds: Mapping[str, Sequence[Candidate]],
    few_shots: Sequence[FewShotExample],
    corpus: FaqCorpus,
    temperature: float = JUDGE_TEMPERATURE,
    budget: int = DEFAULT_PROMPT_BUDGET,
    answer_words: int = ANSWER_TRUNCATE_WORDS,
    tag: str = "judge",
) -> PromptBundle:
    if not candidates:
        raise NoCandidates("Judge prompt needs at least one candidate")
    expected = min(5, len(candidates))
    parts = [JUDGE_INSTRUCTIONS]
    if expected < 5:
        parts.append(f"Only {expected} candidate FAQs are available: return all {expected} of them.")
    parts.append(JUDGE_REASONING_PROCESS)
    parts.append(f'User Utterance: "{query.normalized}"')
    parts.extend(_planner_lines(query))
    parts.append("Candidate FAQs (with original relevance scores):")
    for cand in candidates:
        parts.append(f"- {corpus.title(cand.faq_id)} (score: {cand.score:g}; agent: {cand.source_agent}) "
                     f"reasoning: {cand.reasoning}")
    parts.append("Agent recommendations:")
    for agent, preds in agent_preds.items():
        parts.append(f"[{agent}]")
        if not preds:
            parts.append("  (no recommendations)")
        for cand in preds:
            parts.append(f"  - {corpus.title(cand.faq_id)} ({cand.score:g})")
    if few_shots:
        parts.append("Examples from the training set:\n" + "\n".join(_few_shot_lines(few_shots)))
    parts.append("FAQ details:")
    for cand in candidates:
        entry = corpus.by_id[cand.faq_id]
        parts.append(f"- {entry.question} ||| {truncate_words(entry.answer, answer_words)}")
    bundle = PromptBundle(system=JUDGE_SYSTEM, user="\n".join(parts), temperature=temperature, force_json=True, tag=tag)
    if not _check_budget(bundle, budget):
        raise PromptTooLarge(len(bundle.system) + len(bundle.user), budget)
    return bundle


def build_planner_prompt(query: UserQuery, temperature: float = PLANNER_TEMPERATURE) -> PromptBundle:
    user = PLANNER_INSTRUCTIONS + f'\nUser Utterance: "{query.normalized}"'
    return PromptBundle(system=PLANNER_SYSTEM, user=user, temperature=temperature, force_json=True, tag="planner")


def build_paraphrase_prompt(question: str, temperature: float = 0.7) -> PromptBundle:
    user = PARAPHRASE_INSTRUCTIONS + f'\nFAQ Question: "{question}"'
    return PromptBundle(system=PARAPHRASE_SYSTEM, user=user, temperature=temperature, force_json=True, tag="paraphrase")


def build_repair_prompt(bundle: PromptBundle, previous_output: str) -> PromptBundle:
    user = f"{bundle.user}\n\nPrevious output:\n{previous_output[:2000]}\n\n{REPAIR_MESSAGE}"
    return bundle.model_copy(update={"user": user, "tag": f"{bundle.tag}:repair"})


# --- Parsing ---
def _require(data: dict, field: str, kind: type) -> object:
    if field not in data:
        raise SchemaViolation(field, "missing")
    value = data[field]
    if not isinstance(value, kind):
        raise SchemaViolation(field, f"expected {kind.__name__}")
    return value


class TitleResolver:
    """
    Map FAQ titles to corpus ids: exact match first, then case-insensitive.
    ``allowed`` restricts resolution to a subset of ids (judge candidates).
    """

    def __init__(self, corpus: FaqCorpus, allowed: Optional[Iterable[str]] = None):
        allowed_set: Optional[Set[str]] = set(allowed) if allowed is not None else None
        self.exact: Dict[str, str] = {}
        self.folded: Dict[str, str] = {}
        for entry in corpus.entries:
            if allowed_set is not None and entry.id not in allowed_set:
                continue
            self.exact.setdefault(entry.question.strip(), entry.id)
            self.folded.setdefault(" ".join(entry.question.casefold().split()), entry.id)

    def resolve(self, title: str) -> Optional[str]:
        title = title.strip()
        if title in self.exact:
            return self.exact[title]
        return self.folded.get(" ".join(title.casefold().split()))


def _score(value: object, field: str) -> float:
    try:
        score = float(value)
    except (TypeError, ValueError):
        raise SchemaViolation(field, "relevance_score is not a number")
    if score != score:
        raise SchemaViolation(field, "relevance_score is NaN")
    if score < 0.0 or score > 100.0:
        clamped = min(100.0, max(0.0, score))
        logger.warning(f"relevance_score {score} outside [0, 100]; clamped to {clamped}")
        return clamped
    return score


def _parse_matches(items: list, field: str, resolver: TitleResolver) -> List[FaqMatch]:
    matches: List[FaqMatch] = []
    seen: Set[str] = set()
    unknown: List[str] = []
    for position, item in enumerate(items):
        if not isinstance(item, dict):
            raise SchemaViolation(f"{field}[{position}]", "expected object")
        title = item.get("faq")
        if not isinstance(title, str) or not title.strip():
            raise SchemaViolation(f"{field}[{position}].faq", "missing title")
        score = _score(item.get("relevance_score"), f"{field}[{position}].relevance_score")
        reasoning = item.get("reasoning") or ""
        faq_id = resolver.resolve(title)
        if faq_id is None:
            unknown.append(title)
            logger.warning(f"Dropping unknown FAQ title {title!r}")
            continue
        if faq_id in seen:
            logger.warning(f"Dropping duplicate FAQ {title!r} in {field}")
            continue
        seen.add(faq_id)
        matches.append(FaqMatch(faq=title, relevance_score=score, reasoning=str(reasoning), faq_id=faq_id))
    if items and not matches:
        raise UnknownFaqTitle(unknown)
    return matches


ResponseKind = Literal["ranker", "judge", "planner", "paraphrase"]


def parse_structured_response(
    raw: str,
    kind: ResponseKind,
    corpus: Optional[FaqCorpus] = None,
    allowed_ids: Optional[Iterable[str]] = None,
    expected_count: Optional[int] = None,
) -> Union[RankerResponse, JudgeResponse, PlannerResponse, dict]:
    """
    Parse and validate one structured response. ``expected_count`` is the
    exact number of judge entries required; ``allowed_ids`` limits which FAQs
    titles may resolve to.
    """
    data, error = clean_and_parse_json(raw)
    if error is not None or not isinstance(data, dict):
        raise Unparseable(raw or "")

    if kind == "planner":
        intent = _require(data, "intent", str)
        category = data.get("category") or ""
        terms = data.get("expansion_terms") or []
        if not isinstance(terms, list):
            raise SchemaViolation("expansion_terms", "expected list")
        cleaned = [str(t).strip() for t in terms if str(t).strip()]
        return PlannerResponse(intent=intent, category=str(category), expansion_terms=tuple(dict.fromkeys(cleaned)))

    if kind == "paraphrase":
        return {"variation": str(_require(data, "variation", str)).strip()}

    if corpus is None:
        raise ValueError(f"Parsing a {kind} response needs the corpus")
    resolver = TitleResolver(corpus, allowed_ids)

    if kind == "judge":
        items = _require(data, "reranked_faqs", list)
        if expected_count is not None and len(items) != expected_count:
            raise SchemaViolation("reranked_faqs length", f"expected {expected_count}, got {len(items)}")
        return JudgeResponse(reranked_faqs=tuple(_parse_matches(items, "reranked_faqs", resolver)))

    items = _require(data, "relevant_faqs", list)
    if len(items) > 5:
        logger.warning(f"Ranker returned {len(items)} FAQs; keeping the first 5")
        items = items[:5]
    confidence = str(_require(data, "confidence_in_mapping", str)).strip().upper()
    try:
        confidence_value = Confidence(confidence)
    except ValueError:
        raise SchemaViolation("confidence_in_mapping", f"unexpected value {confidence!r}")
    clarification = data.get("recommended_clarification_question")
    return RankerResponse(
        user_utterance=str(_require(data, "user_utterance", str)),
        intent_analysis=str(_require(data, "intent_analysis", str)),
        primary_banking_category=str(_require(data, "primary_banking_category", str)),
        relevant_faqs=tuple(_parse_matches(items, "relevant_faqs", resolver)),
        confidence_in_mapping=confidence_value,
        explanation_of_confidence=str(_require(data, "explanation_of_confidence", str)),
        recommended_clarification_question=clarification if isinstance(clarification, str) else None,
    )


def request_structured(gateway, bundle: PromptBundle, kind: ResponseKind, corpus: Optional[FaqCorpus] = None,
                       repair: bool = True, **parse_kwargs):
    """
    Send a prompt and parse the answer. An unparseable answer gets one repair
    request before the error surfaces.
    """
    raw = gateway.chat_complete(bundle.to_request())
    try:
        return parse_structured_response(raw, kind, corpus, **parse_kwargs)
    except Unparseable:
        if not repair:
            raise
        logger.warning(f"[{bundle.tag}] response was not valid JSON; asking for a repaired answer")
        raw = gateway.chat_complete(build_repair_prompt(bundle, raw).to_request())
        return parse_structured_response(raw, kind, corpus, **parse_kwargs)


def serialize_ranker_response(response: RankerResponse) -> str:
    payload = response.model_dump(mode="json")
    for item in payload["relevant_faqs"]:
        item.pop("faq_id", None)
    return json.dumps(payload, ensure_ascii=False)
