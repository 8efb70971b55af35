import json
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from app.core.config import BackendConfig
from app.core.models import FaqCorpus, FaqEntry, validate_faq_set
from app.utils.llm_utils import LLMGateway, ScriptedBackend, hashing_embedder

BANK_FAQS: List[Tuple[str, str, str]] = [
    ("card-lock", "How do I lock my debit card?",
     "Open the app, choose Cards and tap Lock card. You can unlock it the same way."),
    ("card-lost", "How do I report a lost or stolen card?",
     "Use Report lost card in the app or call us; we block the card immediately and send a replacement."),
    ("card-declined", "Why was my card declined?",
     "Cards are declined for insufficient funds, an expired card or a security block."),
    ("pwd-reset", "How do I reset my online banking password?",
     "Tap Forgot password on the login screen and follow the verification steps."),
    ("atm-limit", "What is the daily ATM withdrawal limit?",
     "The standard daily ATM limit is 500 dollars; you can change it in the app."),
    ("standing-order", "How do I set up a standing order?",
     "Go to Payments, choose Standing orders and enter the amount and frequency."),
    ("balance", "How can I check my account balance?",
     "Your balance is shown on the home screen of the app and at any ATM."),
    ("sba-open", "How do I open a small business account?",
     "Apply online with your business registration documents and a photo ID."),
]

TITLES: Dict[str, str] = {faq_id: question for faq_id, question, _ in BANK_FAQS}


def bank_corpus() -> FaqCorpus:
    return validate_faq_set([FaqEntry(id=i, question=q, answer=a) for i, q, a in BANK_FAQS])


def ranker_json(utterance: str, matches: Iterable[Tuple[str, float]], confidence: str = "HIGH") -> str:
    """Ranker answer in the structured schema; ``matches`` are (faq_id, score)."""
    return json.dumps({
        "user_utterance": utterance,
        "intent_analysis": f"The user asks about '{utterance}'",
        "primary_banking_category": "Cards",
        "relevant_faqs": [
            {"faq": TITLES[faq_id], "relevance_score": score, "reasoning": f"{faq_id} fits the request"}
            for faq_id, score in matches
        ],
        "confidence_in_mapping": confidence,
        "explanation_of_confidence": "The intent is clear",
        "recommended_clarification_question": None,
    })


def judge_json(matches: Iterable[Tuple[str, float]]) -> str:
    return json.dumps({
        "reranked_faqs": [
            {"faq": TITLES[faq_id], "relevance_score": score, "reasoning": f"judge keeps {faq_id}"}
            for faq_id, score in matches
        ]
    })


def planner_json(intent: str, category: str, terms: Sequence[str]) -> str:
    return json.dumps({"intent": intent, "category": category, "expansion_terms": list(terms)})


def scripted_gateway(script, embeddings=None, embed_delay_ms: float = 0.0, max_retries: int = 3,
                     hashing_dim: Optional[int] = 64) -> Tuple[LLMGateway, ScriptedBackend]:
    if embeddings is None and hashing_dim:
        embeddings = hashing_embedder(hashing_dim)
    backend = ScriptedBackend(script, embeddings=embeddings, embed_delay_ms=embed_delay_ms)
    cfg = BackendConfig(kind="scripted", max_retries=max_retries, backoff_base_ms=0.0)
    return LLMGateway(backend, cfg), backend


# Fixture for "lost deb": four agents, then a judge over six distinct candidates
LOST_DEB_AGENTS = {
    "direct": [("card-lost", 90), ("card-lock", 70), ("card-declined", 40)],
    "embed": [("card-lost", 85), ("card-lock", 75), ("balance", 20)],
    "direct_ans": [("card-lost", 95), ("card-declined", 50), ("atm-limit", 10)],
    "embed_ans": [("card-lock", 80), ("pwd-reset", 30)],
}
LOST_DEB_JUDGE = [("card-lost", 97), ("card-lock", 88), ("card-declined", 60), ("pwd-reset", 25), ("balance", 15)]


def lost_deb_script(judge_response=None) -> dict:
    script = {
        "tag:planner": planner_json("The user lost their debit card", "Cards", ["debit card", "lost card"]),
        "tag:judge*": judge_response if judge_response is not None else judge_json(LOST_DEB_JUDGE),
    }
    for agent, matches in LOST_DEB_AGENTS.items():
        script[f"tag:ranker:{agent}"] = ranker_json("lost deb", matches)
    return script


def write_jsonl(path, records: Iterable[dict]) -> str:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    return str(path)


def write_bank_corpus(path) -> str:
    return write_jsonl(path, [{"id": i, "question": q, "answer": a} for i, q, a in BANK_FAQS])
