import random
from fractions import Fraction

import pytest

from app.core.config import PipelineConfig
from app.core.errors import JudgeFailed, NoCandidates
from app.core.models import Candidate, UserQuery, VerdictMode
from app.pipeline.judge import fallback_average, judge_rerank, meta_judge, rank_agreement, select_most_consistent
from app.pipeline.orchestrator import dedup_max_score
from app.utils.llm_utils import ScriptRule
from tests.helpers import LOST_DEB_AGENTS, LOST_DEB_JUDGE, judge_json, scripted_gateway

QUERY = UserQuery(raw="lost deb", normalized="lost deb")


def _preds(table=LOST_DEB_AGENTS):
    return {
        agent: [Candidate(faq_id=i, score=s, reasoning=f"{agent}:{i}", source_agent=agent) for i, s in matches]
        for agent, matches in table.items()
    }


def _candidates(preds):
    return dedup_max_score([c for cands in preds.values() for c in cands])


def test_judge_reranks_candidates(corpus) -> None:
    preds = _preds()
    gateway, backend = scripted_gateway({"tag:judge": judge_json(LOST_DEB_JUDGE)})
    verdict = judge_rerank(QUERY, _candidates(preds), preds, [], corpus, gateway)
    assert verdict.mode is VerdictMode.JUDGED
    assert verdict.ranked.faq_ids == ["card-lost", "card-lock", "card-declined", "pwd-reset", "balance"]
    assert [c.score for c in verdict.ranked.items] == [97, 88, 60, 25, 15]
    assert verdict.per_item_reasoning[0] == "judge keeps card-lost"
    assert backend.requests[0].temperature == 0.3


def test_judge_backfills_unknown_titles(corpus) -> None:
    preds = _preds()
    answer = judge_json([("card-lost", 97), ("standing-order", 90), ("sba-open", 80), ("card-lock", 50), ("balance", 10)])
    gateway, _ = scripted_gateway({"tag:judge": answer})
    verdict = judge_rerank(QUERY, _candidates(preds), preds, [], corpus, gateway)
    # card-lost 97, card-lock 50, balance 10 from the judge; card-declined 50 and pwd-reset 30 backfilled
    assert verdict.ranked.faq_ids == ["card-lost", "card-declined", "card-lock", "pwd-reset", "balance"]
    assert len(verdict.ranked) == 5


def test_judge_with_few_candidates_returns_all(corpus) -> None:
    preds = _preds({"direct": [("card-lost", 90), ("card-lock", 70)]})
    gateway, _ = scripted_gateway({"tag:judge": judge_json([("card-lock", 80), ("card-lost", 75)])})
    verdict = judge_rerank(QUERY, _candidates(preds), preds, [], corpus, gateway)
    assert verdict.ranked.faq_ids == ["card-lock", "card-lost"]
    assert verdict.ranked.k == 2


@pytest.mark.parametrize("answer", [
    "not json",
    judge_json([("card-lost", 97)]),
    '{"something_else": []}',
])
def test_judge_failures_raise_judge_failed(corpus, answer) -> None:
    preds = _preds()
    gateway, _ = scripted_gateway({"tag:judge*": answer})
    with pytest.raises(JudgeFailed):
        judge_rerank(QUERY, _candidates(preds), preds, [], corpus, gateway)


def test_judge_without_candidates(corpus) -> None:
    gateway, _ = scripted_gateway({})
    with pytest.raises(NoCandidates):
        judge_rerank(QUERY, [], {}, [], corpus, gateway)


@pytest.mark.parametrize("parallel", [True, False])
def test_meta_judge_keeps_most_consistent_sample(corpus, parallel) -> None:
    preds = _preds()
    ranking_a = LOST_DEB_JUDGE
    ranking_b = [(faq_id, 100 - score) for faq_id, score in LOST_DEB_JUDGE]
    gateway, backend = scripted_gateway({
        "tag:judge:0": judge_json(ranking_a),
        "tag:judge:1": judge_json(ranking_a),
        "tag:judge:2": judge_json(ranking_b),
    })
    cfg = PipelineConfig(parallel=parallel)
    verdict = meta_judge(QUERY, _candidates(preds), preds, [], corpus, gateway, n_samples=3, cfg=cfg)
    assert verdict.mode is VerdictMode.META_JUDGED
    assert verdict.ranked.faq_ids == [faq_id for faq_id, _ in ranking_a]
    assert backend.total_calls == 3


def test_meta_judge_tolerates_failed_samples(corpus) -> None:
    preds = _preds()
    gateway, _ = scripted_gateway({
        "tag:judge:0*": "garbage",
        "tag:judge:1": judge_json(LOST_DEB_JUDGE),
    })
    verdict = meta_judge(QUERY, _candidates(preds), preds, [], corpus, gateway, n_samples=2)
    assert verdict.ranked.faq_ids[0] == "card-lost"


def test_meta_judge_all_samples_failing(corpus) -> None:
    preds = _preds()
    gateway, _ = scripted_gateway({"tag:judge*": ScriptRule(response="{}", fail_times=100)}, max_retries=0)
    with pytest.raises(JudgeFailed):
        meta_judge(QUERY, _candidates(preds), preds, [], corpus, gateway, n_samples=3)


def test_single_sample_meta_judge_is_plain_judge(corpus) -> None:
    preds = _preds()
    gateway, backend = scripted_gateway({"tag:judge": judge_json(LOST_DEB_JUDGE)})
    verdict = meta_judge(QUERY, _candidates(preds), preds, [], corpus, gateway, n_samples=1)
    assert verdict.mode is VerdictMode.JUDGED
    assert backend.count("tag:judge") == 1
    with pytest.raises(ValueError):
        meta_judge(QUERY, _candidates(preds), preds, [], corpus, gateway, n_samples=0)


def test_fallback_average_example() -> None:
    preds = _preds()
    verdict = fallback_average(preds, k=5)
    # card-lost (90+85+95)/3, card-lock (70+75+80)/3, card-declined (40+50)/2, pwd-reset 30, balance 20
    assert verdict.mode is VerdictMode.FALLBACK
    assert verdict.ranked.faq_ids == ["card-lost", "card-lock", "card-declined", "pwd-reset", "balance"]
    assert verdict.ranked.items[0].score == pytest.approx(90.0)

    all_agents = fallback_average(preds, k=5, mode="all_agents")
    assert all_agents.ranked.items[0].score == pytest.approx(270 / 4)
    assert all_agents.ranked.faq_ids[:3] == ["card-lost", "card-lock", "card-declined"]


@pytest.mark.parametrize("mode", ["proposing", "all_agents"])
def test_fallback_average_matches_exhaustive_oracle(mode) -> None:
    rng = random.Random(11)
    ids = [f"faq-{i:02d}" for i in range(12)]
    for _ in range(200):
        n_agents = rng.randint(1, 4)
        table = {
            f"agent{a}": [(faq_id, rng.randint(0, 100)) for faq_id in rng.sample(ids, rng.randint(0, 5))]
            for a in range(n_agents)
        }
        if not any(table.values()):
            with pytest.raises(NoCandidates):
                fallback_average(_preds(table), mode=mode)
            continue

        gathered = {}
        for matches in table.values():
            for faq_id, score in matches:
                gathered.setdefault(faq_id, []).append(score)
        means = {
            faq_id: Fraction(sum(values), len(values) if mode == "proposing" else n_agents)
            for faq_id, values in gathered.items()
        }
        expected = sorted(means, key=lambda faq_id: (-means[faq_id], faq_id))[:5]

        verdict = fallback_average(_preds(table), k=5, mode=mode)
        assert verdict.ranked.faq_ids == expected
        for item in verdict.ranked.items:
            assert item.score == pytest.approx(float(means[item.faq_id]))


def test_rank_agreement() -> None:
    assert rank_agreement(["a", "b", "c"], ["a", "b", "c"]) == 1.0
    assert rank_agreement(["a", "b", "c"], ["c", "b", "a"]) == -1.0
    assert rank_agreement(["a", "b"], ["a", "x"]) == 0.0
    assert rank_agreement(["a", "b", "c"], ["b", "a", "c"]) == pytest.approx(1 / 3)


def test_select_most_consistent_prefers_lowest_index_on_ties() -> None:
    preds = _preds()
    a = fallback_average(preds, k=3)
    b = fallback_average({"x": preds["embed_ans"]}, k=2)
    assert select_most_consistent([a]) == 0
    assert select_most_consistent([a, a]) == 0
    assert select_most_consistent([b, a, a]) == 1
