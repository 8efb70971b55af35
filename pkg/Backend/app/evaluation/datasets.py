# Backend/app/evaluation/datasets.py
"""
Dataset loaders and adapters.

File formats (UTF-8):
  corpus       JSON-lines {"id", "question", "answer", "category"?}
  labels       JSON-lines {"utterance", "gold_ids": [...], "graded"?: bool}
  LCQMC        tab-separated q1, q2, label (0/1), no header
  FiQA         JSON-lines questions {"id", "question"}, answers {"id", "answer"},
               links {"question_id", "answer_id"}, variations {"question_id", "utterance"}
"""
import csv
import hashlib
import json
import random
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import pandas as pd
from loguru import logger
from pydantic import ValidationError

from app.core.config import DatasetSpec
from app.core.errors import DanglingLink, DatasetParseError, EmptyInput, FaqAnnotationError
from app.core.models import FaqCorpus, FaqEntry, LabeledUtterance, validate_faq_set
from app.utils.prompt_utils import build_paraphrase_prompt, request_structured

Dataset = Tuple[FaqCorpus, List[LabeledUtterance]]


def _json_lines(path: str) -> Iterator[Tuple[int, dict]]:
    try:
        handle = Path(path).open("r", encoding="utf-8")
    except OSError as e:
        raise DatasetParseError(0, f"cannot open {path}: {e}") from e
    with handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(line_no, f"{path}: invalid JSON ({e.msg})") from e
            if not isinstance(record, dict):
                raise DatasetParseError(line_no, f"{path}: expected a JSON object")
            yield line_no, record


def load_corpus_jsonl(path: str) -> FaqCorpus:
    entries: List[FaqEntry] = []
    for line_no, record in _json_lines(path):
        try:
            entries.append(FaqEntry(
                id=str(record["id"]),
                question=str(record["question"]),
                answer=str(record.get("answer") or ""),
                category=record.get("category"),
            ))
        except (KeyError, ValidationError) as e:
            raise DatasetParseError(line_no, f"{path}: bad FAQ record ({e})") from e
    corpus = validate_faq_set(entries)
    logger.info(f"Loaded {len(corpus)} FAQs from {path}")
    return corpus


def load_labels_jsonl(path: str, corpus: FaqCorpus) -> List[LabeledUtterance]:
    """Labeled utterances; every gold id must exist in the corpus."""
    labeled: List[LabeledUtterance] = []
    for line_no, record in _json_lines(path):
        gold = record.get("gold_ids")
        if isinstance(gold, str):
            gold = [gold]
        if not isinstance(gold, list) or not gold or "utterance" not in record:
            raise DatasetParseError(line_no, f"{path}: expected utterance and a nonempty gold_ids list")
        gold = [str(g) for g in gold]
        unknown = [g for g in gold if g not in corpus.by_id]
        if unknown:
            raise DatasetParseError(line_no, f"{path}: unknown FAQ id {unknown[0]!r}")
        labeled.append(LabeledUtterance(
            utterance=str(record["utterance"]),
            gold_ids=tuple(dict.fromkeys(gold)),
            graded=bool(record.get("graded", False)),
        ))
    return labeled


def load_bank_format(corpus_path: str, labels_path: Optional[str] = None) -> Dataset:
    corpus = load_corpus_jsonl(corpus_path)
    labeled = load_labels_jsonl(labels_path, corpus) if labels_path else []
    return corpus, labeled


# --- LCQMC ---
def lcqmc_faq_id(question: str) -> str:
    return "lcqmc-" + hashlib.sha1(question.encode("utf-8")).hexdigest()[:12]


def adapt_lcqmc(rows: Sequence[Tuple[str, str, int]]) -> Dataset:
    """
    Every distinct q2 becomes an FAQ (empty answer); the q1 of each positive
    pair becomes its own labeled utterance with that q2 as the single gold.
    """
    if not rows:
        raise EmptyInput("LCQMC rows")
    entries: dict = {}
    labeled: List[LabeledUtterance] = []
    for q1, q2, label in rows:
        label = int(label)
        if label not in (0, 1):
            raise DatasetParseError(0, f"LCQMC label must be 0 or 1, got {label}")
        q2 = q2.strip()
        if not q2:
            continue
        faq_id = lcqmc_faq_id(q2)
        entries.setdefault(faq_id, FaqEntry(id=faq_id, question=q2, answer=""))
        if label == 1 and q1.strip():
            labeled.append(LabeledUtterance(utterance=q1.strip(), gold_ids=(faq_id,)))
    corpus = validate_faq_set(list(entries.values()))
    logger.info(f"LCQMC: {len(corpus)} FAQs, {len(labeled)} labeled utterances from {len(rows)} pairs")
    return corpus, labeled


def load_lcqmc_tsv(path: str) -> List[Tuple[str, str, int]]:
    try:
        df = pd.read_csv(path, sep="\t", header=None, names=["q1", "q2", "label"], dtype=str,
                         keep_default_na=False, quoting=csv.QUOTE_NONE, encoding="utf-8")
    except (OSError, pd.errors.ParserError) as e:
        raise DatasetParseError(0, f"cannot read LCQMC file {path}: {e}") from e
    rows = []
    for line_no, row in enumerate(df.itertuples(index=False), start=1):
        if row.label.strip() not in ("0", "1"):
            raise DatasetParseError(line_no, f"{path}: label must be 0 or 1, got {row.label!r}")
        rows.append((row.q1, row.q2, int(row.label)))
    return rows


# --- FiQA ---
def adapt_fiqa(
    questions: Sequence[dict],
    answers: Sequence[dict],
    links: Sequence[dict],
    variations: Optional[Sequence[dict]] = None,
    gateway=None,
    sample_size: Optional[int] = None,
    seed: int = 42,
) -> Dataset:
    """
    FAQ = original question + first linked answer. Utterances are the given
    variations, or one generated paraphrase per sampled question when a
    gateway is supplied.
    """
    question_text = {str(q["id"]): str(q["question"]) for q in questions}
    answer_text = {str(a["id"]): str(a["answer"]) for a in answers}
    first_answer: dict = {}
    for link in links:
        qid, aid = str(link["question_id"]), str(link["answer_id"])
        if qid not in question_text:
            raise DanglingLink(qid)
        if aid not in answer_text:
            raise DanglingLink(aid)
        first_answer.setdefault(qid, aid)

    entries = [
        FaqEntry(id=qid, question=text, answer=answer_text[first_answer[qid]] if qid in first_answer else "")
        for qid, text in question_text.items()
    ]
    corpus = validate_faq_set(entries)

    labeled: List[LabeledUtterance] = []
    if variations:
        for item in variations:
            qid = str(item["question_id"])
            if qid not in corpus.by_id:
                raise DanglingLink(qid)
            labeled.append(LabeledUtterance(utterance=str(item["utterance"]), gold_ids=(qid,)))
    elif gateway is not None:
        labeled = generate_variations(corpus, gateway, sample_size, seed)
    else:
        logger.warning("FiQA: no variations and no gateway; dataset has no labeled utterances")

    if sample_size is not None and len(labeled) > sample_size:
        labeled = random.Random(seed).sample(labeled, sample_size)
    logger.info(f"FiQA: {len(corpus)} FAQs, {len(labeled)} labeled utterances")
    return corpus, labeled


def generate_variations(corpus: FaqCorpus, gateway, sample_size: Optional[int], seed: int) -> List[LabeledUtterance]:
    entries = list(corpus.entries)
    if sample_size is not None and sample_size < len(entries):
        entries = random.Random(seed).sample(entries, sample_size)
    labeled = []
    for entry in entries:
        try:
            response = request_structured(gateway, build_paraphrase_prompt(entry.question), "paraphrase")
        except FaqAnnotationError as e:
            logger.warning(f"Paraphrase for FAQ {entry.id} failed, skipping: {e}")
            continue
        if response["variation"]:
            labeled.append(LabeledUtterance(utterance=response["variation"], gold_ids=(entry.id,)))
    return labeled


def load_fiqa(spec: DatasetSpec, gateway=None, seed: int = 42) -> Dataset:
    def rows(path: Optional[str]) -> List[dict]:
        return [record for _, record in _json_lines(path)] if path else []

    try:
        return adapt_fiqa(
            rows(spec.fiqa_questions_path),
            rows(spec.fiqa_answers_path),
            rows(spec.fiqa_links_path),
            rows(spec.fiqa_variations_path) or None,
            gateway=gateway,
            sample_size=spec.sample_size,
            seed=seed,
        )
    except KeyError as e:
        raise DatasetParseError(0, f"FiQA record missing field {e}") from e


def load_dataset(spec: DatasetSpec, gateway=None, seed: int = 42) -> Dataset:
    if spec.format == "bank":
        if not spec.corpus_path:
            raise DatasetParseError(0, "bank dataset needs corpus_path")
        corpus, labeled = load_bank_format(spec.corpus_path, spec.labels_path)
        if spec.sample_size is not None and len(labeled) > spec.sample_size:
            labeled = random.Random(seed).sample(labeled, spec.sample_size)
        return corpus, labeled
    if spec.format == "lcqmc":
        if not spec.lcqmc_path:
            raise DatasetParseError(0, "lcqmc dataset needs lcqmc_path")
        corpus, labeled = adapt_lcqmc(load_lcqmc_tsv(spec.lcqmc_path))
        if spec.sample_size is not None and len(labeled) > spec.sample_size:
            labeled = random.Random(seed).sample(labeled, spec.sample_size)
        return corpus, labeled
    return load_fiqa(spec, gateway, seed)


def corpus_statistics(corpus: FaqCorpus, training: Sequence[LabeledUtterance] = (),
                      test: Optional[Sequence[LabeledUtterance]] = None) -> pd.DataFrame:
    """Dataset statistics as a two-column table (Statistic, Value)."""
    faqs = pd.DataFrame([{"question": e.question, "answer": e.answer} for e in corpus.entries])
    utterances = pd.Series([u.utterance for u in [*training, *(test or [])]], dtype=object)

    def mean_words(series: pd.Series) -> float:
        return round(float(series.str.split().str.len().mean()), 1) if len(series) else 0.0

    rows = [
        ("Number of FAQs", len(corpus)),
        ("Number of Training Utterances", len(training)),
    ]
    if test is not None:
        rows.append(("Number of Test Utterances", len(test)))
    rows += [
        ("Average FAQ Question Length (words)", mean_words(faqs["question"])),
        ("Average FAQ Answer Length (words)", mean_words(faqs["answer"])),
        ("Average User Utterance Length (words)", mean_words(utterances)),
    ]
    return pd.DataFrame(rows, columns=["Statistic", "Value"])
