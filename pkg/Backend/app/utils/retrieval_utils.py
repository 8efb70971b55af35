# Backend/app/utils/retrieval_utils.py
"""Lexical (BM25) and embedding retrieval over the FAQ corpus.

Raw BM25 and cosine scores stay in this module; agents only use the ranked
ids to curate candidate pools.
"""
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from app.core.errors import DimensionMismatch, FaqAnnotationError
from app.core.models import FaqCorpus, FaqEntry, RankedList, RetrievalHit, UserQuery, rank_key

BM25_K1 = 1.2
BM25_B = 0.75

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> List[str]:
    """Case-fold and split on anything that is not a letter or digit."""
    return _TOKEN.findall(text.casefold())


def faq_embedding_text(faq: FaqEntry, with_answers: bool) -> str:
    if with_answers:
        return f"Question: {faq.question} Answer: {faq.answer}"
    return faq.question


def _top_k(ids: Tuple[str, ...], scores: np.ndarray, k: int) -> RankedList[RetrievalHit]:
    hits = [RetrievalHit(faq_id=faq_id, score=float(score)) for faq_id, score in zip(ids, scores)]
    hits.sort(key=rank_key)
    return RankedList[RetrievalHit](items=tuple(hits[:k]), k=k)


@dataclass(frozen=True)
class Bm25Index:
    ids: Tuple[str, ...]
    doc_term_freqs: Tuple[Dict[str, int], ...]
    doc_lengths: Tuple[int, ...]
    avg_doc_length: float
    doc_freq: Dict[str, int]
    n_docs: int
    k1: float = BM25_K1
    b: float = BM25_B
    with_answers: bool = False

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_terms: List[str], doc: int) -> float:
        tf_map = self.doc_term_freqs[doc]
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_lengths[doc] / self.avg_doc_length)
        total = 0.0
        for term in query_terms:
            tf = tf_map.get(term, 0)
            if tf:
                total += self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)
        return total


def build_bm25_index(corpus: FaqCorpus, with_answers: bool = False,
                     k1: float = BM25_K1, b: float = BM25_B) -> Bm25Index:
    streams = [
        tokenize(entry.question + (" " + entry.answer if with_answers else ""))
        for entry in corpus.entries
    ]
    doc_freq: Counter = Counter()
    for tokens in streams:
        doc_freq.update(set(tokens))
    lengths = tuple(len(tokens) for tokens in streams)
    # A corpus of questions with no alphanumeric tokens still needs a positive average
    avg = (sum(lengths) / len(lengths)) if sum(lengths) else 1.0
    return Bm25Index(
        ids=corpus.ids,
        doc_term_freqs=tuple(dict(Counter(tokens)) for tokens in streams),
        doc_lengths=lengths,
        avg_doc_length=avg,
        doc_freq=dict(doc_freq),
        n_docs=len(streams),
        k1=k1,
        b=b,
        with_answers=with_answers,
    )


def bm25_scores(index: Bm25Index, text: str) -> np.ndarray:
    terms = list(dict.fromkeys(tokenize(text)))
    return np.array([index.score(terms, doc) for doc in range(index.n_docs)], dtype=np.float64)


def bm25_top_k(index: Bm25Index, query: UserQuery, k: int, with_expansion: bool = False) -> RankedList[RetrievalHit]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return _top_k(index.ids, bm25_scores(index, query.retrieval_text(with_expansion)), k)


# --- Embeddings ---
@dataclass(frozen=True)
class EmbeddingIndex:
    ids: Tuple[str, ...]
    vectors: np.ndarray = field(repr=False)
    with_answers: bool = False

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)


def build_embedding_index(corpus: FaqCorpus, with_answers: bool, gateway) -> EmbeddingIndex:
    texts = [faq_embedding_text(entry, with_answers) for entry in corpus.entries]
    logger.info(f"Embedding {len(texts)} FAQs (with_answers={with_answers})")
    vectors = gateway.embed_batch(texts)
    return EmbeddingIndex(ids=corpus.ids, vectors=vectors, with_answers=with_answers)


def embed_query(gateway, text: str) -> np.ndarray:
    return gateway.embed_batch([text])[0]


def cosine_top_k(index: EmbeddingIndex, query_vec: np.ndarray, k: int) -> RankedList[RetrievalHit]:
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.ndim != 1 or query_vec.shape[0] != index.dimension:
        raise DimensionMismatch({"index": index.dimension, "query": int(query_vec.shape[-1])})
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.clip(index.vectors @ query_vec, -1.0, 1.0)
    return _top_k(index.ids, scores, k)


# --- Persistence: magic, header (dimension, with_answers, n), then (id, float32 LE vector) records ---
_MAGIC = b"FAQE"
_HEADER = struct.Struct("<4sIBI")
_ID_LEN = struct.Struct("<H")


def save_embedding_index(index: EmbeddingIndex, path: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    vectors = index.vectors.astype("<f4")
    with target.open("wb") as f:
        f.write(_HEADER.pack(_MAGIC, index.dimension, int(index.with_answers), len(index)))
        for faq_id, vector in zip(index.ids, vectors):
            encoded = faq_id.encode("utf-8")
            f.write(_ID_LEN.pack(len(encoded)))
            f.write(encoded)
            f.write(vector.tobytes())
    logger.info(f"Wrote embedding index ({len(index)} x {index.dimension}) to {target}")


def load_embedding_index(path: str) -> EmbeddingIndex:
    data = Path(path).read_bytes()
    magic, dimension, with_answers, n = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise FaqAnnotationError(f"{path} is not an embedding index file")
    offset = _HEADER.size
    ids: List[str] = []
    vectors = np.empty((n, dimension), dtype=np.float64)
    for row in range(n):
        (id_len,) = _ID_LEN.unpack_from(data, offset)
        offset += _ID_LEN.size
        ids.append(data[offset:offset + id_len].decode("utf-8"))
        offset += id_len
        vectors[row] = np.frombuffer(data, dtype="<f4", count=dimension, offset=offset)
        offset += 4 * dimension
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if n and not np.all(norms > 0):
        raise FaqAnnotationError(f"{path} holds a zero embedding vector")
    vectors /= norms
    return EmbeddingIndex(ids=tuple(ids), vectors=vectors, with_answers=bool(with_answers))


def index_path(index_dir: str, with_answers: bool) -> Path:
    return Path(index_dir) / ("faq_embeddings_qa.bin" if with_answers else "faq_embeddings_q.bin")


def load_or_build_indexes(corpus: FaqCorpus, gateway, index_dir: Optional[str],
                          variants: Tuple[bool, ...] = (False, True)) -> Dict[bool, EmbeddingIndex]:
    """
    Load persisted indexes that match the corpus ids, building (and saving)
    the others. Keyed by the with_answers flag.
    """
    indexes: Dict[bool, EmbeddingIndex] = {}
    for with_answers in variants:
        path = index_path(index_dir, with_answers) if index_dir else None
        if path is not None and path.exists():
            try:
                loaded = load_embedding_index(str(path))
                if loaded.ids == corpus.ids and loaded.with_answers == with_answers:
                    indexes[with_answers] = loaded
                    continue
                logger.warning(f"Index {path} does not match the corpus; rebuilding")
            except (OSError, struct.error, ValueError, FaqAnnotationError) as e:
                logger.warning(f"Cannot read index {path} ({e}); rebuilding")
        indexes[with_answers] = build_embedding_index(corpus, with_answers, gateway)
        if path is not None:
            try:
                save_embedding_index(indexes[with_answers], str(path))
            except OSError as e:
                logger.warning(f"Cannot persist index to {path}: {e}")
    return indexes
