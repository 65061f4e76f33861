"""Passage corpus: chunking, storage, and BM25 top-k retrieval.

A corpus is an ordered collection of ~100-word passages, the unit of both
retrieval and citation. Retrieval is plain Okapi BM25 (k1=1.2, b=0.75) over
an inverted index; the searchable text of a passage is its title followed by
its body. Indexes are immutable after construction and safe for concurrent
read-only queries.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

from .errors import ConfigError

BM25_K1 = 1.2
BM25_B = 0.75
DEFAULT_TARGET_WORDS = 100

_TOKEN = re.compile(r"[a-z0-9]+")

INDEX_FORMAT = "treecite-index-v1"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Passage:
    """One retrievable, citable text chunk."""

    id: int
    title: str
    body: str
    word_count: int

    @classmethod
    def make(cls, id: int, title: str, body: str) -> "Passage":
        return cls(id=id, title=title, body=body, word_count=len(body.split()))

    def searchable_text(self) -> str:
        return f"{self.title} {self.body}"


@dataclass(frozen=True)
class RankedHit:
    """One retrieval result: passage id plus its (unitless) BM25 score."""

    passage_id: int
    score: float


@dataclass
class Corpus:
    """Ordered passages plus a label naming their source."""

    passages: list[Passage]
    source_label: str = "corpus"

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for p in self.passages:
            if p.id in seen:
                raise ConfigError(f"duplicate passage id {p.id}")
            seen.add(p.id)
            if not p.body.strip():
                raise ConfigError(f"passage {p.id} has an empty body")

    def __len__(self) -> int:
        return len(self.passages)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self.passages)

    def by_id(self, passage_id: int) -> Passage:
        for p in self.passages:
            if p.id == passage_id:
                return p
        raise KeyError(passage_id)


def chunk_documents(
    documents: Sequence[tuple[str, str]],
    target_words: int = DEFAULT_TARGET_WORDS,
    source_label: str = "chunked",
) -> Corpus:
    """Split (title, text) documents into consecutive passages of at most
    target_words whitespace tokens each. Passage ids are dense 0..n-1 in
    document order; concatenating a document's passages reproduces its word
    sequence exactly.
    """
    if target_words < 1:
        raise ConfigError(f"target_words must be >= 1, got {target_words}")
    if not documents:
        raise ConfigError("cannot chunk an empty document list")
    passages: list[Passage] = []
    next_id = 0
    for title, text in documents:
        words = text.split()
        for start in range(0, len(words), target_words):
            body = " ".join(words[start : start + target_words])
            passages.append(Passage.make(next_id, title, body))
            next_id += 1
    return Corpus(passages=passages, source_label=source_label)


class Retriever(Protocol):
    """Anything that can serve top-k passage retrieval for a query.

    BM25Index is the shipped implementation; a dense backend can slot in
    without touching the search engine.
    """

    def retrieve(self, query: str, k: int = 3) -> list[RankedHit]: ...

    def passage(self, passage_id: int) -> Passage: ...


class BM25Index:
    """Immutable inverted index with Okapi BM25 statistics.

    Building is single-threaded; queries are pure reads and may run
    concurrently from any number of workers.
    """

    def __init__(self, corpus: Corpus, k1: float = BM25_K1, b: float = BM25_B):
        if len(corpus) == 0:
            raise ConfigError("cannot index an empty corpus")
        self.corpus = corpus
        self.k1 = k1
        self.b = b
        self._by_id = {p.id: p for p in corpus}
        self._doc_len: dict[int, int] = {}
        # term -> list of (passage_id, term_frequency), in corpus order
        postings: dict[str, list[tuple[int, int]]] = {}
        for p in corpus:
            tokens = tokenize(p.searchable_text())
            self._doc_len[p.id] = len(tokens)
            for term, tf in Counter(tokens).items():
                postings.setdefault(term, []).append((p.id, tf))
        self._postings = postings
        self._n_docs = len(corpus)
        total = sum(self._doc_len.values())
        self._avgdl = total / self._n_docs if self._n_docs else 0.0

    def passage(self, passage_id: int) -> Passage:
        return self._by_id[passage_id]

    def document_frequency(self, term: str) -> int:
        return len(self._postings.get(term, ()))

    def _idf(self, term: str) -> float:
        df = self.document_frequency(term)
        return math.log((self._n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def retrieve(self, query: str, k: int = 3) -> list[RankedHit]:
        """Top-k passages by BM25 score, descending; ties broken by ascending
        passage id. Queries whose terms are all out of vocabulary return an
        empty list.
        """
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        terms = tokenize(query)
        if not terms:
            raise ConfigError("query is empty after tokenization")
        scores: dict[int, float] = {}
        for term in terms:
            postings = self._postings.get(term)
            if not postings:
                continue
            idf = self._idf(term)
            for pid, tf in postings:
                dl = self._doc_len[pid]
                denom = tf + self.k1 * (1 - self.b + self.b * dl / self._avgdl)
                scores[pid] = scores.get(pid, 0.0) + idf * tf * (self.k1 + 1) / denom
        ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
        return [RankedHit(pid, s) for pid, s in ranked[:k]]


def build_index(corpus: Corpus, k1: float = BM25_K1, b: float = BM25_B) -> BM25Index:
    """Build the immutable retrieval index over a corpus."""
    return BM25Index(corpus, k1=k1, b=b)


def bm25_score_all(
    corpus: Corpus, query: str, k1: float = BM25_K1, b: float = BM25_B
) -> dict[int, float]:
    """Exhaustively score every passage against the query with the BM25
    formula, no index. Kept as the independent reference the index is checked
    against; passages matching no query term are omitted.
    """
    docs = {p.id: Counter(tokenize(p.searchable_text())) for p in corpus}
    doc_len = {pid: sum(tf.values()) for pid, tf in docs.items()}
    n = len(corpus)
    avgdl = sum(doc_len.values()) / n
    df = {
        term: sum(1 for tf in docs.values() if term in tf)
        for term in {t for tf in docs.values() for t in tf}
    }
    scores: dict[int, float] = {}
    for pid in sorted(docs):
        tf_table = docs[pid]
        s = 0.0
        matched = False
        for term in tokenize(query):
            tf = tf_table.get(term, 0)
            if tf == 0:
                continue
            matched = True
            idf = math.log((n - df[term] + 0.5) / (df[term] + 0.5) + 1.0)
            denom = tf + k1 * (1 - b + b * doc_len[pid] / avgdl)
            s += idf * tf * (k1 + 1) / denom
        if matched:
            scores[pid] = s
    return scores


def load_corpus_jsonl(path: str | Path, source_label: str | None = None) -> Corpus:
    """Read a JSON Lines corpus, one {"id", "title", "text"} object per line.

    Missing ids are assigned sequentially. Malformed lines raise ConfigError
    with their 1-based line number.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus file not found: {path}")
    passages: list[Passage] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
            if not isinstance(obj, dict) or "text" not in obj:
                raise ConfigError(f"{path}: line {lineno} is not a passage object")
            pid = obj.get("id", len(passages))
            passages.append(Passage.make(int(pid), str(obj.get("title", "")), str(obj["text"])))
    if not passages:
        raise ConfigError(f"{path}: corpus is empty")
    return Corpus(passages=passages, source_label=source_label or path.stem)


def passages_from_docs(docs: Iterable[dict]) -> list[Passage]:
    """Build passages from a per-question "docs" array ({"title", "text", ...}
    objects); ids are assigned 0..n-1 in array order.
    """
    passages = []
    for i, doc in enumerate(docs):
        passages.append(Passage.make(i, str(doc.get("title", "")), str(doc["text"])))
    return passages


def save_index(index: BM25Index, path: str | Path) -> None:
    """Persist the index as JSON (corpus plus BM25 parameters). Rebuilding
    from this file yields bit-identical retrieval results.
    """
    payload = {
        "format": INDEX_FORMAT,
        "k1": index.k1,
        "b": index.b,
        "source_label": index.corpus.source_label,
        "passages": [
            {"id": p.id, "title": p.title, "text": p.body} for p in index.corpus
        ],
    }
    Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


def load_index(path: str | Path) -> BM25Index:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"index file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a valid index file: {exc}") from exc
    if payload.get("format") != INDEX_FORMAT:
        raise ConfigError(f"{path}: unknown index format {payload.get('format')!r}")
    passages = [
        Passage.make(int(p["id"]), str(p.get("title", "")), str(p["text"]))
        for p in payload["passages"]
    ]
    corpus = Corpus(passages=passages, source_label=payload.get("source_label", path.stem))
    return BM25Index(corpus, k1=float(payload["k1"]), b=float(payload["b"]))
