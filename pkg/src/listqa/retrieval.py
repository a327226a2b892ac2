"""Passage index, top-k retrieval, recall@k and unanswerable routing."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .evalkit import tokenize

K1 = 1.2
B = 0.75
DEFAULT_TOP_K = 3


class RetrievalError(ValueError):
    pass


class DuplicateId(RetrievalError):
    pass


class EmptyQuery(RetrievalError):
    pass


class UnknownGoldId(RetrievalError):
    pass


def passage_text(passage) -> str:
    return "\n".join([passage.title, *(line.text for line in passage.lines)]).strip()


def bm25_idf(n_docs: int, doc_freq: int) -> float:
    # Lucene-style idf, never negative
    return math.log(1 + (n_docs - doc_freq + 0.5) / (doc_freq + 0.5))


def bm25_score(query_tokens, term_freqs: Counter, doc_len: int, avg_len: float, idf: dict[str, float],
               k1: float = K1, b: float = B) -> float:
    norm = k1 * (1 - b + b * doc_len / avg_len) if avg_len else k1
    score = 0.0
    for token in query_tokens:
        tf = term_freqs.get(token, 0)
        if tf:
            score += idf.get(token, 0.0) * tf * (k1 + 1) / (tf + norm)
    return score


@dataclass
class PassageIndex:
    passage_ids: list[str]
    texts: list[str]
    backend: str = "lexical"
    vectors: list[list[float]] | None = None
    dimension: int = 0
    k1: float = K1
    b: float = B
    _tfs: list[Counter] = field(default_factory=list, repr=False)
    _lens: list[int] = field(default_factory=list, repr=False)
    _idf: dict[str, float] = field(default_factory=dict, repr=False)
    _avg_len: float = field(default=0.0, repr=False)

    def __post_init__(self) -> None:
        if len(set(self.passage_ids)) != len(self.passage_ids):
            dupes = sorted(pid for pid, n in Counter(self.passage_ids).items() if n > 1)
            raise DuplicateId(f"duplicate passage ids: {dupes}")
        if self.backend == "lexical":
            self._build_lexical()
        elif self.backend == "embedding":
            if self.vectors is None or len(self.vectors) != len(self.passage_ids):
                raise RetrievalError("embedding index needs one vector per passage")
            dims = {len(v) for v in self.vectors}
            if len(dims) > 1:
                raise RetrievalError(f"inconsistent vector dimensions: {sorted(dims)}")
            self.dimension = dims.pop() if dims else 0
        else:
            raise RetrievalError(f"unknown backend {self.backend!r}")

    def __len__(self) -> int:
        return len(self.passage_ids)

    def _build_lexical(self) -> None:
        docs = [tokenize(t) for t in self.texts]
        self._tfs = [Counter(d) for d in docs]
        self._lens = [len(d) for d in docs]
        self._avg_len = sum(self._lens) / len(docs) if docs else 0.0
        df = Counter(t for tf in self._tfs for t in tf)
        self._idf = {t: bm25_idf(len(docs), n) for t, n in df.items()}

    def scores(self, query: str, gateway=None) -> list[float]:
        if not query or not query.strip():
            raise EmptyQuery("query is empty")
        if self.backend == "lexical":
            tokens = tokenize(query)
            return [bm25_score(tokens, tf, n, self._avg_len, self._idf, self.k1, self.b)
                    for tf, n in zip(self._tfs, self._lens)]
        if gateway is None:
            raise RetrievalError("embedding retrieval needs a gateway to embed the query")
        (q,) = gateway.embed([query])
        if len(q) != self.dimension:
            raise RetrievalError(f"query dimension {len(q)} != index dimension {self.dimension}")
        return [sum(a * b for a, b in zip(q, v)) for v in self.vectors]

    def save(self, path: str | Path, header: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            meta = {"backend": self.backend, "dimension": self.dimension, "count": len(self),
                    "k1": self.k1, "b": self.b}
            header = {"_header": header, **meta} if header is not None else meta
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for i, pid in enumerate(self.passage_ids):
                row = {"passage_id": pid, "text": self.texts[i]}
                if self.vectors is not None:
                    row["vector"] = self.vectors[i]
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> PassageIndex:
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            rows = [json.loads(line) for line in fh if line.strip()]
        if len(rows) != header["count"]:
            raise RetrievalError(f"{path}: header count {header['count']} != {len(rows)} entries")
        vectors = [r["vector"] for r in rows] if header["backend"] == "embedding" else None
        return cls([r["passage_id"] for r in rows], [r["text"] for r in rows], header["backend"],
                   vectors, k1=header.get("k1", K1), b=header.get("b", B))


def build_index(passages, backend: str = "lexical", gateway=None) -> PassageIndex:
    passages = list(passages)
    if not passages:
        raise RetrievalError("cannot index an empty passage list")
    ids = [p.passage_id for p in passages]
    texts = [passage_text(p) for p in passages]
    if backend == "embedding":
        if gateway is None:
            raise RetrievalError("embedding backend needs a gateway")
        return PassageIndex(ids, texts, "embedding", gateway.embed(texts))
    return PassageIndex(ids, texts, backend)


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[tuple[str, float], ...]
    k: int

    @property
    def passage_ids(self) -> list[str]:
        return [pid for pid, _ in self.ranked]


def retrieve(index: PassageIndex, query: str, k: int = DEFAULT_TOP_K, gateway=None) -> RetrievalResult:
    """Top-k passages by score; ties go to the smaller passage id."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    scores = index.scores(query, gateway)
    order = sorted(zip(index.passage_ids, scores), key=lambda pair: (-pair[1], pair[0]))
    return RetrievalResult(tuple(order[:k]), k)


def recall_at_k(index: PassageIndex, queries, k: int = DEFAULT_TOP_K, gateway=None) -> float:
    queries = list(queries)
    known = set(index.passage_ids)
    for _, gold in queries:
        if gold not in known:
            raise UnknownGoldId(gold)
    if not queries:
        return 0.0
    hits = sum(gold in retrieve(index, q, k, gateway).passage_ids for q, gold in queries)
    return hits / len(queries)


ANSWERABLE = "answerable"
UNANSWERABLE = "unanswerable"


def route(result: RetrievalResult, min_hits: int = 1, score_floor: float | None = None) -> str:
    """Unanswerable when fewer than ``min_hits`` passages survive the optional score floor."""
    hits = [s for _, s in result.ranked if score_floor is None or s >= score_floor]
    return ANSWERABLE if len(hits) >= min_hits else UNANSWERABLE
