"""Independent reference implementations used to check the package.

These are deliberately written differently from the code under test:
the logic oracle works on numeric truth values, the LCS oracle fills a
full table, and the BM25 oracle recomputes every statistic from scratch.
"""
from __future__ import annotations

import math
import re

TRUTH = {"supported": 1.0, "contradicted": 0.0, "unknown": 0.5}


def kleene(relation: str, statuses: list[str]) -> str:
    values = [TRUTH[s] for s in statuses]
    v = min(values) if relation == "and" else max(values)
    return {1.0: "yes", 0.0: "no", 0.5: "uncertain"}[v]


def words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def lcs_table(a: list[str], b: list[str]) -> int:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) - 1, -1, -1):
        for j in range(len(b) - 1, -1, -1):
            if a[i] == b[j]:
                table[i][j] = 1 + table[i + 1][j + 1]
            else:
                table[i][j] = max(table[i + 1][j], table[i][j + 1])
    return table[0][0]


def rouge_l_oracle(candidate: str, reference: str) -> float:
    c, r = words(candidate), words(reference)
    if not c or not r:
        return 0.0
    lcs = lcs_table(c, r)
    if lcs == 0:
        return 0.0
    return 2 * lcs / (len(c) + len(r))


def bm25_oracle(query: str, docs: list[str], k1: float = 1.2, b: float = 0.75) -> list[float]:
    tokenized = [words(d) for d in docs]
    n = len(docs)
    avg = sum(len(d) for d in tokenized) / n
    out = []
    for doc in tokenized:
        score = 0.0
        for term in words(query):
            tf = doc.count(term)
            if not tf:
                continue
            df = sum(term in d for d in tokenized)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(doc) / avg))
        out.append(score)
    return out
