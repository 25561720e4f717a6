"""Synthetic corpora and an exact retrieval oracle."""

from __future__ import annotations

import hashlib
import random
import re
from collections import Counter
from fractions import Fraction

WORD = re.compile(r"[a-z0-9]+")
BUCKETS = 256


def three_letter_vocab(rng: random.Random, size: int) -> list[str]:
    letters = "abcdefghijklmnopqrstuvwxyz"
    vocab: set[str] = set()
    while len(vocab) < size:
        vocab.add("".join(rng.choice(letters) for _ in range(3)))
    return sorted(vocab)


def corpus(n_docs: int = 100, words_per_doc: int = 5000, seed: int = 7) -> dict[str, str]:
    """Docs of 3-letter words: a 500-token chunk window holds exactly 500 words."""
    rng = random.Random(seed)
    vocab = three_letter_vocab(rng, 3000)
    docs = {}
    for d in range(n_docs):
        # each document leans on its own slice of the vocabulary
        topic = vocab[(d * 29) % len(vocab):][:200] or vocab[:200]
        docs[f"doc{d:03d}"] = " ".join(rng.choice(topic) if rng.random() < 0.6 else rng.choice(vocab) for _ in range(words_per_doc))
    return docs


def bucket_counts(text: str) -> Counter:
    return Counter(int.from_bytes(hashlib.blake2b(w.encode(), digest_size=4).digest(), "big") % BUCKETS for w in WORD.findall(text.lower()))


def exact_cos2(a: Counter, b: Counter) -> Fraction:
    """Squared cosine as an exact fraction; counts are nonnegative so ordering matches cosine."""
    na = sum(v * v for v in a.values())
    nb = sum(v * v for v in b.values())
    if not na or not nb:
        return Fraction(0)
    dot = sum(v * b[k] for k, v in a.items())
    return Fraction(dot * dot, na * nb)


def oracle_top_k(chunks: list[tuple[str, int, str]], query: str, k: int) -> list[tuple[str, int]]:
    q = bucket_counts(query)
    scored = [(exact_cos2(bucket_counts(text), q), doc, off) for doc, off, text in chunks]
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(doc, off) for _, doc, off in scored[:k]]


def oracle_index(chunks: list[tuple[str, int, str]]) -> list[tuple[str, int, Counter]]:
    """Bucket counts per chunk, computed once for repeated oracle queries."""
    return [(doc, off, bucket_counts(text)) for doc, off, text in chunks]


def oracle_ranking(index: list[tuple[str, int, Counter]], query: str) -> list[tuple[str, int]]:
    q = bucket_counts(query)
    scored = sorted(((exact_cos2(counts, q), doc, off) for doc, off, counts in index), key=lambda t: (-t[0], t[1], t[2]))
    return [(doc, off) for _, doc, off in scored]
