"""Context Triage and the RAG pipeline.

Embeddings are hashed bag-of-words vectors (256 buckets, unit norm), a
deterministic stand-in for a learned embedding model.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from patternloom.errors import BudgetTooSmall, EmptyStore
from patternloom.kernel import (
    Chain,
    Context,
    Priority,
    Step,
    StepOutcome,
    TokenLedger,
    Trace,
    execute,
)
from patternloom.model_backend import ModelBackend, tokenize

DIMENSION = 256
CHUNK_TOKENS = 500
RELEVANCE_THRESHOLD = 0.2
# scores are rounded so float noise cannot reorder mathematically tied chunks
_SCORE_DECIMALS = 12

_WORD = re.compile(r"[a-z0-9]+")


def keywords(text: str) -> set[str]:
    return set(_WORD.findall(text.lower()))


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


# -- triage -----------------------------------------------------------------


class SourceKind(str, Enum):
    USER_MESSAGE = "user_message"
    HISTORY = "history"
    PROJECT_FILE = "project_file"
    DOCUMENTATION = "documentation"
    TOOL_OUTPUT = "tool_output"
    RETRIEVED = "retrieved"
    METADATA = "metadata"


@dataclass(frozen=True)
class InfoSource:
    id: str
    content: str
    kind: SourceKind
    cache_friendly: bool = False

    @property
    def tokens(self) -> int:
        return tokenize(self.content)


@dataclass
class TriagePlan:
    assignments: dict[str, Priority]
    loaded: list[str]
    tokens_used: int
    on_demand: list[str] = field(default_factory=list)
    relevance: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "assignments": {k: v.value for k, v in self.assignments.items()},
            "loaded": self.loaded,
            "tokens_used": self.tokens_used,
            "on_demand": self.on_demand,
            "relevance": self.relevance,
        }


def relevance(source: InfoSource | str, task: str) -> float:
    """Share of the task's keywords that also occur in the source."""
    task_words = keywords(task)
    if not task_words:
        return 0.0
    content = source.content if isinstance(source, InfoSource) else source
    return len(keywords(content) & task_words) / len(task_words)


def assign_priority(source: InfoSource, task: str, score: float | None = None) -> Priority:
    kind = SourceKind(source.kind)
    if kind is SourceKind.USER_MESSAGE:
        return Priority.P0
    if kind is SourceKind.TOOL_OUTPUT:
        return Priority.P1
    if kind in (SourceKind.PROJECT_FILE, SourceKind.DOCUMENTATION, SourceKind.RETRIEVED):
        score = relevance(source, task) if score is None else score
        return Priority.P1 if score >= RELEVANCE_THRESHOLD else Priority.P2
    if kind is SourceKind.HISTORY:
        return Priority.P2
    task_words = keywords(task)
    if "metadata" in task_words or keywords(source.id) & task_words:
        return Priority.P1
    return Priority.P3


def triage(sources: list[InfoSource], task: str, budget: int) -> TriagePlan:
    """Assign P0-P3 and load sources into a token budget.

    P0 loads unconditionally, P1 loads by descending relevance until the next
    one no longer fits, P2 is left for on-demand loading and P3 never loads.
    """
    ids = [s.id for s in sources]
    if len(set(ids)) != len(ids):
        raise ValueError("source ids must be unique")
    scores = {s.id: relevance(s, task) for s in sources}
    assignments = {s.id: assign_priority(s, task, scores[s.id]) for s in sources}

    p0 = [s for s in sources if assignments[s.id] is Priority.P0]
    p0_tokens = sum(s.tokens for s in p0)
    if p0_tokens > budget:
        raise BudgetTooSmall(f"P0 sources need {p0_tokens} tokens, budget is {budget}")

    loaded = [s.id for s in p0]
    used = p0_tokens
    p1 = sorted(
        (s for s in sources if assignments[s.id] is Priority.P1),
        key=lambda s: (-scores[s.id], not s.cache_friendly, s.id),
    )
    for s in p1:
        if used + s.tokens > budget:
            break
        loaded.append(s.id)
        used += s.tokens
    on_demand = sorted(s.id for s in sources if assignments[s.id] is Priority.P2)
    return TriagePlan(assignments, loaded, used, on_demand, scores)


def triage_step(sources: list[InfoSource], budget: int, name: str = "context-triage") -> Step:
    """Kernel step that loads triaged sources into context slots."""
    by_id = {s.id: s for s in sources}

    def handler(ctx: Context, backend: ModelBackend) -> StepOutcome:
        plan = triage(sources, ctx.task, budget)
        writes = {sid: (by_id[sid].content, plan.assignments[sid]) for sid in plan.loaded}
        return StepOutcome(output=json.dumps(plan.loaded), writes=writes, tokens_in=plan.tokens_used)

    return Step(name, "C1", handler)


# -- embedding and store --------------------------------------------------------


def _bucket(word: str) -> int:
    return int.from_bytes(hashlib.blake2b(word.encode(), digest_size=4).digest(), "big") % DIMENSION


def embed(text: str) -> np.ndarray:
    vec = np.zeros(DIMENSION)
    for w in words(text):
        vec[_bucket(w)] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    offset: int
    text: str
    vector: np.ndarray = field(repr=False, compare=False)

    @property
    def tokens(self) -> int:
        return tokenize(self.text)

    @property
    def key(self) -> tuple[str, int]:
        return (self.doc_id, self.offset)


def chunk_text(text: str, max_tokens: int = CHUNK_TOKENS) -> list[tuple[int, str]]:
    """Split into consecutive windows of at most ``max_tokens``, no overlap.

    Windows end on whitespace where possible; returns ``(offset, text)`` pairs.
    """
    limit = max_tokens * 4
    out: list[tuple[int, str]] = []
    pos = 0
    n = len(text)
    while pos < n:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            break
        end = min(pos + limit, n)
        if end < n and not text[end].isspace():
            cut = text.rfind(" ", pos, end)
            cut = max(cut, text.rfind("\n", pos, end))
            if cut > pos:
                end = cut
        piece = text[pos:end].rstrip()
        out.append((pos, piece))
        pos = end
    return out


class KnowledgeStore:
    def __init__(self, chunks: list[Chunk], max_tokens: int = CHUNK_TOKENS) -> None:
        self.chunks = list(chunks)
        self.max_tokens = max_tokens
        self.dimension = DIMENSION
        self._matrix = np.vstack([c.vector for c in self.chunks]) if self.chunks else np.zeros((0, DIMENSION))

    def __len__(self) -> int:
        return len(self.chunks)

    @classmethod
    def from_documents(cls, docs: dict[str, str], max_tokens: int = CHUNK_TOKENS) -> KnowledgeStore:
        chunks = [
            Chunk(doc_id, offset, piece, embed(piece))
            for doc_id in sorted(docs)
            for offset, piece in chunk_text(docs[doc_id], max_tokens)
        ]
        return cls(chunks, max_tokens)

    @classmethod
    def from_directory(cls, directory: str | Path, max_tokens: int = CHUNK_TOKENS) -> KnowledgeStore:
        root = Path(directory)
        docs = {p.relative_to(root).as_posix(): p.read_text() for p in sorted(root.rglob("*")) if p.is_file()}
        return cls.from_documents(docs, max_tokens)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dimension": self.dimension,
            "max_tokens": self.max_tokens,
            "chunks": [
                {"doc_id": c.doc_id, "offset": c.offset, "text": c.text, "vector": c.vector.tolist()} for c in self.chunks
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> KnowledgeStore:
        if data.get("dimension", DIMENSION) != DIMENSION:
            raise ValueError(f"store dimension must be {DIMENSION}")
        chunks = [Chunk(c["doc_id"], c["offset"], c["text"], np.asarray(c["vector"], dtype=float)) for c in data["chunks"]]
        return cls(chunks, data.get("max_tokens", CHUNK_TOKENS))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> KnowledgeStore:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def scores(self, query: str) -> np.ndarray:
        return np.round(self._matrix @ embed(query), _SCORE_DECIMALS)


def ingest(directory: str | Path, out: str | Path | None = None, max_tokens: int = CHUNK_TOKENS) -> KnowledgeStore:
    store = KnowledgeStore.from_directory(directory, max_tokens)
    if out is not None:
        store.save(out)
    return store


def retrieve(store: KnowledgeStore, query: str, k: int) -> list[Chunk]:
    """Top-``k`` chunks by cosine similarity; ties go to the smaller (doc_id, offset)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(store):
        raise EmptyStore("knowledge store has no chunks")
    scores = store.scores(query)
    order = sorted(range(len(store)), key=lambda i: (-scores[i], store.chunks[i].key))
    return [store.chunks[i] for i in order[:k]]


def rerank(chunks: list[Chunk], question: str) -> list[Chunk]:
    """Stable sort by keyword overlap with the question, highest first."""
    q = keywords(question)
    return sorted(chunks, key=lambda c: -len(keywords(c.text) & q))


# -- RAG as a kernel chain ------------------------------------------------------


def _encode_chunks(chunks: list[Chunk]) -> str:
    return json.dumps([{"doc_id": c.doc_id, "offset": c.offset} for c in chunks])


@dataclass
class RagResult:
    answer: str
    ranked: list[Chunk]
    context: Context
    trace: Trace
    ledger: TokenLedger


def rag_workflow(store: KnowledgeStore, k: int, *, max_tokens: int = 512) -> Chain:
    index = {c.key: c for c in store.chunks}

    def decode(ctx: Context, slot: str) -> list[Chunk]:
        return [index[(d["doc_id"], d["offset"])] for d in json.loads(ctx.get(slot, "[]"))]

    def build_query(ctx: Context, backend: ModelBackend) -> StepOutcome:
        query = " ".join(words(ctx.task))
        return StepOutcome(output=query, writes={"query": query})

    def do_retrieve(ctx: Context, backend: ModelBackend) -> StepOutcome:
        hits = retrieve(store, ctx.get("query"), k)
        return StepOutcome(
            output=_encode_chunks(hits),
            writes={"retrieved": _encode_chunks(hits)},
            tokens_in=sum(c.tokens for c in hits),
        )

    def do_rerank(ctx: Context, backend: ModelBackend) -> StepOutcome:
        ranked = rerank(decode(ctx, "retrieved"), ctx.task)
        return StepOutcome(output=_encode_chunks(ranked), writes={"ranked": _encode_chunks(ranked)})

    def generate(ctx: Context, backend: ModelBackend) -> StepOutcome:
        evidence = "\n\n".join(c.text for c in decode(ctx, "ranked"))
        prompt = f"QUESTION: {ctx.task}\n\nEVIDENCE:\n{evidence}\n\nANSWER:"
        done = backend.complete(prompt, max_tokens)
        # retrieved evidence was already billed by the retrieve step
        return StepOutcome(
            output=done.text,
            writes={"answer": done.text},
            tokens_in=tokenize(f"QUESTION: {ctx.task}\n\nEVIDENCE:\n\n\nANSWER:"),
            tokens_out=done.tokens_out,
        )

    return Chain(
        [
            Step("query-build", "C2", build_query),
            Step("retrieve", "C2", do_retrieve),
            Step("rerank", "C2", do_rerank),
            Step("generate", "C2", generate),
        ],
        name="rag-pipeline",
    )


def rag_pipeline(
    store: KnowledgeStore,
    question: str,
    k: int,
    model: ModelBackend,
    ledger: TokenLedger | None = None,
) -> RagResult:
    if not len(store):
        raise EmptyStore("knowledge store has no chunks")
    ledger = ledger if ledger is not None else TokenLedger()
    ctx, trace = execute(rag_workflow(store, k), Context(question), ledger, model)
    index = {c.key: c for c in store.chunks}
    ranked = [index[(d["doc_id"], d["offset"])] for d in json.loads(ctx.get("ranked", "[]"))]
    return RagResult(ctx.get("answer"), ranked, ctx, trace, ledger)
