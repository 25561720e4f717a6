from __future__ import annotations

import json
from fractions import Fraction

import pytest

from patternloom.catalog import Catalog, Classification, default_catalog, lookup, orthogonality_report

ROWS = {
    "C1": ["Semantic Compaction", "Context Triage", "Multi-Modal Fusion", "Progressive Disclosure"],
    "C2": ["RAG Pipeline", "Hierarchical Retrieval", "Progress Tracking", "Failure Journal"],
    "C3": ["Chain-of-Thought", "Complexity-Based Routing", "Parallel Exploration", "Iterative Hypothesis Testing"],
    "C4": ["Prompt Chaining", "Tool Dispatch", "Plan-and-Execute", "Guardrail Sandwich"],
    "C5": ["Generator-Critic", "Skill Package", "Self-Heal Loop", "Experience Replay"],
    "C6": ["Handoff Chain", "Fan-Out/Gather", "Adversarial Review", "Hierarchical Delegation"],
    "C7": ["Approval Gate", "Progressive Commitment", "Observability Harness", "Blast Radius Control"],
}
ORIGINAL = {
    "Semantic Compaction", "Context Triage", "Progressive Disclosure", "Hierarchical Retrieval",
    "Progress Tracking", "Failure Journal", "Complexity-Based Routing", "Iterative Hypothesis Testing",
    "Guardrail Sandwich", "Skill Package", "Self-Heal Loop", "Approval Gate", "Progressive Commitment",
    "Observability Harness", "Blast Radius Control",
}


def test_counts():
    r = orthogonality_report()
    assert (r.named, r.original, r.empty) == (28, 15, 14)
    assert r.fill_ratio == Fraction(28, 42)
    assert r.to_dict()["fill"] == "28/42"


def test_every_row_holds_its_four_patterns_in_topology_order():
    cat = default_catalog()
    for c, names in ROWS.items():
        got = [e.name for e in sorted(cat.patterns_by_function(c), key=lambda e: e.topology.id)]
        assert got == names


def test_original_flags():
    assert {e.name for e in default_catalog().named() if e.status.original} == ORIGINAL


def test_lookup_named_and_empty():
    assert lookup("C5", "T1").name == "Generator-Critic"
    assert lookup("c5", "t5").name == "Self-Heal Loop"
    empty = lookup("C5", "T3")
    assert not empty.is_named and empty.to_dict()["status"] == "empty"


def test_lookup_unknown_coordinate():
    with pytest.raises(KeyError):
        lookup("C8", "T1")


def test_orthogonality_columns_and_rows():
    r = orthogonality_report()
    assert r.per_topology["T5"] == frozenset({"C2", "C3", "C5", "C6"})
    assert len(r.per_function["C3"]) == 4
    assert r.per_function["C5"] == frozenset({"T1", "T2", "T5", "T6"})
    assert r.flags == ()


def test_reflection_open_cells_are_parallel_and_orchestrate():
    cat = default_catalog()
    assert [t for t in cat.topologies if not cat.lookup("C5", t).is_named] == ["T3", "T4"]


def test_classification():
    cat = default_catalog()
    found = {e.name for e in cat.by_classification(Classification.FOUNDATIONAL)}
    cond = {e.name for e in cat.by_classification(Classification.CONDITIONAL)}
    assert found == {"Context Triage", "RAG Pipeline", "Complexity-Based Routing", "Generator-Critic"}
    assert cond == {"Blast Radius Control", "Fan-Out/Gather"}


def test_executable_patterns_are_named():
    cat = default_catalog()
    runnable = {e.name for e in cat.entries if e.executable}
    assert len(runnable) == 10 and all(cat.has_pattern(n) for n in runnable)


def test_by_name_accepts_slug():
    cat = default_catalog()
    assert cat.by_name("fan-out-gather") is cat.by_name("Fan-Out/Gather")


def test_env_override(tmp_path, monkeypatch):
    base = Catalog.load()
    doc = {
        "functions": [{"id": f.id, "name": f.name, "core_question": f.core_question} for f in base.functions.values()],
        "topologies": [{"id": t.id, "name": t.name, "structure": t.structure} for t in base.topologies.values()],
        "cells": [e.to_dict() for e in base.entries],
    }
    doc["cells"][0] = {"function": "C1", "topology": "T1", "status": "empty"}
    path = tmp_path / "alt.json"
    path.write_text(json.dumps(doc))
    monkeypatch.setenv("PATTERNLOOM_CATALOG", str(path))
    alt = Catalog.load()
    assert alt.orthogonality_report().named == 27


def test_rejects_incomplete_matrix():
    base = Catalog.load()
    doc = {
        "functions": [{"id": f.id, "name": f.name, "core_question": f.core_question} for f in base.functions.values()],
        "topologies": [{"id": t.id, "name": t.name, "structure": t.structure} for t in base.topologies.values()],
        "cells": [e.to_dict() for e in base.entries][:-1],
    }
    with pytest.raises(ValueError):
        Catalog.from_dict(doc)
