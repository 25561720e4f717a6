"""Random plans and an independent saga replay oracle."""

from __future__ import annotations

import heapq
import random

from patternloom.reasoning_action import ExecutionRecord, Plan, SubTask


def random_plan(rng: random.Random, max_nodes: int = 12) -> Plan:
    n = rng.randint(1, max_nodes)
    ids = [f"n{i:02d}" for i in range(n)]
    rng.shuffle(ids)  # id order need not follow dependency order
    tasks = []
    for i, tid in enumerate(ids):
        deps = frozenset(d for d in ids[:i] if rng.random() < 0.3)
        comp = f"undo {tid}" if rng.random() < 0.7 else None
        tasks.append(SubTask(tid, f"task {tid}", deps, comp))
    rng.shuffle(tasks)
    return Plan(tuple(tasks))


def replay(plan: Plan, fail_at: str | None) -> tuple[list[str], list[str]]:
    """Sequential saga replay with a heap: returns (completed, compensated)."""
    indeg = {t.id: len(t.depends_on) for t in plan.tasks}
    children: dict[str, list[str]] = {t.id: [] for t in plan.tasks}
    for t in plan.tasks:
        for d in t.depends_on:
            children[d].append(t.id)
    heap = [i for i, n in indeg.items() if n == 0]
    heapq.heapify(heap)
    completed: list[str] = []
    failed = False
    while heap:
        tid = heapq.heappop(heap)
        if tid == fail_at:
            failed = True
            break
        completed.append(tid)
        for c in children[tid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, c)
    comp = {t.id: t.compensation for t in plan.tasks}
    compensated = [t for t in reversed(completed) if comp[t]] if failed else []
    return completed, compensated


def violations(plan: Plan, record: ExecutionRecord, fail_at: str | None) -> list[str]:
    """Saga safety checks that hold for sequential and wave-concurrent runs alike."""
    out = []
    deps = {t.id: t.depends_on for t in plan.tasks}
    seen: set[str] = set()
    for tid in record.completed:
        if not deps[tid] <= seen:
            out.append(f"{tid} ran before {sorted(deps[tid] - seen)}")
        seen.add(tid)
    if fail_at is not None:
        if fail_at in seen:
            out.append(f"failed task {fail_at} marked completed")
        if record.failed != fail_at:
            out.append(f"failure recorded at {record.failed}, expected {fail_at}")
        # nothing downstream of the failure may start
        downstream = {fail_at}
        changed = True
        while changed:
            changed = False
            for t, ds in deps.items():
                if t not in downstream and ds & downstream:
                    downstream.add(t)
                    changed = True
        if seen & downstream:
            out.append(f"dependents of {fail_at} ran: {sorted(seen & downstream)}")
        comp = {t.id: t.compensation for t in plan.tasks}
        if record.compensated != [t for t in reversed(record.completed) if comp[t]]:
            out.append("compensation order is not reverse completion order")
    elif record.compensated:
        out.append("compensated without a failure")
    return out
