"""``patternloom`` command line: one subcommand per module.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, TextIO

from patternloom import advisor, governance
from patternloom import reasoning_action as ra
from patternloom import reflection_collaboration as rc
from patternloom.catalog import Catalog
from patternloom.errors import PatternloomError
from patternloom.kernel import Context, TokenLedger, Trace, execute, load_workflow
from patternloom.model_backend import ScriptedModel
from patternloom.perception_memory import ingest

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


@dataclass
class CommandResult:
    exit_code: int
    output: str


class _UsageError(Exception):
    pass


@lru_cache(maxsize=1)
def _fixtures() -> dict[str, Any]:
    return json.loads(resources.files("patternloom").joinpath("data/fixtures.json").read_text())


def _model(args: argparse.Namespace, rules: list[dict[str, Any]] | None = None) -> ScriptedModel:
    """``--model-script`` wins over fixture rules, which win over the demo script."""
    if args.model_script:
        return ScriptedModel.load(args.model_script, seed=args.seed)
    if rules is not None:
        return ScriptedModel.from_rules(rules, seed=args.seed)
    demo = _fixtures()["demo_model"]
    return ScriptedModel.from_rules(demo["rules"], fallback=demo["fallback"], seed=args.seed)


def _read_json(path: str) -> Any:
    return json.loads(Path(path).read_text())


def _dump(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=str)


# -- handlers -------------------------------------------------------------------
# Each returns (json_payload, text); the dispatcher picks one.


Output = tuple[Any, str]


def _catalog(args: argparse.Namespace) -> Output:
    cat = Catalog.load()
    if args.catalog_cmd == "list":
        entries = cat.named()
        if args.topology:
            entries = cat.patterns_by_topology(args.topology.upper())
        if args.function:
            entries = [e for e in entries if e.function.id == args.function.upper()]
        lines = [f"{e.function.id} {e.topology.id}  {e.name}{' *' if e.status and e.status.original else ''}" for e in entries]
        return [e.to_dict() for e in entries], "\n".join(lines)
    if args.catalog_cmd == "show":
        e = cat.lookup(args.function_id, args.topology_id)
        head = f"{e.function.id} x {e.topology.id}: {e.function.name} / {e.topology.name}"
        if not e.status:
            return e.to_dict(), f"{head}\n(empty cell)"
        body = [
            head,
            f"pattern: {e.status.name} ({e.status.id})",
            f"original name: {'yes' if e.status.original else 'no'}",
            f"classification: {e.classification.value}",
            f"executable: {'yes' if e.executable else 'no'}",
            f"synopsis: {e.status.synopsis}",
        ]
        return e.to_dict(), "\n".join(body)
    report = cat.orthogonality_report()
    lines = [
        f"fill ratio: {report.named}/{report.named + report.empty} ({float(report.fill_ratio):.1%})",
        f"named: {report.named}  original: {report.original}  empty: {report.empty}",
    ]
    lines += [f"{t}: {len(fs)} function(s) {', '.join(sorted(fs))}" for t, fs in report.per_topology.items()]
    lines += [f"{c}: {len(ts)} topology(ies) {', '.join(sorted(ts))}" for c, ts in report.per_function.items()]
    lines += [f"flag: {f}" for f in report.flags]
    return report.to_dict(), "\n".join(lines)


def _ingest(args: argparse.Namespace) -> Output:
    store = ingest(args.directory, args.out, max_tokens=args.max_tokens)
    docs = len({c.doc_id for c in store.chunks})
    payload = {"documents": docs, "chunks": len(store.chunks), "out": args.out}
    text = f"documents: {docs}\nchunks: {len(store.chunks)}" + (f"\nwritten: {args.out}" if args.out else "")
    return payload, text


def _run(args: argparse.Namespace) -> Output:
    root = load_workflow(args.workflow)
    ledger = TokenLedger(budget_tokens=args.budget_tokens)
    ctx, trace = execute(root, Context(args.task), ledger, _model(args))
    if args.trace:
        trace.write(args.trace)
    payload = {
        "output": ctx.last_output,
        "history": [h.step for h in ctx.history],
        "total_tokens": ledger.total_tokens,
        "events": len(trace),
    }
    text = f"output: {ctx.last_output}\nsteps: {' -> '.join(payload['history'])}\ntokens: {ledger.total_tokens}\nevents: {len(trace)}"
    return payload, text


def _route(args: argparse.Namespace) -> Output:
    force = ra.TierId(args.force) if args.force else None
    r = ra.route_and_answer(args.query, _model(args), force_tier=force)
    payload = {"tier": r.tier.id.value, "answer": r.answer, "cost": str(r.cost), "score": ra.complexity_score(args.query)}
    return payload, f"tier: {r.tier.id.value}\nanswer: {r.answer}\ncost: ${r.cost}"


def _cost_report(args: argparse.Namespace) -> Output:
    report = ra.daily_cost_report(ra.parse_mix(args.mix))
    d = report.to_dict()
    lines = [f"{k}: {v}" for k, v in d.items() if not isinstance(v, dict)]
    return d, "\n".join(lines)


def _plan_path(name: str) -> Any:
    """A file path, or the stem of a bundled plan such as ``deploy_report``."""
    if Path(name).exists():
        return name
    bundled = resources.files("patternloom").joinpath(f"data/plans/{name}.json")
    return bundled if bundled.is_file() else name


def _saga(args: argparse.Namespace) -> Output:
    p = ra.Plan.load(_plan_path(args.plan))
    order = ra.topological_order(p)
    rec = ra.execute_plan(p, fail_at=args.fail_at)
    payload = {"order": order, "completed": rec.completed, "failed": rec.failed, "compensated": rec.compensated}
    lines = [f"order: {' '.join(order)}", f"completed: {' '.join(rec.completed) or '-'}"]
    if rec.failed:
        lines += [f"failed: {rec.failed}", f"compensated: {' '.join(rec.compensated) or '-'}"]
    return payload, "\n".join(lines)


def _reflect(args: argparse.Namespace) -> Output:
    fx = _fixture("reflect", args.task)
    r = rc.generator_critic(fx["task"], _model(args, fx["rules"]), threshold=fx.get("threshold", rc.DEFAULT_THRESHOLD), bias=args.bias)
    payload = {"draft": r.draft, "passes": r.passes, "score": r.score, "accepted": r.accepted}
    return payload, f"passes: {r.passes}\nscore: {r.score}\naccepted: {r.accepted}\ndraft: {r.draft}"


def _heal(args: argparse.Namespace) -> Output:
    fx = _fixture("heal", args.fixture)
    cap = args.max_iterations or fx["max_iterations"]
    h = rc.self_heal(fx["task"], _model(args, fx["rules"]), rc.Verifier.from_dict(fx["verifier"]), cap)
    payload = {"draft": h.draft, "iterations": h.iterations, "passed": h.passed, "diagnostics": [list(d) for d in h.diagnostics]}
    lines = [f"iterations: {h.iterations}", f"passed: {h.passed}", f"draft: {h.draft}"]
    lines += [f"attempt {i}: {'; '.join(d) or 'ok'}" for i, d in enumerate(h.diagnostics, 1)]
    return payload, "\n".join(lines)


_STRATEGIES = {
    "concat": rc.GatherStrategy.STRUCTURED_CONCAT,
    "majority": rc.GatherStrategy.MAJORITY_VOTE,
    "synthesis": rc.GatherStrategy.COORDINATOR_SYNTHESIS,
}


def _fanout(args: argparse.Namespace) -> Output:
    subtasks = [f"item-{i}" for i in range(1, args.n + 1)]
    g = rc.fan_out_gather(subtasks, _model(args), _STRATEGIES[args.strategy])
    d = g.to_dict()
    text = f"strategy: {g.strategy.value}\naggregate: {g.aggregate}\nconflicts: {', '.join(g.conflicts) or '-'}"
    return d, text


def _load_action(path: str) -> governance.ActionRequest:
    return governance.ActionRequest.from_dict(_read_json(path))


def _presets() -> dict[str, Any]:
    return json.loads(resources.files("patternloom").joinpath("data/governance.json").read_text())


def _gate(args: argparse.Namespace) -> Output:
    action = _load_action(args.action)
    rules = governance.RuleSet.load(args.rules) if args.rules else governance.RuleSet.from_dict(_presets()["rules"])
    d = governance.evaluate_gate(action, rules)
    text = f"verdict: {d.verdict.value}" + (f"\nmatched rule: {d.matched_rule}" if d.matched_rule else "")
    return d.to_dict(), text


def _containment(args: argparse.Namespace) -> Output:
    action = _load_action(args.action)
    if args.hierarchy:
        hierarchy = governance.ContainmentHierarchy.load(args.hierarchy)
    else:
        hierarchy = governance.ContainmentHierarchy.from_list(_presets()["hierarchy"])
    d = governance.check_containment(action, hierarchy, governance.Usage(args.calls, args.spend))
    text = "permitted" if d.permitted else f"blocked by {d.level}: {d.reason}"
    return d.to_dict(), text


def _advise(args: argparse.Namespace) -> Output | CommandResult:
    if args.advise_cmd == "check-fixtures":
        checks = advisor.check_fixtures()
        passed = sum(c.passed for c in checks)
        lines = [
            f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.recommendation.primary_topology}, "
            f"{c.recommendation.pattern_count} patterns, {c.recommendation.governance_focus}"
            + ("" if c.passed else f" ({'; '.join(c.mismatches)})")
            for c in checks
        ]
        lines.append(f"{passed}/{len(checks)} fixtures pass")
        payload = {"passed": passed, "total": len(checks), "fixtures": [c.to_dict() for c in checks]}
        code = EXIT_OK if passed == len(checks) else EXIT_DOMAIN
        return CommandResult(code, _dump(payload) if args.json else "\n".join(lines))
    if args.advise_cmd is not None:
        raise _UsageError(f"unknown advise action {args.advise_cmd!r}")
    missing = [f for f in ("time", "volume", "authority") if getattr(args, f) is None]
    if missing:
        raise _UsageError("advise needs " + ", ".join(f"--{m}" for m in missing))
    c = advisor.DomainConstraints.from_dict(
        {
            "time_budget": args.time,
            "volume": args.volume,
            "authority": args.authority,
            "failure_asymmetry": args.asymmetry,
            "domain_tag": args.domain,
        }
    )
    rec = advisor.recommend(c)
    return rec.to_dict(), rec.summary()


def _report(args: argparse.Namespace) -> Output:
    trace = Trace.from_jsonl(Path(args.trace).read_text())
    r = governance.harness_report(trace)
    if r.empty:
        return r.to_dict(), "empty trace"
    lines = [f"{row['path']}: {row['tokens_in']}+{row['tokens_out']} tokens ${row['dollars']:.4f}" for row in r.steps]
    lines += [
        f"total tokens: {r.total_tokens}",
        f"total dollars: {r.total_dollars:.4f}",
        f"blocked actions: {r.blocked_actions}",
        f"containment blocks: {r.containment_blocks}",
    ]
    lines += [f"gate {k}: {v}" for k, v in sorted(r.gate_decisions.items())]
    lines += [f"loop {k}: {v} iteration(s)" for k, v in sorted(r.iterations.items())]
    return r.to_dict(), "\n".join(lines)


def _fixture(kind: str, name: str) -> dict[str, Any]:
    table = _fixtures()[kind]
    if name not in table:
        raise KeyError(f"unknown {kind} fixture {name!r}; choose from {', '.join(sorted(table))}")
    return table[name]


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="emit JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="scripted backend seed")
    common.add_argument("--model-script", default=argparse.SUPPRESS, help="JSON script for the scripted backend")

    parser = argparse.ArgumentParser(prog="patternloom", parents=[common], description="Agent pattern kernel, catalog and advisor.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name: str, fn: Callable[..., Any], help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(handler=fn)
        return p

    p = add("catalog", _catalog, "query the pattern matrix")
    csub = p.add_subparsers(dest="catalog_cmd", metavar="action", required=True)
    lp = csub.add_parser("list", parents=[common])
    lp.add_argument("--topology")
    lp.add_argument("--function")
    sp = csub.add_parser("show", parents=[common])
    sp.add_argument("function_id")
    sp.add_argument("topology_id")
    csub.add_parser("report", parents=[common])

    p = add("ingest", _ingest, "chunk and embed a directory of text files")
    p.add_argument("directory")
    p.add_argument("--out")
    p.add_argument("--max-tokens", type=int, default=500)

    p = add("run", _run, "execute a JSON workflow descriptor")
    p.add_argument("workflow")
    p.add_argument("--task", default="")
    p.add_argument("--trace", help="write the JSONL trace here")
    p.add_argument("--budget-tokens", type=int)

    p = add("route", _route, "classify a query and answer on its tier")
    p.add_argument("--query", required=True)
    p.add_argument("--force", choices=[t.value for t in ra.TierId])

    p = add("cost-report", _cost_report, "daily cost of a query mix")
    p.add_argument("--mix", required=True, help="e.g. s1=50000,s2=0,ext=50000")

    p = add("saga-run", _saga, "run a plan with compensation on failure")
    p.add_argument("plan")
    p.add_argument("--fail-at")

    p = add("reflect", _reflect, "Generator-Critic on a built-in fixture")
    p.add_argument("--task", "--fixture", dest="task", default="two-pass")
    p.add_argument("--bias", type=float, default=0.0)

    p = add("heal", _heal, "Self-Heal Loop on a built-in fixture")
    p.add_argument("--fixture", default="schema-repair")
    p.add_argument("--max-iterations", type=int)

    p = add("fanout", _fanout, "Fan-Out/Gather over n scripted workers")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--strategy", choices=sorted(_STRATEGIES), default="majority")

    p = add("gate", _gate, "approval gate")
    gsub = p.add_subparsers(dest="gate_cmd", metavar="action", required=True)
    ge = gsub.add_parser("eval", parents=[common])
    ge.add_argument("action")
    ge.add_argument("--rules")

    p = add("containment", _containment, "blast radius containment")
    ksub = p.add_subparsers(dest="containment_cmd", metavar="action", required=True)
    kc = ksub.add_parser("check", parents=[common])
    kc.add_argument("action")
    kc.add_argument("--hierarchy")
    kc.add_argument("--calls", type=int, default=0)
    kc.add_argument("--spend", type=float, default=0.0)

    p = add("advise", _advise, "recommend patterns for domain constraints")
    p.add_argument("advise_cmd", nargs="?", metavar="check-fixtures")
    p.add_argument("--time")
    p.add_argument("--volume")
    p.add_argument("--authority")
    p.add_argument("--asymmetry", default="symmetric")
    p.add_argument("--domain")

    p = add("report", _report, "summarize a JSONL trace")
    p.add_argument("trace")
    return parser


def dispatch(argv: Sequence[str]) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
        return CommandResult(code, "")
    args.json = getattr(args, "json", False)
    args.seed = getattr(args, "seed", 0)
    args.model_script = getattr(args, "model_script", None)
    if not args.command:
        return CommandResult(EXIT_USAGE, parser.format_usage())
    try:
        result = args.handler(args)
    except _UsageError as exc:
        return CommandResult(EXIT_USAGE, f"{parser.format_usage()}error: {exc}")
    except (PatternloomError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        return CommandResult(EXIT_DOMAIN, f"error: {msg}")
    if isinstance(result, CommandResult):
        return result
    payload, text = result
    return CommandResult(EXIT_OK, _dump(payload) if args.json else text)


def main(argv: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    result = dispatch(sys.argv[1:] if argv is None else argv)
    failed = result.exit_code == EXIT_USAGE or result.output.startswith("error:")
    stream = out or (sys.stderr if failed else sys.stdout)
    if result.output:
        print(result.output, file=stream)
    return result.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
