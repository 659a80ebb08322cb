"""
Command-line entry point: learn, check, serve, eval and inspect.

Run with `PYTHONPATH=src python -m core.cli <command> --help`.
Exit codes: 0 success / allow, 2 alert, 3 terminate, 1 usage or IO error.
"""
import argparse
import json
import logging
import pathlib
import sys
import time
from typing import Any, Dict, List, Optional, Sequence

import yaml

from core import config, evalkit, runner
from core.enforcer import EnforceConfig, InvocationContext, check_invocation
from core.errors import GuardianError
from core.policy_store import PolicyRepository, render_policy
from core.trace_model import assemble_sequences


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CODES = {"allow": 0, "alert": 2, "terminate": 3}
LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML settings file (default: configs/settings.yaml if present)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--policies", default=None, help="Policy directory [GUARDIAN_POLICY_DIR]")
    common.add_argument("--aggregator-endpoint", default=None, help="External aggregator URL [GUARDIAN_AGGREGATOR_ENDPOINT]")
    common.add_argument("--aggregator-timeout-ms", type=int, default=None, help="[GUARDIAN_AGGREGATOR_TIMEOUT_MS]")

    parser = argparse.ArgumentParser(prog="guardian", description="Learn and enforce tool-call access-control policies.")
    sub = parser.add_subparsers(dest="command", required=True)

    learn = sub.add_parser("learn", parents=[common], help="Learn policies from benign trace logs")
    learn.add_argument("--traces", default=None, help="Trace log file or directory of *.jsonl")
    learn.add_argument("--out", default=None, help="Output policy directory (default: --policies)")
    learn.add_argument("--min-freq", type=int, default=None)
    learn.add_argument("--merge-threshold", type=float, default=None)
    learn.add_argument("--aggregator", choices=["none", "external"], default=None)
    learn.add_argument("--timezone-offset", type=int, default=None, help="Minutes east of UTC for hour attributes")

    check = sub.add_parser("check", parents=[common], help="Check one tool invocation")
    check.add_argument("--role", required=True)
    check.add_argument("--tool", required=True)
    check.add_argument("--input", default="")
    check.add_argument("--prior", default="", help="Comma-separated tools already invoked in this trace")
    check.add_argument("--thoughts", default="")
    check.add_argument("--input-tokens", type=int, default=0)
    check.add_argument("--output-tokens", type=int, default=0)
    check.add_argument("--timestamp", type=int, default=None, help="Epoch ms (default: now)")
    check.add_argument("--idle-ms", type=int, default=0)
    check.add_argument("--processing-ms", type=int, default=0)

    serve = sub.add_parser("serve", parents=[common], help="Serve the enforcement endpoint")
    serve.add_argument("--bind", default=None, help="host:port [GUARDIAN_BIND]")
    serve.add_argument("--fail", choices=["closed", "open"], default=None, help="[GUARDIAN_FAIL_MODE]")

    ev = sub.add_parser("eval", parents=[common], help="Run a learn-then-enforce experiment")
    ev.add_argument("--app", choices=list(evalkit.APPS) + ["all"], default="all")
    ev.add_argument("--n-benign", type=int, default=100)
    ev.add_argument("--n-violation", type=int, default=10)
    ev.add_argument("--seed", type=int, default=None, help="Default: derived from the clock, always printed")
    ev.add_argument("--out", default=None, help="Directory for report.json, report.txt and learned policies (default: <outputs_dir>/eval-<seed>)")
    ev.add_argument("--sample-sizes", default=None, help="Comma-separated staging sizes for the input-tightening study, e.g. 10,30,60")
    ev.add_argument("--study-tool", default="file_writer", help="Tool whose inputs the tightening study learns from")

    inspect = sub.add_parser("inspect", parents=[common], help="Render policies or the effective settings")
    inspect.add_argument("what", nargs="?", choices=["policies", "config"], default="policies")
    inspect.add_argument("--rule-id", default=None)
    return parser


def settings_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "paths": {"policy_dir": getattr(args, "policies", None), "traces": getattr(args, "traces", None)},
        "learn": {"min_freq": getattr(args, "min_freq", None)},
        "cluster": {"merge_threshold": getattr(args, "merge_threshold", None)},
        "embed": {"timezone_offset_minutes": getattr(args, "timezone_offset", None)},
        "aggregator": {
            "name": getattr(args, "aggregator", None),
            "endpoint": getattr(args, "aggregator_endpoint", None),
            "timeout_ms": getattr(args, "aggregator_timeout_ms", None),
        },
        "serve": {"bind": getattr(args, "bind", None), "fail_mode": getattr(args, "fail", None)},
    }
    return config.load_settings(args.config, overrides=overrides)


def cmd_learn(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    sequences = assemble_sequences(runner.load_traces(settings["paths"]["traces"]))
    result = runner.learn_policies(sequences, settings, runner.select_aggregator(settings))
    out = args.out or settings["paths"]["policy_dir"]
    runner.write_policies(result.policies, out)

    print(f"Learned {len(result.policies)} policies from {len(sequences)} traces into {out}")
    for s in result.summary:
        flagged = f", {s.flagged_clusters} flagged" if s.flagged_clusters else ""
        print(f"  {s.agent_role} / {s.tool_name}: {s.invocations} calls, {s.clusters} clusters{flagged}, {s.patterns} patterns")
    if result.flagged_sequences:
        print(f"Rare sequences flagged: {', '.join(seq.trace_id for seq in result.flagged_sequences)}")
    for warning in result.warnings:
        print(f"Warning: {warning}")
    return EXIT_OK


def _load_repo(settings: Dict[str, Any]) -> PolicyRepository:
    repo = PolicyRepository(settings["paths"]["policy_dir"])
    repo.reload()
    return repo


def cmd_check(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    repo = _load_repo(settings)
    ctx = InvocationContext(
        agent_role=args.role,
        tool_name=args.tool,
        tool_input=args.input,
        thoughts=args.thoughts,
        input_tokens=args.input_tokens,
        output_tokens=args.output_tokens,
        timestamp=args.timestamp if args.timestamp is not None else int(time.time() * 1000),
        idle_ms=args.idle_ms,
        processing_ms=args.processing_ms,
        prior_tools=tuple(t.strip() for t in args.prior.split(",") if t.strip()),
    )
    verdict = check_invocation(ctx, repo.snapshot(), EnforceConfig.from_settings(settings))
    print(json.dumps(verdict.to_dict(), indent=2))
    return EXIT_CODES[verdict.decision]


def cmd_serve(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    from core.service import serve

    serve(
        settings["serve"]["bind"],
        _load_repo(settings),
        EnforceConfig.from_settings(settings),
        settings["serve"]["fail_mode"],
        float(settings["serve"]["prefix_ttl_s"]),
    )
    return EXIT_OK


def run_eval(
    apps: Sequence[str],
    n_benign: int,
    n_violation: int,
    seed: int,
    settings: Dict[str, Any],
) -> List[evalkit.ExperimentResult]:
    eval_cfg = settings["eval"]
    results = []
    for app in apps:
        script = evalkit.load_scenario(app, eval_cfg.get("scenarios_dir"))
        staging, test = evalkit.experiment_corpora(
            app,
            n_benign,
            n_violation,
            seed,
            float(eval_cfg["staging_fraction"]),
            float(eval_cfg["hallucination_rate"]),
            eval_cfg.get("scenarios_dir"),
        )
        agent = script.get("display_name", app)
        results.append(evalkit.run_experiment(staging, test, settings, agent=agent))
    return results


def cmd_eval(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    seed = args.seed if args.seed is not None else int(time.time()) % 100_000
    print(f"seed: {seed}")
    if args.sample_sizes:
        return _sample_size_study(args, settings, seed)

    apps = list(evalkit.APPS) if args.app == "all" else [args.app]
    results = run_eval(apps, args.n_benign, args.n_violation, seed, settings)
    reports = [r.report for r in results]
    if len(reports) > 1:
        reports.append(evalkit.pool_reports(reports))
    table = evalkit.render_table(reports)
    print(table)

    if args.out:
        out = pathlib.Path(args.out)
    else:
        config.ensure_directories(settings)
        out = pathlib.Path(settings["paths"]["outputs_dir"]) / f"eval-{seed}"
    out.mkdir(parents=True, exist_ok=True)
    doc = {"seed": seed, "reports": [r.to_dict() for r in reports]}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    for result in results:
        runner.write_policies(result.policies, out / "policies")
    logger.info("Wrote evaluation report to %s", out)
    return EXIT_OK


def _sample_size_study(args: argparse.Namespace, settings: Dict[str, Any], seed: int) -> int:
    sizes = sorted({int(s) for s in args.sample_sizes.split(",") if s.strip()})
    if not sizes or sizes[0] < 1:
        raise ValueError("--sample-sizes needs positive integers")
    app = "knowledge_assistant" if args.app == "all" else args.app
    eval_cfg = settings["eval"]
    corpus = evalkit.generate_scenarios(app, sizes[-1], 0, seed, 0.0, eval_cfg.get("scenarios_dir"))
    inputs = evalkit.tool_inputs(corpus, args.study_tool)
    if len(inputs) < sizes[-1]:
        raise ValueError(f"only {len(inputs)} {args.study_tool} inputs in the generated corpus")
    probes = evalkit.random_probes(int(eval_cfg["probe_count"]), int(eval_cfg["probe_length"]), seed)
    rates = evalkit.acceptance_by_sample_size(inputs, sizes, probes, runner.select_aggregator(settings))
    print(f"{args.study_tool} acceptance of {len(probes)} random probes:")
    for n in sizes:
        print(f"  {n:>4} samples: {rates[n]:.4f}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    if args.what == "config":
        print(yaml.safe_dump(config.flatten(settings), sort_keys=True, default_flow_style=False).rstrip())
        return EXIT_OK
    repo = _load_repo(settings)
    if args.rule_id:
        policy = repo.get(args.rule_id)
        if policy is None:
            print(f"No policy with rule_id {args.rule_id!r}", file=sys.stderr)
            return EXIT_ERROR
        policies = [policy]
    else:
        policies = repo.list()
    print("\n\n".join(render_policy(p) for p in policies))
    return EXIT_OK


COMMANDS = {
    "learn": cmd_learn,
    "check": cmd_check,
    "serve": cmd_serve,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        settings = settings_from_args(args)
        return COMMANDS[args.command](args, settings)
    except (GuardianError, OSError, ValueError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
