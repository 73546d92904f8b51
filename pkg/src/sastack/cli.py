"""Command-line front end.

Subcommands: plan (place the second stack for a program), instrument,
simulate (single trial with optional trace), attack (full experiment),
report (re-render a saved json report), validate-prob (overwrite
probability Monte Carlo vs exact oracle), and corpus.

Exit codes: 0 when all checked properties hold, 1 on a violation, 2 on
usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .asm_ir import emit_asm, parse_program
from .corpus import load_corpus
from .harness import (
    ExperimentSpec,
    compare_modes,
    emit_report,
    ExperimentReport,
    parse_mode_label,
    report_to_markdown,
    run_experiment,
)
from .instrument import (
    MODE_NONE,
    MODE_QS_BLOCK,
    InstrumentationConfig,
    instrument,
    prepare_plan,
)
from .machine import (
    AttackSchedule,
    mc_overwrite_probability,
    overwrite_probability_oracle,
    run_trial,
)
from .ssa_layout import addressing_mode, default_ssa_layout, load_plan, save_plan

ENV_SEED = "SASTACK_SEED"


def _default_seed() -> int:
    return int(os.environ.get(ENV_SEED, "0"))


def _add_plan_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--xsave", type=int, default=2048, help="XSAVE region bytes")
    p.add_argument("--misc", type=int, default=512, help="MISC region bytes")
    p.add_argument("--addressing", default="la48", choices=["la48", "la57"])
    p.add_argument("--o-bits", type=int, default=None, help="slot bit offset for the fallback case")
    p.add_argument(
        "-P", "--call-depth", type=int, default=None,
        help="maximum call depth (frame budget divisor)",
    )


def _resolve_depth(args) -> int:
    if args.call_depth is None:
        print(
            "warning: no --call-depth given; assuming 64 (frames are sized "
            "from the second-stack budget divided by this depth)",
            file=sys.stderr,
        )
        return 64
    return args.call_depth


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sastack",
        description="Save-area second-stack instrumentation and attack simulation",
    )
    parser.add_argument("--version", action="version", version=f"sastack {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="scan a program and place the second stack")
    p.add_argument("input", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    _add_plan_opts(p)

    p = sub.add_parser("instrument", help="apply an instrumentation pass")
    p.add_argument("input", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--mode", default=MODE_QS_BLOCK,
                   choices=["qs-block", "qs-intra", "varys", "none"])
    p.add_argument("--I", "--interval", dest="interval", type=int, default=8,
                   help="sentinel check spacing for varys mode")
    p.add_argument("--plan", type=Path, default=None, help="plan json (computed when absent)")
    p.add_argument("--seed", type=int, default=None)
    _add_plan_opts(p)

    p = sub.add_parser("simulate", help="run one trial of an instrumented program")
    p.add_argument("input", type=Path)
    p.add_argument("--plan", type=Path, default=None)
    p.add_argument("--mode", default=None,
                   choices=["qs-block", "qs-intra", "varys", "none"],
                   help="override mode recorded in the input's metadata header")
    p.add_argument("--entry", default=None)
    p.add_argument("--attack-at", default=None,
                   help="first interrupt boundary (retired index or 'random')")
    p.add_argument("--interval", type=int, default=1)
    p.add_argument("--max-aex", type=int, default=100000)
    p.add_argument("--stack-bytes", type=int, default=65536)
    p.add_argument("--budget", type=int, default=2_000_000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trace", action="store_true", help="print one line per event")

    p = sub.add_parser("attack", help="run the full experiment over the corpus")
    p.add_argument("--config", type=Path, default=None, help="experiment spec json")
    p.add_argument("--programs", nargs="*", default=None)
    p.add_argument("--modes", nargs="*", default=None,
                   help="mode labels, e.g. qs-block varys-4")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--fp-runs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("--format", nargs="*", default=["json", "markdown"],
                   choices=["json", "csv", "markdown"])
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("report", help="re-render a saved json report")
    p.add_argument("input", type=Path)
    p.add_argument("--format", default="markdown", choices=["json", "csv", "markdown"])
    p.add_argument("-o", "--output", type=Path, default=None)

    p = sub.add_parser("validate-prob", help="overwrite probability: Monte Carlo vs oracle")
    p.add_argument("--addressing", default="la48", choices=["la48", "la57"])
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--reg-model", default="uniform64",
                   choices=["uniform64", "address_like", "mixture"])
    p.add_argument("--mixture-p", type=float, default=0.5)
    p.add_argument("--o-bits", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("corpus", help="corpus inspection")
    p.add_argument("action", choices=["list"])
    return parser


def _cmd_plan(args) -> int:
    program = parse_program(args.input.read_text(encoding="utf-8"))
    cfg = InstrumentationConfig(
        mode=MODE_QS_BLOCK,
        addressing=addressing_mode(args.addressing),
        p_depth=_resolve_depth(args),
    )
    layout = default_ssa_layout(args.xsave, args.misc)
    plan = prepare_plan(program, cfg, layout=layout, o_req=args.o_bits)
    save_plan(plan, args.output)
    print(
        f"plan: s={plan.s} N={plan.n_bytes} o={plan.o_bits} "
        f"fallback={plan.fallback_mode} -> {args.output}"
    )
    return 0


def _cmd_instrument(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    program = parse_program(args.input.read_text(encoding="utf-8"))
    cfg = InstrumentationConfig(
        mode=args.mode,
        varys_interval=args.interval,
        addressing=addressing_mode(args.addressing),
        p_depth=_resolve_depth(args),
        seed=seed,
    )
    if args.plan is not None:
        plan = load_plan(args.plan)
    else:
        layout = default_ssa_layout(args.xsave, args.misc)
        plan = prepare_plan(program, cfg, layout=layout, o_req=args.o_bits)
    out, stats = instrument(program, plan, cfg)
    args.output.write_text(emit_asm(out), encoding="utf-8")
    print(
        f"{args.mode}: injected={stats.injected} modified={stats.modified} "
        f"size-ratio={stats.static_size_ratio:.3f} -> {args.output}"
    )
    for leaf in stats.unprotected_leaves:
        print(f"warning: unprotected leaf function {leaf!r}", file=sys.stderr)
    return 0


def _cmd_simulate(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    program = parse_program(args.input.read_text(encoding="utf-8"), entry=args.entry)
    mode = args.mode or program.meta.get("mode", MODE_NONE)
    plan = load_plan(args.plan) if args.plan is not None else None
    cfg = InstrumentationConfig(mode=mode)
    if mode.startswith("qs-") and plan is None:
        print("error: qs modes need --plan", file=sys.stderr)
        return 2
    sched = None
    if args.attack_at is not None:
        first = args.attack_at if args.attack_at == "random" else int(args.attack_at, 0)
        sched = AttackSchedule(first_aex_at=first, interval=args.interval,
                               max_aex=args.max_aex)
    trace = None
    if args.trace:
        trace = lambda retired, site, event: print(f"{retired}\t{site}\t{event}")
    result = run_trial(
        program, plan, cfg, sched=sched, seed=seed,
        budget=args.budget, stack_bytes=args.stack_bytes, trace=trace,
    )
    print(json.dumps(result.__dict__, indent=2, sort_keys=True, default=str))
    return 0


def _cmd_attack(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.config is not None:
        spec = ExperimentSpec.from_json_dict(json.loads(args.config.read_text()))
    else:
        spec = ExperimentSpec(
            programs=tuple(args.programs) if args.programs else None,
            modes=tuple(parse_mode_label(m) for m in args.modes)
            if args.modes
            else ExperimentSpec().modes,
            trials=args.trials,
            fp_runs=args.fp_runs,
            seed=seed,
        )
    progress = None
    if not args.quiet:
        progress = lambda prog, label, cell: print(
            f"{prog:16s} {label:10s} crash={cell.crash_rate:.2f} "
            f"delay={cell.mean_delay:6.2f} dyn={cell.dynamic_overhead:5.2f} "
            f"fp={cell.false_positives}"
        )
    report = run_experiment(spec, progress=progress)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for fmt in args.format:
        ext = {"json": "json", "csv": "csv", "markdown": "md"}[fmt]
        emit_report(report, fmt, args.out_dir / f"report.{ext}")

    # Property gate: the exit code reflects the headline guarantees.
    violations = []
    for (prog, label), cell in sorted(report.cells.items()):
        if label.startswith("qs-block"):
            if cell.crash_rate != 1.0:
                violations.append(f"{prog}/{label}: crash rate {cell.crash_rate}")
            if cell.entered_block_rate != 0.0:
                violations.append(f"{prog}/{label}: block guarantee violated")
        if cell.false_positives:
            violations.append(f"{prog}/{label}: {cell.false_positives} false positives")
    for v in violations:
        print(f"VIOLATION: {v}", file=sys.stderr)
    if not args.quiet and "qs-block" in report.mode_labels and "varys-4" in report.mode_labels:
        for cmp_row in compare_modes(report):
            print(
                f"compare {cmp_row.program:16s} delay {cmp_row.delay_base:6.2f} vs "
                f"{cmp_row.delay_other:6.2f}  dyn {cmp_row.overhead_base:5.2f} vs "
                f"{cmp_row.overhead_other:5.2f}  verdict="
                f"{cmp_row.comparable_security_lower_overhead}"
            )
    return 1 if violations else 0


def _cmd_report(args) -> int:
    report = ExperimentReport.from_json(args.input.read_text(encoding="utf-8"))
    if args.output is None:
        if args.format == "markdown":
            print(report_to_markdown(report), end="")
        else:
            emit_report(report, args.format, "/dev/stdout")
    else:
        emit_report(report, args.format, args.output)
    return 0


def _cmd_validate_prob(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    mode = addressing_mode(args.addressing)
    oracle = overwrite_probability_oracle(mode)
    estimate = mc_overwrite_probability(
        mode,
        o_bits=args.o_bits,
        reg_model=args.reg_model,
        samples=args.samples,
        seed=seed,
        mixture_p=args.mixture_p,
    )
    sigma = (oracle * (1 - oracle) / args.samples) ** 0.5
    print(f"oracle (uniform window): {oracle:.10f}")
    print(f"monte carlo ({args.reg_model}, {args.samples} samples): {estimate:.10f}")
    if args.reg_model == "uniform64":
        bound = 3 * sigma
        delta = abs(estimate - oracle)
        print(f"|delta| = {delta:.3e}, 3 sigma = {bound:.3e}")
        return 0 if delta <= bound else 1
    return 0


def _cmd_corpus(args) -> int:
    print(f"{'name':16s} {'blocks':>6s} {'avg blk':>8s} {'expected exit':>18s}")
    for entry in load_corpus():
        print(
            f"{entry.name:16s} {entry.block_count:6d} {entry.avg_block_size:8.2f} "
            f"{entry.expected_exit:#18x}  {entry.description}"
        )
    return 0


_COMMANDS = {
    "plan": _cmd_plan,
    "instrument": _cmd_instrument,
    "simulate": _cmd_simulate,
    "attack": _cmd_attack,
    "report": _cmd_report,
    "validate-prob": _cmd_validate_prob,
    "corpus": _cmd_corpus,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
