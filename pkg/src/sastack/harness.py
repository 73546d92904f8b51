"""Experiment driver: crash rate, response delay, overhead proxies, false
positives, and mode comparisons over the bundled corpus.

Overheads are instruction-count proxies: the static ratio compares
instrumented to original instruction counts, and the dynamic ratio compares
executed instructions of benign runs.  Wall-clock slowdown is out of scope.
The sentinel-polling baseline omits the original scheme's cache-eviction
and co-location machinery and is reported as "varys (AEX-check only)".
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import random
import statistics
from dataclasses import dataclass, field

from .corpus import CorpusEntry, load_corpus
from .instrument import (
    MODE_NONE,
    MODE_QS_BLOCK,
    MODE_VARYS,
    InstrumentationConfig,
    instrument,
    prepare_plan,
)
from .machine import (
    ATTACK_TAIL_MARGIN,
    AttackSchedule,
    CompiledProgram,
    compile_program,
    run_trial,
)
from .ssa_layout import LA48, AddressingMode


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModeSpec:
    mode: str
    interval: int = 8  # sentinel-check spacing; only meaningful for varys

    @property
    def label(self) -> str:
        return f"varys-{self.interval}" if self.mode == MODE_VARYS else self.mode

    def config(self, addressing: AddressingMode, p_depth: int, seed: int) -> InstrumentationConfig:
        return InstrumentationConfig(
            mode=self.mode,
            varys_interval=self.interval,
            addressing=addressing,
            p_depth=p_depth,
            seed=seed,
        )


def parse_mode_label(label: str) -> ModeSpec:
    if label.startswith("varys-"):
        return ModeSpec(MODE_VARYS, int(label.split("-", 1)[1]))
    if label == MODE_VARYS:
        return ModeSpec(MODE_VARYS)
    return ModeSpec(label)


DEFAULT_MODES = (
    ModeSpec(MODE_QS_BLOCK),
    ModeSpec(MODE_VARYS, 4),
    ModeSpec(MODE_VARYS, 8),
    ModeSpec(MODE_VARYS, 16),
    ModeSpec(MODE_VARYS, 32),
)


@dataclass(frozen=True)
class ExperimentSpec:
    programs: tuple[str, ...] | None = None  # None selects the whole corpus
    modes: tuple[ModeSpec, ...] = DEFAULT_MODES
    trials: int = 100
    fp_runs: int = 1000
    attack_interval: int = 1
    max_aex: int = 100000
    seed: int = 0
    p_depth: int = 64
    addressing: AddressingMode = LA48
    budget: int = 2_000_000

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @staticmethod
    def from_json_dict(data: dict) -> "ExperimentSpec":
        modes = tuple(parse_mode_label(m) for m in data.get("modes", [])) or DEFAULT_MODES
        return ExperimentSpec(
            programs=tuple(data["programs"]) if data.get("programs") else None,
            modes=modes,
            trials=data.get("trials", 100),
            fp_runs=data.get("fp_runs", 1000),
            attack_interval=data.get("attack_interval", 1),
            max_aex=data.get("max_aex", 100000),
            seed=data.get("seed", 0),
            p_depth=data.get("p_depth", 64),
        )


@dataclass(frozen=True)
class CellMetrics:
    """Results for one (program, mode) pair."""

    crash_rate: float
    mean_delay: float
    p95_delay: float
    max_delay: int
    entered_block_rate: float
    static_overhead: float
    dynamic_overhead: float
    false_positives: int
    trials: int
    fp_runs: int
    injected: int
    modified: int

    def metrics(self) -> dict[str, float]:
        return {
            "crash_rate": self.crash_rate,
            "mean_delay": self.mean_delay,
            "p95_delay": self.p95_delay,
            "max_delay": self.max_delay,
            "entered_block_rate": self.entered_block_rate,
            "static_overhead": self.static_overhead,
            "dynamic_overhead": self.dynamic_overhead,
            "false_positives": self.false_positives,
            "injected": self.injected,
            "modified": self.modified,
        }


@dataclass(frozen=True)
class ProgramInfo:
    name: str
    block_count: int
    avg_block_size: float
    baseline_retired: int
    expected_exit: int


@dataclass
class ExperimentReport:
    seed: int
    trials: int
    fp_runs: int
    mode_labels: list[str]
    programs: dict[str, ProgramInfo] = field(default_factory=dict)
    cells: dict[tuple[str, str], CellMetrics] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def cell(self, program: str, mode_label: str) -> CellMetrics:
        return self.cells[(program, mode_label)]

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "fp_runs": self.fp_runs,
            "modes": self.mode_labels,
            "notes": self.notes,
            "programs": {
                name: {
                    "block_count": info.block_count,
                    "avg_block_size": info.avg_block_size,
                    "baseline_retired": info.baseline_retired,
                    "expected_exit": info.expected_exit,
                }
                for name, info in sorted(self.programs.items())
            },
            "results": {
                prog: {
                    label: self.cells[(prog, label)].metrics()
                    for label in self.mode_labels
                    if (prog, label) in self.cells
                }
                for prog in sorted(self.programs)
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "ExperimentReport":
        data = json.loads(text)
        report = ExperimentReport(
            seed=data["seed"],
            trials=data["trials"],
            fp_runs=data["fp_runs"],
            mode_labels=list(data["modes"]),
            notes=list(data.get("notes", [])),
        )
        for name, p in data["programs"].items():
            report.programs[name] = ProgramInfo(
                name=name,
                block_count=p["block_count"],
                avg_block_size=p["avg_block_size"],
                baseline_retired=p["baseline_retired"],
                expected_exit=p["expected_exit"],
            )
        for prog, row in data["results"].items():
            for label, m in row.items():
                report.cells[(prog, label)] = CellMetrics(
                    crash_rate=m["crash_rate"],
                    mean_delay=m["mean_delay"],
                    p95_delay=m["p95_delay"],
                    max_delay=int(m["max_delay"]),
                    entered_block_rate=m["entered_block_rate"],
                    static_overhead=m["static_overhead"],
                    dynamic_overhead=m["dynamic_overhead"],
                    false_positives=int(m["false_positives"]),
                    trials=data["trials"],
                    fp_runs=data["fp_runs"],
                    injected=int(m["injected"]),
                    modified=int(m["modified"]),
                )
        return report


def _derive_seed(*parts) -> int:
    blob = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def _percentile(values: list[int], q: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    idx = min(len(ordered) - 1, max(0, round(q * (len(ordered) - 1))))
    return float(ordered[idx])


def run_experiment(spec: ExperimentSpec, progress=None) -> ExperimentReport:
    """Instrument each (program, mode) once, then run attacked trials with
    seeded random starts, benign runs for false positives, and a baseline
    run for the dynamic overhead proxy."""
    entries = load_corpus(list(spec.programs) if spec.programs else None)
    report = ExperimentReport(
        seed=spec.seed,
        trials=spec.trials,
        fp_runs=spec.fp_runs,
        mode_labels=[m.label for m in spec.modes],
        notes=["varys columns are the AEX-check-only baseline"],
    )

    for entry in entries:
        program = entry.load()
        none_cfg = InstrumentationConfig(mode=MODE_NONE)
        baseline_code = compile_program(program, None, none_cfg)
        baseline = run_trial(baseline_code, budget=spec.budget)
        if baseline.outcome != "clean_exit" or baseline.exit_value != entry.expected_exit:
            raise ExperimentError(
                f"{entry.name}: baseline run mismatch "
                f"(outcome={baseline.outcome}, exit={baseline.exit_value}, "
                f"expected={entry.expected_exit})"
            )
        report.programs[entry.name] = ProgramInfo(
            name=entry.name,
            block_count=entry.block_count,
            avg_block_size=entry.avg_block_size,
            baseline_retired=baseline.retired,
            expected_exit=entry.expected_exit,
        )

        qs_cfg = InstrumentationConfig(
            mode=MODE_QS_BLOCK, addressing=spec.addressing, p_depth=spec.p_depth, seed=spec.seed
        )
        plan = prepare_plan(program, qs_cfg)

        for mode in spec.modes:
            cfg = mode.config(spec.addressing, spec.p_depth, spec.seed)
            try:
                instrumented, overhead = instrument(program, plan, cfg)
                code = compile_program(instrumented, plan, cfg)
                cell = _run_cell(spec, entry, code, overhead, baseline.retired, mode)
            except Exception as exc:
                raise ExperimentError(f"{entry.name}/{mode.label}: {exc}") from exc
            report.cells[(entry.name, mode.label)] = cell
            if progress is not None:
                progress(entry.name, mode.label, cell)
    return report


def _detector_sites(code: CompiledProgram) -> set[str]:
    """Execution sites at which an earlier interrupt becomes observable: the
    frame-base reloads of the second-stack pass (the dummy that follows one
    only faults when the reload itself read a clobbered slot) and the
    sentinel compares of the polling baseline."""
    from .isa import MemOperand, Register

    sites: set[str] = set()
    reserved = code.cfg.reserved_register
    for fn in code.functions:
        for blk in fn.blocks:
            for ii, instr in enumerate(blk.instructions):
                if instr.provenance != "injected" or len(instr.operands) != 2:
                    continue
                src, dst = instr.operands
                src_is_reserved_mem = (
                    isinstance(src, MemOperand)
                    and src.base is not None
                    and src.base.index == reserved.index
                )
                if instr.mnemonic == "movq" and src_is_reserved_mem and \
                        isinstance(dst, Register) and dst.name == "rbp":
                    sites.add(f"{fn.name}:{blk.name}:{ii}")
                elif instr.mnemonic == "cmpq" and src_is_reserved_mem:
                    sites.add(f"{fn.name}:{blk.name}:{ii}")
    return sites


def _attack_start_bound(code: CompiledProgram, benign_retired: int, budget: int) -> int:
    """Exclusive upper bound for sampled attack starts.

    An interrupt delivered after the run's final detection point can no
    longer be observed (the program's result is already externally visible
    by then), so starts are sampled up to the last executed detector.  For
    undetecting modes the bound excludes only a short exit tail."""
    sites = _detector_sites(code)
    if not sites:
        return max(1, benign_retired - ATTACK_TAIL_MARGIN)
    last = -1

    def watch(retired: int, site: str, event: str) -> None:
        nonlocal last
        if event == "exec" and site in sites:
            last = retired

    run_trial(code, budget=budget, trace=watch)
    if last < 0:
        return max(1, benign_retired - ATTACK_TAIL_MARGIN)
    return last + 1


def _run_cell(
    spec: ExperimentSpec,
    entry: CorpusEntry,
    code: CompiledProgram,
    overhead,
    baseline_retired: int,
    mode: ModeSpec,
) -> CellMetrics:
    benign = run_trial(code, budget=spec.budget)
    if benign.outcome != "clean_exit" or benign.exit_value != entry.expected_exit:
        raise ExperimentError(
            f"benign instrumented run mismatch (outcome={benign.outcome}, "
            f"exit={benign.exit_value})"
        )
    start_hi = _attack_start_bound(code, benign.retired, spec.budget)

    crashes = 0
    entered = 0
    delays: list[int] = []
    for t in range(spec.trials):
        rng = random.Random(_derive_seed(spec.seed, entry.name, mode.label, "attack", t))
        sched = AttackSchedule(
            first_aex_at=rng.randrange(0, start_hi),
            interval=spec.attack_interval,
            max_aex=spec.max_aex,
        )
        result = run_trial(code, sched=sched, seed=rng.getrandbits(32), budget=spec.budget)
        if result.outcome == "crash":
            crashes += 1
            delays.append(result.aex_before_crash)
        if result.entered_block_after_attacked:
            entered += 1

    false_positives = 0
    for t in range(spec.fp_runs):
        fp_seed = _derive_seed(spec.seed, entry.name, mode.label, "benign", t)
        result = run_trial(
            code, seed=fp_seed, budget=spec.budget, randomize_registers=True
        )
        if result.outcome != "clean_exit" or result.exit_value != entry.expected_exit:
            false_positives += 1

    return CellMetrics(
        crash_rate=crashes / spec.trials,
        mean_delay=statistics.mean(delays) if delays else 0.0,
        p95_delay=_percentile(delays, 0.95),
        max_delay=max(delays) if delays else 0,
        entered_block_rate=entered / spec.trials,
        static_overhead=overhead.static_size_ratio,
        dynamic_overhead=benign.retired / baseline_retired if baseline_retired else 1.0,
        false_positives=false_positives,
        trials=spec.trials,
        fp_runs=spec.fp_runs,
        injected=overhead.injected,
        modified=overhead.modified,
    )


# -- rendering ----------------------------------------------------------------

_TABLE_METRICS = (
    ("crash_rate", "Crash rate"),
    ("mean_delay", "Mean response delay (AEX count)"),
    ("p95_delay", "p95 response delay (AEX count)"),
    ("entered_block_rate", "Entered block beyond successor (rate)"),
    ("static_overhead", "Static size ratio (proxy)"),
    ("dynamic_overhead", "Executed-instruction ratio (proxy)"),
    ("false_positives", "False positives"),
)


def report_to_markdown(report: ExperimentReport) -> str:
    out = io.StringIO()
    out.write("# Attack evaluation report\n\n")
    out.write(
        f"seed {report.seed}; {report.trials} attacked trials and "
        f"{report.fp_runs} benign runs per cell.\n"
    )
    for note in report.notes:
        out.write(f"Note: {note}.\n")
    out.write("\n## Corpus\n\n")
    out.write("| program | blocks | avg block size | baseline retired |\n")
    out.write("|---|---|---|---|\n")
    for name in sorted(report.programs):
        info = report.programs[name]
        out.write(
            f"| {name} | {info.block_count} | {info.avg_block_size:.2f} "
            f"| {info.baseline_retired} |\n"
        )
    for key, title in _TABLE_METRICS:
        out.write(f"\n## {title}\n\n")
        out.write("| program | " + " | ".join(report.mode_labels) + " |\n")
        out.write("|---" * (len(report.mode_labels) + 1) + "|\n")
        for prog in sorted(report.programs):
            row = [prog]
            for label in report.mode_labels:
                cell = report.cells.get((prog, label))
                if cell is None:
                    row.append("-")
                else:
                    value = cell.metrics()[key]
                    row.append(f"{value:.3f}" if isinstance(value, float) else str(value))
            out.write("| " + " | ".join(row) + " |\n")
    return out.getvalue()


def report_to_csv(report: ExperimentReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["program", "mode", "metric", "value"])
    for (prog, label) in sorted(report.cells):
        for metric, value in sorted(report.cells[(prog, label)].metrics().items()):
            writer.writerow([prog, label, metric, repr(value)])
    return out.getvalue()


def emit_report(report: ExperimentReport, fmt: str, path) -> None:
    if fmt == "json":
        text = report.to_json()
    elif fmt == "csv":
        text = report_to_csv(report)
    elif fmt == "markdown":
        text = report_to_markdown(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# -- trend comparison ---------------------------------------------------------

@dataclass(frozen=True)
class ProgramComparison:
    program: str
    avg_block_size: float
    delay_base: float
    delay_other: float
    overhead_base: float
    overhead_other: float
    comparable_security_lower_overhead: bool


def compare_modes(
    report: ExperimentReport,
    base_label: str = "qs-block",
    other_label: str = "varys-4",
    delay_factor: float = 1.5,
) -> list[ProgramComparison]:
    """Per program: is the second-stack pass within delay_factor of the
    polling baseline's response delay while executing fewer instructions?"""
    missing = [
        label
        for label in (base_label, other_label)
        if label not in report.mode_labels
    ]
    if missing:
        raise ExperimentError(f"report lacks mode columns: {missing}")
    out = []
    for prog in sorted(report.programs):
        base = report.cells[(prog, base_label)]
        other = report.cells[(prog, other_label)]
        verdict = (
            base.mean_delay <= other.mean_delay * delay_factor
            and base.dynamic_overhead < other.dynamic_overhead
        )
        out.append(
            ProgramComparison(
                program=prog,
                avg_block_size=report.programs[prog].avg_block_size,
                delay_base=base.mean_delay,
                delay_other=other.mean_delay,
                overhead_base=base.dynamic_overhead,
                overhead_other=other.dynamic_overhead,
                comparable_security_lower_overhead=verdict,
            )
        )
    return out
