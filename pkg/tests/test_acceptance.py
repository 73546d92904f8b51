"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line.  Run with `pytest tests/test_acceptance.py -v -s`.

The two shared experiments run at the reference scale: 100 attacked trials
per (program, mode) with random single-step attack starts, and 1000 benign
runs per program for the false-positive count.
"""

import random
import time

import pytest

from sastack import (
    AttackSchedule,
    InstrumentationConfig,
    LA48,
    LA57,
    block_stats,
    compile_program,
    deliver_aex,
    emit_asm,
    instrument_quanshield,
    load,
    mc_overwrite_probability,
    normalize_asm,
    overwrite_probability_oracle,
    parse_program,
    prepare_plan,
    run_trial,
)
from sastack.corpus import load_corpus
from sastack.harness import ExperimentSpec, ModeSpec, run_experiment

SEED = 11


def _report(criterion: str, detail: str) -> None:
    print(f"[acceptance] {criterion}: PASS ({detail})")


@pytest.fixture(scope="module")
def qs_experiment():
    spec = ExperimentSpec(
        modes=(ModeSpec("qs-block"),), trials=100, fp_runs=1000, seed=SEED
    )
    start = time.monotonic()
    report = run_experiment(spec)
    return report, time.monotonic() - start


@pytest.fixture(scope="module")
def comparison_experiment():
    spec = ExperimentSpec(trials=100, fp_runs=10, seed=SEED)  # qs-block + varys 4/8/16/32
    return run_experiment(spec)


def test_criterion_1_golden_transformation(fig_source, fig_expected):
    start = time.monotonic()
    program = parse_program(fig_source)
    cfg = InstrumentationConfig(mode="qs-block", seed=0)
    plan = prepare_plan(program, cfg)
    out, stats = instrument_quanshield(program, plan, cfg)
    elapsed = time.monotonic() - start

    assert plan.frame_bytes["flag_check"] == 16
    assert stats.injected == 7
    assert stats.modified == 2
    roles = [i.role for i in out.functions["flag_check"].instructions() if i.role]
    assert roles == [
        "frame_add", "rbp_store", "slot_rewrite",           # entry block
        "reload", "slot_rewrite",                           # body block
        "reload", "dummy", "frame_sub",                     # exit block
        "reload",                                           # cold branch block
    ]
    assert normalize_asm(emit_asm(out)) == normalize_asm(fig_expected)
    assert elapsed < 1.0
    _report("C1 golden transformation", f"7 injected + 2 modified, frame 16 B, {elapsed:.3f}s")


def test_criterion_2_crash_rate(qs_experiment):
    report, elapsed = qs_experiment
    for prog in report.programs:
        cell = report.cell(prog, "qs-block")
        assert cell.crash_rate == 1.0, (prog, cell.crash_rate)
    assert elapsed < 60.0
    _report("C2 crash rate", f"1.0 on all {len(report.programs)} programs in {elapsed:.1f}s")


def test_criterion_3_block_guarantee(qs_experiment):
    report, _ = qs_experiment
    for prog in report.programs:
        cell = report.cell(prog, "qs-block")
        assert cell.entered_block_rate == 0.0, prog
    _report("C3 block guarantee", "no trial entered a block beyond the attacked block's successor")


def test_criterion_4_response_delay_tracks_block_size(qs_experiment):
    report, _ = qs_experiment
    lines = []
    for prog, info in sorted(report.programs.items()):
        cell = report.cell(prog, "qs-block")
        if info.avg_block_size < 9:
            assert cell.mean_delay <= 7.0, (prog, cell.mean_delay)
        assert cell.mean_delay <= 2 * info.avg_block_size, (
            prog, cell.mean_delay, info.avg_block_size,
        )
        lines.append(f"{prog}={cell.mean_delay:.2f}/{info.avg_block_size:.1f}")
    _report("C4 response delay", "; ".join(lines))


def test_criterion_5_overwrite_probability():
    start = time.monotonic()
    oracle48 = overwrite_probability_oracle(LA48)
    assert oracle48 == 1 - 2 / (1 << 16)
    samples = 1_000_000
    est48 = mc_overwrite_probability(LA48, samples=samples, seed=SEED)
    sigma48 = (oracle48 * (1 - oracle48) / samples) ** 0.5
    assert abs(est48 - oracle48) <= 3 * sigma48

    oracle57 = overwrite_probability_oracle(LA57)
    assert oracle57 == 1 - 2 / (1 << 7)
    est57 = mc_overwrite_probability(LA57, samples=samples, seed=SEED + 1)
    sigma57 = (oracle57 * (1 - oracle57) / samples) ** 0.5
    assert abs(est57 - oracle57) <= 3 * sigma57
    elapsed = time.monotonic() - start
    assert elapsed < 30.0
    _report(
        "C5 overwrite probability",
        f"LA48 {est48:.6f} vs {oracle48:.6f}; LA57 {est57:.6f} vs {oracle57:.6f}; "
        f"{elapsed:.1f}s",
    )


def test_criterion_6_false_positives(qs_experiment):
    report, _ = qs_experiment
    assert report.fp_runs == 1000
    for prog in report.programs:
        cell = report.cell(prog, "qs-block")
        assert cell.false_positives == 0, prog
    _report("C6 false positives", "0 in 1000 benign runs per program, exits match baseline")


def test_criterion_7_injection_bounds(comparison_experiment):
    report = comparison_experiment
    for entry in load_corpus():
        program = entry.load()
        stats = block_stats(program)
        cell = report.cell(entry.name, "qs-block")
        bound = 2 * (entry.block_count - 1) + 3 * len(program.functions)
        assert cell.injected <= bound, (entry.name, cell.injected, bound)
    # the polling baseline spends at least 3 instructions per check site
    from sastack.instrument import instrument_varys

    for entry in load_corpus():
        for interval in (4, 32):
            _, vstats = instrument_varys(entry.load(), interval)
            body = vstats.injected - 1  # minus the abort stub
            assert body >= 3 * vstats.check_sites
    _report("C7 injection bounds", "qs-block within 2(B-1)+3F; varys >= 3 per check site")


def test_criterion_8_trend_reproduction(comparison_experiment):
    report = comparison_experiment
    checked = []
    for prog, info in sorted(report.programs.items()):
        if info.avg_block_size > 9:
            continue
        qs = report.cell(prog, "qs-block")
        varys4 = report.cell(prog, "varys-4")
        assert qs.mean_delay <= 1.5 * varys4.mean_delay, (
            prog, qs.mean_delay, varys4.mean_delay,
        )
        assert qs.dynamic_overhead < varys4.dynamic_overhead, (
            prog, qs.dynamic_overhead, varys4.dynamic_overhead,
        )
        checked.append(
            f"{prog} {qs.mean_delay:.1f}<={1.5 * varys4.mean_delay:.1f},"
            f"{qs.dynamic_overhead:.2f}<{varys4.dynamic_overhead:.2f}"
        )
    assert len(checked) == 7  # all programs except the large-block one
    _report("C8 trend", "; ".join(checked))


def test_criterion_9_simulator_identities():
    # save/restore identity over 10^4 randomized states
    code = compile_program(parse_program("f:\n\tretq\n"))
    rng = random.Random(SEED)
    for _ in range(10_000):
        m = load(code)
        m.gpr = [rng.getrandbits(64) for _ in range(16)]
        m.zf, m.sf, m.cf, m.of = (rng.random() < 0.5 for _ in range(4))
        for img in m.lanes.values():
            img[:] = rng.randbytes(len(img))
        m.ssa_buf[:] = rng.randbytes(len(m.ssa_buf))
        before = (list(m.gpr), m.zf, m.sf, m.cf, m.of,
                  [bytes(v) for v in m.lanes.values()])
        deliver_aex(m)
        after = (list(m.gpr), m.zf, m.sf, m.cf, m.of,
                 [bytes(v) for v in m.lanes.values()])
        assert before == after

    # mode-none transparency over 10^4 attacked trials
    entries = load_corpus()
    cfg = InstrumentationConfig(mode="none")
    compiled = {e.name: compile_program(e.load(), None, cfg) for e in entries}
    baselines = {}
    for e in entries:
        r = run_trial(compiled[e.name])
        baselines[e.name] = (r.exit_value, r.retired)
    trials = 10_000
    for t in range(trials):
        e = entries[t % len(entries)]
        sched = AttackSchedule(
            first_aex_at=rng.randrange(0, baselines[e.name][1]),
            interval=rng.randrange(1, 64),
            max_aex=rng.randrange(1, 128),
        )
        r = run_trial(compiled[e.name], sched=sched)
        assert r.outcome == "clean_exit", (e.name, r)
        assert r.exit_value == baselines[e.name][0]
        assert r.retired == baselines[e.name][1]
    _report("C9 simulator identities", "10^4 save/restore states + 10^4 transparent trials")
