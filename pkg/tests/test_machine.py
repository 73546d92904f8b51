import random

import pytest

from sastack import (
    AttackSchedule,
    InstrumentationConfig,
    LA48,
    LA57,
    LoadError,
    TrialBudgetExceeded,
    compile_program,
    deliver_aex,
    instrument,
    instrument_varys,
    is_canonical,
    load,
    mc_overwrite_probability,
    overwrite_probability_oracle,
    overwrite_survival_oracle,
    parse_program,
    prepare_plan,
    run_trial,
    step,
)
from sastack.corpus import load_corpus
from sastack.instrument import MODE_QS_BLOCK, MODE_QS_INTRA
from sastack.machine import (
    DATA_BASE,
    PRIME_QWORD,
    SSA_BASE,
    STACK_TOP,
    Machine,
    SimulationError,
)
from sastack.ssa_layout import default_ssa_layout, plan_second_stack, with_frames
from sastack.ssa_layout import FeatureSet, EXTENDED_CLASSES


def _compiled(src: str, mode="none", plan=None, **cfg_kw):
    program = parse_program(src)
    cfg = InstrumentationConfig(mode=mode, **cfg_kw)
    return compile_program(program, plan, cfg), cfg


def _fallback_plan(o_req=16):
    layout = default_ssa_layout()
    ranges = layout.class_ranges()
    feats = FeatureSet(
        used_classes=frozenset(EXTENDED_CLASSES),
        used_ranges=tuple(sorted(ranges.values())),
    )
    return plan_second_stack(layout, feats, LA48, o_req=o_req)


# -- load -----------------------------------------------------------------------

def test_load_primes_extended_lanes():
    code, _ = _compiled("f:\n\tretq\n")
    m = load(code)
    for cls, img in m.lanes.items():
        assert len(img) % 8 == 0
        for off in range(0, len(img), 8):
            assert int.from_bytes(img[off : off + 8], "little") == PRIME_QWORD


def test_load_mode_none_zeroes_registers():
    code, _ = _compiled("f:\n\tretq\n")
    m = load(code)
    assert m.gpr[4] == STACK_TOP - 8  # rsp at the primed halt slot
    assert all(v == 0 for i, v in enumerate(m.gpr) if i != 4)


def test_load_qs_sets_reserved_register():
    program = parse_program("f:\n\tpushq\t%rbp\n\tmovq\t%rsp, %rbp\n\tpopq\t%rbp\n\tretq\n")
    cfg = InstrumentationConfig(mode=MODE_QS_BLOCK)
    plan = prepare_plan(program, cfg)
    out, _ = instrument(program, plan, cfg)
    m = load(out, plan, cfg)
    assert m.gpr[14] == SSA_BASE + plan.s  # o = 0


def test_load_fallback_applies_bit_offset():
    plan = with_frames(_fallback_plan(o_req=16), {"f": 8}, {"f": 0})
    src = "f:\n\tpushq\t%rbp\n\tmovq\t%rsp, %rbp\n\tpopq\t%rbp\n\tretq\n"
    program = parse_program(src)
    cfg = InstrumentationConfig(mode=MODE_QS_INTRA)
    out, _ = instrument(program, plan, cfg)
    m = load(out, plan, cfg)
    assert m.gpr[14] == SSA_BASE + plan.s + 2  # o/8 arithmetic


def test_load_rejects_missing_frames():
    program = parse_program("f:\n\tretq\n")
    plan = _fallback_plan()
    cfg = InstrumentationConfig(mode=MODE_QS_BLOCK)
    with pytest.raises(LoadError, match="frame"):
        compile_program(program, plan, cfg)


def test_load_rejects_reserved_register_use():
    program = parse_program("f:\n\tmovq\t$1, %r14\n\tretq\n")
    plan = with_frames(_fallback_plan(), {"f": 8}, {"f": 0})
    cfg = InstrumentationConfig(mode=MODE_QS_BLOCK)
    with pytest.raises(LoadError, match="reserved"):
        compile_program(program, plan, cfg)


def test_load_randomized_registers_seeded():
    code, _ = _compiled("f:\n\tretq\n")
    a = load(code, seed=5, randomize_registers=True)
    b = load(code, seed=5, randomize_registers=True)
    c = load(code, seed=6, randomize_registers=True)
    assert a.gpr == b.gpr
    assert a.gpr != c.gpr
    assert a.gpr[4] == STACK_TOP - 8


# -- stepping and crashes ----------------------------------------------------------

def test_step_non_canonical_dereference_crashes():
    code, _ = _compiled("f:\n\tmovq\t-8(%rbp), %r10\n\tretq\n")
    m = load(code)
    m.gpr[5] = 0xAAAAAAAAAAAAAAAA
    assert step(m) == "crash"
    assert m.crash_reason == "non_canonical_access"
    assert m.crash_site == "f:b0:0"
    assert not is_canonical(m.crash_addr, LA48)


def test_step_mapped_ssa_read_runs():
    code, _ = _compiled("f:\n\tmovq\t(%r14), %rbp\n\tretq\n")
    m = load(code)
    m.gpr[14] = SSA_BASE + 64
    m.ssa_buf[64:72] = (0x123456).to_bytes(8, "little")
    assert step(m) == "running"
    assert m.gpr[5] == 0x123456


def test_step_canonical_unmapped_crashes():
    code, _ = _compiled("f:\n\tmovq\t$0x70000000, %rax\n\tmovq\t(%rax), %rcx\n\tretq\n")
    m = load(code)
    assert step(m) == "running"
    assert step(m) == "crash"
    assert m.crash_reason == "unmapped_access"


def test_corrupted_slot_load_then_dereference_crashes(fig_program):
    # the second-frame slot feeds a dereference two instructions later
    cfg = InstrumentationConfig(mode=MODE_QS_BLOCK)
    plan = prepare_plan(fig_program, cfg)
    out, _ = instrument(fig_program, plan, cfg)
    code = compile_program(out, plan, cfg)
    m = load(code, plan, cfg)
    m.gpr[2] = DATA_BASE  # rdx holds a valid pointer, stored to the slot
    # run the prologue (add, push, mov, store, sub, lea-free stores)
    while m.bi == 0 and m.outcome == "running":
        step(m)
    deliver_aex(m)  # clobbers the generic slot with the primed value
    result = "running"
    while result == "running":
        result = step(m)
    assert result == "crash"
    assert m.crash_reason == "non_canonical_access"
    assert m.crash_site.startswith("flag_check:%bb.1")


# -- interrupt delivery --------------------------------------------------------------

def _randomize(m: Machine, rng: random.Random) -> None:
    m.gpr = [rng.getrandbits(64) for _ in range(16)]
    m.zf, m.sf, m.cf, m.of = (rng.random() < 0.5 for _ in range(4))
    for img in m.lanes.values():
        img[:] = rng.randbytes(len(img))
    m.ssa_buf[:] = rng.randbytes(len(m.ssa_buf))


def test_deliver_aex_register_round_trip():
    code, _ = _compiled("f:\n\tretq\n")
    rng = random.Random(77)
    for _ in range(200):
        m = load(code)
        _randomize(m, rng)
        before = (list(m.gpr), m.zf, m.sf, m.cf, m.of,
                  {c: bytes(v) for c, v in m.lanes.items()})
        deliver_aex(m)
        after = (list(m.gpr), m.zf, m.sf, m.cf, m.of,
                 {c: bytes(v) for c, v in m.lanes.items()})
        assert before == after
        assert m.aex_count == 1


def test_deliver_aex_clobbers_second_stack_slot():
    code, _ = _compiled("f:\n\tretq\n")
    m = load(code)
    # a canonical value stored in unused-class save bytes
    m.ssa_buf[0:8] = (0x7FFF12345678).to_bytes(8, "little")
    deliver_aex(m)
    assert int.from_bytes(m.ssa_buf[0:8], "little") == PRIME_QWORD
    assert not is_canonical(PRIME_QWORD, LA48)


def test_deliver_aex_writes_gpr_dump_in_documented_order():
    code, _ = _compiled("f:\n\tretq\n")
    m = load(code)
    m.gpr = list(range(100, 116))
    g = m._gpr_dump_off
    deliver_aex(m)
    for k in range(16):
        assert int.from_bytes(m.ssa_buf[g + 8 * k : g + 8 * k + 8], "little") == 100 + k


def test_fallback_overlap_splices_next_gpr_low_bits():
    # documented overlap for the o-bit offset: a slot at dump offset +o/8
    # takes its top 16 bits from bits [0,16) of the next-higher dump qword
    plan = _fallback_plan(o_req=16)
    code, _ = _compiled("f:\n\tretq\n")
    m = load(code)
    g = m._gpr_dump_off
    assert plan.s == g
    slot_addr_off = g + 2 + 8 * 3  # slot above three 8-byte frames, +o/8
    m.ssa_buf[slot_addr_off : slot_addr_off + 8] = (0x00007FFF0000AAAA).to_bytes(8, "little")
    m.gpr = [(0x1111111111110000 + k) for k in range(16)]
    deliver_aex(m)
    slot = int.from_bytes(m.ssa_buf[slot_addr_off : slot_addr_off + 8], "little")
    next_qword = m.gpr[4]  # dump order is rax..r15: offset 8*4 holds rsp... index 4
    assert (slot >> 48) == (next_qword & 0xFFFF)


def test_mode_none_aex_transparency_single_program():
    entry = load_corpus(["bitfield"])[0]
    code = compile_program(entry.load(), None, InstrumentationConfig(mode="none"))
    benign = run_trial(code)
    attacked = run_trial(code, sched=AttackSchedule(first_aex_at=5, interval=7, max_aex=50))
    assert attacked.outcome == "clean_exit"
    assert attacked.exit_value == benign.exit_value == entry.expected_exit
    assert attacked.aex_before_crash == 50


# -- trials ----------------------------------------------------------------------------

def test_benign_trial_clean_exit():
    code, _ = _compiled("f:\n\tmovq\t$41, %rax\n\taddq\t$1, %rax\n\tmovq\t%rax, 0x600000\n\tretq\n")
    result = run_trial(code)
    assert result.outcome == "clean_exit"
    assert result.aex_before_crash == 0
    assert result.exit_value == 42
    assert result.retired == 4


def test_budget_exhaustion_is_distinct():
    code, _ = _compiled("f:\n.L0:\n\tjmp\t.L0\n")
    with pytest.raises(TrialBudgetExceeded):
        run_trial(code, budget=1000)


def test_fall_off_function_end_is_an_error():
    code, _ = _compiled("f:\n\tmovq\t$1, %rax\n")
    with pytest.raises(SimulationError, match="fell off"):
        run_trial(code)


def test_ret_to_clobbered_slot_crashes():
    src = (
        "f:\n\tpushq\t%rbp\n\tmovq\t$12345, %rbp\n"
        "\tmovq\t%rbp, (%rsp)\n\tretq\n"
    )
    code, _ = _compiled(src)
    result = run_trial(code)
    assert result.outcome == "crash"
    assert result.crash_reason == "unmapped_access"


def test_depth_overflow_on_reserved_register_escape():
    src = (
        "main:\n"
        "\tpushq\t%rbp\n\tmovq\t%rsp, %rbp\n"
        "\tmovq\t$0, -8(%rbp)\n"
        ".Lc:\n\tcall\thelper\n"
        ".Lk:\n\tpopq\t%rbp\n\tretq\n"
        "helper:\n"
        "\tpushq\t%rbp\n\tmovq\t%rsp, %rbp\n"
        "\tmovq\t$0, -8(%rbp)\n"
        "\tpopq\t%rbp\n\tretq\n"
    )
    import dataclasses

    program = parse_program(src, entry="main")
    layout = default_ssa_layout()
    plan = plan_second_stack(layout, FeatureSet(frozenset(), ()))
    # one 8-byte frame of budget: the helper's frame add escapes the window
    plan = with_frames(
        dataclasses.replace(plan, n_bytes=16),
        {"main": 8, "helper": 8},
        {"main": 0, "helper": 0},
    )
    cfg = InstrumentationConfig(mode=MODE_QS_BLOCK, p_depth=1)
    out, _ = instrument(program, plan, cfg)
    result = run_trial(out, plan, cfg)
    assert result.outcome == "crash"
    assert result.crash_reason == "depth_overflow"


def test_varys_abort_within_check_window():
    entry = load_corpus(["state_machine"])[0]
    program = entry.load()
    out, _ = instrument_varys(program, interval=4)
    cfg = InstrumentationConfig(mode="varys", varys_interval=4)
    code = compile_program(out, None, cfg)
    for start in (10, 57, 130):
        result = run_trial(code, sched=AttackSchedule(first_aex_at=start, interval=1))
        assert result.outcome == "crash"
        assert result.crash_reason == "varys_abort"


def test_qs_block_random_attacks_crash_without_block_escape():
    entry = load_corpus(["list_walk"])[0]
    program = entry.load()
    cfg = InstrumentationConfig(mode=MODE_QS_BLOCK)
    plan = prepare_plan(program, cfg)
    out, _ = instrument(program, plan, cfg)
    code = compile_program(out, plan, cfg)
    for t in range(25):
        result = run_trial(code, sched=AttackSchedule("random", 1, 10000), seed=900 + t)
        assert result.outcome == "crash"
        assert not result.entered_block_after_attacked
        assert result.crash_reason in ("non_canonical_access", "unmapped_access")
        assert result.instructions_after_first_aex >= 1


def test_qs_intra_can_run_past_successor_blocks():
    # without block guards the walk continues until a relocated slot is used
    entry = load_corpus(["sort_loop"])[0]
    program = entry.load()
    cfg = InstrumentationConfig(mode=MODE_QS_INTRA)
    plan = prepare_plan(program, cfg)
    out, _ = instrument(program, plan, cfg)
    code = compile_program(out, plan, cfg)
    escaped = 0
    for t in range(20):
        result = run_trial(code, sched=AttackSchedule("random", 1, 10000), seed=40 + t)
        assert result.outcome == "crash"
        escaped += result.entered_block_after_attacked
    assert escaped > 0


def test_determinism_identical_inputs_identical_results():
    entry = load_corpus(["classifier"])[0]
    program = entry.load()
    cfg = InstrumentationConfig(mode=MODE_QS_BLOCK)
    plan = prepare_plan(program, cfg)
    out, _ = instrument(program, plan, cfg)
    code = compile_program(out, plan, cfg)
    sched = AttackSchedule(first_aex_at="random", interval=1, max_aex=500)
    r1 = run_trial(code, sched=sched, seed=123)
    r2 = run_trial(code, sched=sched, seed=123)
    assert r1 == r2


def test_trace_output_is_stable():
    code, _ = _compiled(
        "f:\n\tmovq\t$1, %rax\n\tjmp\t.L1\n.L1:\n\tmovq\t%rax, 0x600000\n\tretq\n"
    )
    lines = []
    run_trial(code, trace=lambda r, s, e: lines.append(f"{r}\t{s}\t{e}"))
    assert lines == [
        "0\tf:b0:0\texec",
        "1\tf:b0:1\texec",
        "2\tf:.L1:0\texec",
        "3\tf:.L1:1\texec",
        "4\tf:.L1:1\texit",
    ]


# -- subset semantics spot checks ---------------------------------------------------

def _run_regs(body: str, **init):
    src = "f:\n" + body + "\tretq\n"
    code, _ = _compiled(src)
    m = load(code)
    from sastack.isa import REGISTERS

    for name, value in init.items():
        m.gpr[REGISTERS[name].index] = value
    while step(m) == "running":
        pass
    assert m.outcome == "clean_exit"
    return m


def test_movslq_sign_extends():
    m = _run_regs("\tmovq\t$-5, %rcx\n\tmovslq\t%ecx?, %rax\n".replace("%ecx?", "%ecx"))
    assert m.gpr[0] == (-5) & ((1 << 64) - 1)


def test_movl_zero_extends():
    m = _run_regs("\tmovl\t$-1, %eax\n")
    assert m.gpr[0] == 0xFFFFFFFF


def test_signed_and_unsigned_branches():
    body = (
        "\tmovq\t$-3, %rax\n"
        "\tcmpq\t$2, %rax\n"
        "\tjl\t.Lsigned\n"
        "\tmovq\t$0, %rbx\n\tjmp\t.Lu\n"
        ".Lsigned:\n\tmovq\t$1, %rbx\n"
        ".Lu:\n"
        "\tcmpq\t$2, %rax\n"
        "\tja\t.Labove\n"
        "\tmovq\t$0, %rcx\n\tjmp\t.Ld\n"
        ".Labove:\n\tmovq\t$1, %rcx\n"
        ".Ld:\n"
    )
    m = _run_regs(body)
    assert m.gpr[3] == 1  # rbx: -3 < 2 signed
    assert m.gpr[1] == 1  # rcx: 0xFFFF..FD > 2 unsigned


def test_shift_by_cl_and_imul():
    body = (
        "\tmovq\t$3, %rcx\n"
        "\tmovq\t$7, %rax\n"
        "\tshlq\t%cl, %rax\n"
        "\tmovq\t$-4, %rdx\n"
        "\timulq\t%rdx, %rax\n"
    )
    m = _run_regs(body)
    assert m.gpr[0] == (-224) & ((1 << 64) - 1)


def test_push_pop_through_stack_memory():
    body = "\tmovq\t$99, %rax\n\tpushq\t%rax\n\tmovq\t$0, %rax\n\tpopq\t%rdx\n"
    m = _run_regs(body)
    assert m.gpr[2] == 99


def test_flags_word_round_trip():
    code, _ = _compiled("f:\n\tretq\n")
    m = load(code)
    for bits in range(16):
        m.zf, m.sf, m.cf, m.of = (bool(bits & (1 << k)) for k in range(4))
        word = m.flags_word()
        m.zf = m.sf = m.cf = m.of = False
        m.set_flags_word(word)
        assert (m.zf, m.sf, m.cf, m.of) == tuple(bool(bits & (1 << k)) for k in range(4))


# -- overwrite probability -----------------------------------------------------------

def test_overwrite_oracle_exact_values():
    assert overwrite_survival_oracle(LA48) == 2 / (1 << 16)
    assert overwrite_probability_oracle(LA48) == 1 - 2 / (1 << 16)
    assert overwrite_survival_oracle(LA57) == 2 / (1 << 7)
    assert overwrite_probability_oracle(LA57) == pytest.approx(0.984375)


def test_mc_uniform_matches_oracle_within_3_sigma():
    for mode in (LA48, LA57):
        oracle = overwrite_probability_oracle(mode)
        samples = 200_000
        est = mc_overwrite_probability(mode, samples=samples, seed=3)
        sigma = (oracle * (1 - oracle) / samples) ** 0.5
        assert abs(est - oracle) <= 3 * sigma


def test_mc_address_like_aligned_is_benign():
    # fully covering aligned overwrite by an address-like register keeps the
    # stored address canonical
    rate = mc_overwrite_probability(LA48, o_bits=0, reg_model="address_like",
                                    samples=20_000, seed=1)
    assert rate == 0.0


def test_mc_address_like_with_offset_corrupts():
    rate = mc_overwrite_probability(LA48, o_bits=16, reg_model="address_like",
                                    samples=50_000, seed=1)
    assert rate > 0.99


def test_mc_mixture_between_models():
    uni = mc_overwrite_probability(LA48, o_bits=0, reg_model="uniform64",
                                   samples=50_000, seed=2)
    mix = mc_overwrite_probability(LA48, o_bits=0, reg_model="mixture",
                                   samples=50_000, seed=2, mixture_p=0.5)
    assert 0.4 * uni < mix < uni


def test_mc_validation_errors():
    with pytest.raises(ValueError):
        mc_overwrite_probability(LA48, samples=0)
    with pytest.raises(ValueError):
        mc_overwrite_probability(LA48, o_bits=8, samples=10)
    with pytest.raises(ValueError):
        mc_overwrite_probability(LA48, reg_model="bogus", samples=10)


# -- hand-traced guard sequence over the golden function ---------------------------

FIG_RUNNABLE = """\
main:
# %bb.0:
\tpushq\t%rbp
\tmovq\t%rsp, %rbp
\tsubq\t$32, %rsp
\tmovq\t$0x600100, %rdx
\tmovq\t%rdi, -16(%rbp)
\tmovq\t%rdx, -24(%rbp)
\tmovl\t$0, -4(%rbp)
# %bb.1:
\tmovq\t-8(%rbp), %rax
\tmovq\t-16(%rbp), %rcx
\tmovq\t-24(%rbp), %rax
\tmovslq\t-32(%rbp), %rcx
\tcmpq\t$1, (%rax)
\tjne\t.LBB2_4
.LBB2_6:
\taddq\t%rcx, %rax
\tmovq\t%rax, 0x600000
\taddq\t$32, %rsp
\tpopq\t%rbp
\tretq
.LBB2_4:
\tmovl\t$1, -4(%rbp)
\tjmp\t.LBB2_6
"""


def test_guard_sequence_attack_sweep():
    """Exhaustive hand-traced sweep: every attack start before the final
    frame-base reload crashes, either at the first frame access after a
    reload or at the dereference of a relocated generic reference, and
    never beyond the attacked block's successor."""
    from sastack.harness import _attack_start_bound

    program = parse_program(FIG_RUNNABLE, entry="main")
    cfg = InstrumentationConfig(mode=MODE_QS_BLOCK)
    plan = prepare_plan(program, cfg)
    out, _ = instrument(program, plan, cfg)
    code = compile_program(out, plan, cfg)
    benign = run_trial(code)
    assert benign.outcome == "clean_exit"
    # crash sites: the frame access right after each reload, or the
    # dereference (idx 5 of the body block) fed by the relocated slot
    allowed = {
        "%bb.1": {1, 5},
        ".LBB2_6": {1},
        ".LBB2_4": {1},
    }
    bound = _attack_start_bound(code, benign.retired, 10**6)
    for start in range(0, bound):
        r = run_trial(code, sched=AttackSchedule(start, 1, 10**6))
        assert r.outcome == "crash", start
        assert not r.entered_block_after_attacked, start
        _, block, idx = r.crash_site.split(":")
        assert int(idx) in allowed[block], (start, r.crash_site)


def test_varys_abort_delay_bounded_by_interval_plus_checks():
    entry = load_corpus(["state_machine"])[0]
    out, _ = instrument_varys(entry.load(), interval=4)
    cfg = InstrumentationConfig(mode="varys", varys_interval=4)
    code = compile_program(out, None, cfg)
    benign = run_trial(code)
    for start in range(0, benign.retired - 12, 7):
        r = run_trial(code, sched=AttackSchedule(start, 1, 10**6))
        assert r.outcome == "crash" and r.crash_reason == "varys_abort"
        # at most I originals plus two full checks plus the abort itself
        assert r.aex_before_crash <= 4 + 3 + 3 + 1, (start, r.aex_before_crash)
