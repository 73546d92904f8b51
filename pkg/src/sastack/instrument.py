"""Machine passes that store memory references in the save area.

Two passes are provided: the save-area second-stack pass (block-granularity
or intra-block variants) and a periodic sentinel-check baseline ("varys"
mode).  Both operate on parsed Programs and return a rewritten Program plus
overhead statistics.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from .asm_ir import BasicBlock, Function, Program, build_cfg
from .isa import (
    GPR_CLASSES,
    Immediate,
    Instruction,
    LabelRef,
    MemOperand,
    PROVENANCE_INJECTED,
    PROVENANCE_MODIFIED,
    R10,
    R14,
    RBP,
    RSP,
    Register,
    mnemonic_kind,
)
from .ssa_layout import (
    LA48,
    AddressingMode,
    FrameSizeInputs,
    SecondStackPlan,
    SsaLayout,
    default_ssa_layout,
    frame_size,
    plan_second_stack,
    scan_used_features,
    with_frames,
)

MODE_QS_BLOCK = "qs-block"
MODE_QS_INTRA = "qs-intra"
MODE_VARYS = "varys"
MODE_NONE = "none"
MODES = (MODE_QS_BLOCK, MODE_QS_INTRA, MODE_VARYS, MODE_NONE)

VARYS_SENTINEL = 0x5AFE5AFE5AFE5AFE
VARYS_ABORT_FUNCTION = "__varys_abort"
SCRATCH = R10

ROLE_FRAME_ADD = "frame_add"
ROLE_RBP_STORE = "rbp_store"
ROLE_RELOAD = "reload"
ROLE_DUMMY = "dummy"
ROLE_FRAME_SUB = "frame_sub"
ROLE_SLOT_REWRITE = "slot_rewrite"
ROLE_VARYS_CHECK = "varys_check"
ROLE_VARYS_ABORT = "varys_abort"

GUARD_ROLES = frozenset({ROLE_RELOAD, ROLE_DUMMY})


class InstrumentError(ValueError):
    pass


@dataclass(frozen=True)
class InstrumentationConfig:
    mode: str = MODE_QS_BLOCK
    varys_interval: int = 8
    addressing: AddressingMode = LA48
    p_depth: int = 64
    reserved_register: Register = R14
    dummy_displacement: int = -8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise InstrumentError(f"unknown mode {self.mode!r}")
        if self.mode == MODE_VARYS and self.varys_interval < 1:
            raise InstrumentError("varys interval must be >= 1")
        if self.reserved_register.cls not in GPR_CLASSES:
            raise InstrumentError("reserved register must be a GPR")

    @property
    def label(self) -> str:
        if self.mode == MODE_VARYS:
            return f"varys-{self.varys_interval}"
        return self.mode


@dataclass(frozen=True)
class MemRefAnalysis:
    """(register, stack slot displacement) pairs, in first-use order."""

    pairs: tuple[tuple[Register, int], ...]

    @property
    def m_refs(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class FunctionOverhead:
    injected: int
    modified: int
    original: int
    instrumented: int
    unprotected_leaf: bool = False


@dataclass(frozen=True)
class OverheadStats:
    mode: str
    per_function: dict[str, FunctionOverhead] = field(default_factory=dict)
    check_sites: int = 0

    @property
    def injected(self) -> int:
        return sum(f.injected for f in self.per_function.values())

    @property
    def modified(self) -> int:
        return sum(f.modified for f in self.per_function.values())

    @property
    def original_instructions(self) -> int:
        return sum(f.original for f in self.per_function.values())

    @property
    def instrumented_instructions(self) -> int:
        return sum(f.instrumented for f in self.per_function.values())

    @property
    def static_size_ratio(self) -> float:
        orig = self.original_instructions
        return self.instrumented_instructions / orig if orig else 1.0

    @property
    def unprotected_leaves(self) -> tuple[str, ...]:
        return tuple(n for n, f in self.per_function.items() if f.unprotected_leaf)


def _gpr_writes(instr: Instruction) -> tuple[int, ...]:
    """Indices of GPRs the instruction writes (subregister writes included)."""
    kind = mnemonic_kind(instr.mnemonic)
    out: list[int] = []
    if kind in ("mov", "movsx", "movabs", "lea", "imul") or kind.startswith(("alu.", "shift.")):
        dst = instr.operands[-1]
        if isinstance(dst, Register) and dst.cls in GPR_CLASSES:
            out.append(dst.index)
    elif kind == "pop":
        dst = instr.operands[0]
        if isinstance(dst, Register) and dst.cls in GPR_CLASSES:
            out.append(dst.index)
    return tuple(out)


def _is_slot_load(instr: Instruction) -> tuple[Register, int] | None:
    """movq -K(%rbp), %reg with a plain displacement-only operand."""
    if instr.mnemonic != "movq" or len(instr.operands) != 2:
        return None
    src, dst = instr.operands
    if (
        isinstance(src, MemOperand)
        and src.base is not None
        and src.base.index == RBP.index
        and src.base.cls in GPR_CLASSES
        and src.index is None
        and isinstance(dst, Register)
        and dst.cls in GPR_CLASSES
    ):
        return dst, src.disp
    return None


def identify_memory_refs(fn: Function, reserved: Register = R14) -> MemRefAnalysis:
    """Registers used as memory-operand bases whose most recent prior write
    is a load from a frame slot.  The slot is what gets relocated later, so
    slots whose address escapes (lea) or that live in functions using
    indexed frame accesses are excluded."""
    flat = [i for b in fn.blocks for i in b.instructions]

    tainted_slots: set[int] = set()
    has_indexed_rbp = False
    for instr in flat:
        kind = mnemonic_kind(instr.mnemonic)
        for op in instr.memory_operands():
            if op.base is not None and op.base.index == RBP.index and op.base.cls in GPR_CLASSES:
                if op.index is not None:
                    has_indexed_rbp = True
                elif kind == "lea":
                    tainted_slots.add(op.disp)

    pairs: list[tuple[Register, int]] = []
    seen_slots: set[int] = set()
    for pos, instr in enumerate(flat):
        if mnemonic_kind(instr.mnemonic) == "lea":
            continue
        for op in instr.memory_operands():
            base = op.base
            if base is None or base.cls not in GPR_CLASSES:
                continue
            if base.index in (RBP.index, RSP.index, reserved.index):
                continue
            # Walk backwards for the nearest write to this base register.
            for prior in range(pos - 1, -1, -1):
                p = flat[prior]
                if mnemonic_kind(p.mnemonic) == "call":
                    break  # value may be clobbered across the call
                if base.index in _gpr_writes(p):
                    load = _is_slot_load(p)
                    if load is not None and load[0].index == base.index:
                        slot = load[1]
                        if (
                            slot not in seen_slots
                            and slot not in tainted_slots
                            and not has_indexed_rbp
                        ):
                            seen_slots.add(slot)
                            pairs.append((load[0], slot))
                    break
    return MemRefAnalysis(pairs=tuple(pairs))


def _is_rsp_to_rbp_copy(instr: Instruction) -> bool:
    if instr.mnemonic != "movq" or len(instr.operands) != 2:
        return False
    src, dst = instr.operands
    return (
        isinstance(src, Register)
        and isinstance(dst, Register)
        and src.index == RSP.index
        and dst.index == RBP.index
        and src.cls in GPR_CLASSES
    )


def _is_leaf(fn: Function) -> bool:
    return not any(_is_rsp_to_rbp_copy(i) for i in fn.instructions())


def _frame_allocation(fn: Function) -> int:
    """Bytes the function subtracts from rsp in its prologue, 0 if none."""
    for instr in fn.entry.instructions:
        if instr.mnemonic == "subq" and len(instr.operands) == 2:
            src, dst = instr.operands
            if isinstance(src, Immediate) and isinstance(dst, Register) and dst.index == RSP.index:
                return src.value
    return 0


def _uses_register(program: Program, reg: Register, original_only: bool = True) -> bool:
    for fn in program.functions.values():
        for instr in fn.instructions():
            if original_only and instr.provenance != "original":
                continue
            if any(r.index == reg.index and r.cls in GPR_CLASSES for r in instr.registers()):
                return True
    return False


def _check_call_targets(program: Program) -> None:
    for fn in program.functions.values():
        for instr in fn.instructions():
            if mnemonic_kind(instr.mnemonic) == "call":
                target = instr.operands[0]
                assert isinstance(target, LabelRef)
                if target.name not in program.functions:
                    raise InstrumentError(
                        f"call to unresolved or non-function target {target.name!r} in {fn.name}"
                    )


def plan_frames(
    program: Program, plan: SecondStackPlan, cfg: InstrumentationConfig
) -> SecondStackPlan:
    """Fill in per-function frame sizes from the memory-reference analysis."""
    frames: dict[str, int] = {}
    stored: dict[str, int] = {}
    for name, fn in program.functions.items():
        m = 0 if _is_leaf(fn) else identify_memory_refs(fn, plan.reserved_register).m_refs
        spec = frame_size(FrameSizeInputs(m, plan.n_bytes, cfg.p_depth))
        frames[name] = spec.size_bytes
        stored[name] = spec.stored_generic_count
    return with_frames(plan, frames, stored)


def prepare_plan(
    program: Program,
    cfg: InstrumentationConfig,
    layout: SsaLayout | None = None,
    o_req: int | None = None,
) -> SecondStackPlan:
    """Scan features, place the second stack, and size every frame."""
    layout = layout or default_ssa_layout()
    feats = scan_used_features(program, layout)
    plan = plan_second_stack(
        layout, feats, cfg.addressing, o_req, reserved_register=cfg.reserved_register
    )
    return plan_frames(program, plan, cfg)


def _rewrite_slots(
    blocks: list[list[Instruction]], slot_map: dict[int, int], reserved: Register
) -> int:
    modified = 0
    for instrs in blocks:
        for i, instr in enumerate(instrs):
            new_ops: list = []
            changed = False
            for op in instr.operands:
                if (
                    isinstance(op, MemOperand)
                    and op.base is not None
                    and op.base.index == RBP.index
                    and op.index is None
                    and op.disp in slot_map
                ):
                    new_ops.append(MemOperand(base=reserved, disp=slot_map[op.disp]))
                    changed = True
                else:
                    new_ops.append(op)
            if changed:
                instrs[i] = replace(
                    instr,
                    operands=tuple(new_ops),
                    provenance=PROVENANCE_MODIFIED,
                    role=ROLE_SLOT_REWRITE,
                )
                modified += 1
    return modified


def _has_frame_memop(instr: Instruction) -> bool:
    for op in instr.memory_operands():
        for reg in (op.base, op.index):
            if reg is not None and reg.index in (RBP.index, RSP.index) and reg.cls in GPR_CLASSES:
                return True
    return False


def _instrument_function_qs(
    fn: Function, plan: SecondStackPlan, cfg: InstrumentationConfig, rng: random.Random
) -> tuple[Function, FunctionOverhead]:
    reserved = plan.reserved_register
    frame = plan.frame_bytes.get(fn.name)
    if frame is None:
        raise InstrumentError(f"plan has no frame size for function {fn.name!r}")
    original = sum(b.original_count() for b in fn.blocks)
    leaf = _is_leaf(fn)
    instrs_by_block: list[list[Instruction]] = [list(b.instructions) for b in fn.blocks]
    injected = 0
    modified = 0

    def inj(mnemonic: str, operands: tuple, role: str) -> Instruction:
        return Instruction(
            mnemonic=mnemonic, operands=operands, provenance=PROVENANCE_INJECTED, role=role
        )

    if not leaf:
        analysis = identify_memory_refs(fn, reserved)
        keep = plan.stored_generic.get(fn.name, 0)
        pairs = list(analysis.pairs)
        if len(pairs) > keep:
            rng.shuffle(pairs)
            pairs = pairs[:keep]
            pairs.sort(key=lambda p: analysis.pairs.index(p))
        slot_map = {slot: -8 * (k + 1) for k, (_, slot) in enumerate(pairs)}
        modified = _rewrite_slots(instrs_by_block, slot_map, reserved)

        dummy_disp = cfg.dummy_displacement if _frame_allocation(fn) >= 8 else 0
        for bi, instrs in enumerate(instrs_by_block):
            if bi == 0:
                continue  # the frame-base store dominates the entry block
            if cfg.mode != MODE_QS_BLOCK:
                continue
            guards = [inj("movq", (MemOperand(base=reserved), RBP), ROLE_RELOAD)]
            if not instrs or not _has_frame_memop(instrs[0]):
                guards.append(
                    inj("movq", (MemOperand(base=RBP, disp=dummy_disp), SCRATCH), ROLE_DUMMY)
                )
            # Keep any leading directives attached to the block's first line.
            if instrs and instrs[0].leading_raw:
                guards[0] = replace(guards[0], leading_raw=instrs[0].leading_raw)
                instrs[0] = replace(instrs[0], leading_raw=())
            instrs[0:0] = guards
            injected += len(guards)

        store = inj("movq", (RBP, MemOperand(base=reserved)), ROLE_RBP_STORE)
        placed = False
        for instrs in instrs_by_block:
            for i, instr in enumerate(instrs):
                if instr.provenance == "original" and _is_rsp_to_rbp_copy(instr):
                    instrs.insert(i + 1, store)
                    placed = True
                    break
            if placed:
                break
        assert placed
        injected += 1

    instrs_by_block[0].insert(
        0, inj("addq", (Immediate(frame), reserved), ROLE_FRAME_ADD)
    )
    injected += 1
    for instrs in instrs_by_block:
        for i in range(len(instrs) - 1, -1, -1):
            if mnemonic_kind(instrs[i].mnemonic) == "ret":
                instrs.insert(i, inj("subq", (Immediate(frame), reserved), ROLE_FRAME_SUB))
                injected += 1

    blocks = tuple(
        replace(b, instructions=tuple(instrs))
        for b, instrs in zip(fn.blocks, instrs_by_block)
    )
    new_fn = replace(fn, blocks=blocks, is_instrumented=True)
    overhead = FunctionOverhead(
        injected=injected,
        modified=modified,
        original=original,
        instrumented=sum(len(b.instructions) for b in blocks),
        unprotected_leaf=leaf,
    )
    return new_fn, overhead


def instrument_quanshield(
    program: Program, plan: SecondStackPlan, cfg: InstrumentationConfig
) -> tuple[Program, OverheadStats]:
    """Second-stack pass: frame setup, per-block frame-base reloads (block
    mode), and relocation of generic memory-reference slots into the save
    area.  Generic-reference selection beyond capacity uses a seeded shuffle
    so builds are reproducible."""
    if cfg.mode not in (MODE_QS_BLOCK, MODE_QS_INTRA):
        raise InstrumentError(f"instrument_quanshield cannot apply mode {cfg.mode!r}")
    if _uses_register(program, plan.reserved_register):
        raise InstrumentError(
            f"reserved register %{plan.reserved_register.name} is used by the input program"
        )
    if cfg.mode == MODE_QS_BLOCK and _uses_register(program, SCRATCH):
        raise InstrumentError(
            f"scratch register %{SCRATCH.name} is used by the input program"
        )
    _check_call_targets(program)

    rng = random.Random(cfg.seed)
    functions: dict[str, Function] = {}
    per_function: dict[str, FunctionOverhead] = {}
    for name, fn in program.functions.items():
        new_fn, overhead = _instrument_function_qs(fn, plan, cfg, rng)
        functions[name] = new_fn
        per_function[name] = overhead

    meta = dict(program.meta)
    meta.update({"mode": cfg.mode, "seed": str(cfg.seed), "plan": plan.digest()})
    out = replace(program, functions=functions, meta=meta)
    return out, OverheadStats(mode=cfg.mode, per_function=per_function)


def _varys_check(reserved: Register) -> list[Instruction]:
    return [
        Instruction(
            "movabsq",
            (Immediate(VARYS_SENTINEL), SCRATCH),
            provenance=PROVENANCE_INJECTED,
            role=ROLE_VARYS_CHECK,
        ),
        Instruction(
            "cmpq",
            (MemOperand(base=reserved), SCRATCH),
            provenance=PROVENANCE_INJECTED,
            role=ROLE_VARYS_CHECK,
        ),
        Instruction(
            "jne",
            (LabelRef(VARYS_ABORT_FUNCTION),),
            provenance=PROVENANCE_INJECTED,
            role=ROLE_VARYS_CHECK,
        ),
    ]


_FLAG_SETTING_KINDS = ("alu.", "shift.")


def _sets_flags(instr: Instruction) -> bool:
    kind = mnemonic_kind(instr.mnemonic)
    return kind in ("cmp", "test", "imul") or kind.startswith(_FLAG_SETTING_KINDS)


def _check_sites(block: BasicBlock, interval: int) -> list[int]:
    """Indices before which a sentinel check is inserted: block entry plus
    after every interval-th instruction.  The check's compare clobbers
    flags, so when the block ends in a conditional branch, sites past the
    last flag-setting instruction are pulled back to it."""
    n = len(block.instructions)
    sites = [0]
    for i in range(interval, n, interval):
        if i != n - 1 or block.terminator_kind == "fallthrough":
            sites.append(i)
    if block.terminator_kind == "jcc":
        last_setter = None
        for i, instr in enumerate(block.instructions[:-1]):
            if _sets_flags(instr):
                last_setter = i
        limit = -1 if last_setter is None else last_setter
        sites = [min(s, limit) for s in sites]
        sites = sorted({s for s in sites if s >= 0})
    return sites


def instrument_varys(
    program: Program,
    interval: int,
    reserved: Register = R14,
) -> tuple[Program, OverheadStats]:
    """Periodic sentinel polling: at every block entry and after every
    interval-th original instruction, compare the save-area sentinel with its
    initialization constant and branch to an abort stub on mismatch."""
    if interval < 1:
        raise InstrumentError("varys interval must be >= 1")
    if _uses_register(program, reserved) or _uses_register(program, SCRATCH):
        raise InstrumentError("varys check registers are used by the input program")
    _check_call_targets(program)

    functions: dict[str, Function] = {}
    per_function: dict[str, FunctionOverhead] = {}
    sites_total = 0
    for name, fn in program.functions.items():
        original = sum(b.original_count() for b in fn.blocks)
        new_blocks: list[BasicBlock] = []
        injected = 0
        for block in fn.blocks:
            out: list[Instruction] = []
            sites = _check_sites(block, interval)
            for i, instr in enumerate(block.instructions):
                if i in sites:
                    out.extend(_varys_check(reserved))
                out.append(instr)
            if not block.instructions:
                out.extend(_varys_check(reserved))
            injected += 3 * len(sites)
            sites_total += len(sites)
            new_blocks.append(replace(block, instructions=tuple(out)))
        new_fn = build_cfg(replace(fn, blocks=tuple(new_blocks), is_instrumented=True))
        functions[name] = new_fn
        per_function[name] = FunctionOverhead(
            injected=injected,
            modified=0,
            original=original,
            instrumented=sum(len(b.instructions) for b in new_fn.blocks),
        )

    stub = Function(
        name=VARYS_ABORT_FUNCTION,
        blocks=(
            BasicBlock(
                instructions=(
                    Instruction(
                        "ud2", provenance=PROVENANCE_INJECTED, role=ROLE_VARYS_ABORT
                    ),
                )
            ),
        ),
        is_instrumented=True,
    )
    functions[stub.name] = stub
    per_function[stub.name] = FunctionOverhead(
        injected=1, modified=0, original=0, instrumented=1
    )

    meta = dict(program.meta)
    meta.update({"mode": MODE_VARYS, "I": str(interval)})
    out_prog = replace(program, functions=functions, meta=meta)
    return out_prog, OverheadStats(
        mode=MODE_VARYS, per_function=per_function, check_sites=sites_total
    )


def instrument(
    program: Program, plan: SecondStackPlan, cfg: InstrumentationConfig
) -> tuple[Program, OverheadStats]:
    """Apply the pass selected by cfg.mode; mode 'none' returns the input."""
    if cfg.mode == MODE_NONE:
        zero = {
            name: FunctionOverhead(
                injected=0,
                modified=0,
                original=sum(b.original_count() for b in fn.blocks),
                instrumented=sum(len(b.instructions) for b in fn.blocks),
            )
            for name, fn in program.functions.items()
        }
        return program, OverheadStats(mode=MODE_NONE, per_function=zero)
    if cfg.mode == MODE_VARYS:
        return instrument_varys(program, cfg.varys_interval, cfg.reserved_register)
    return instrument_quanshield(program, plan, cfg)
