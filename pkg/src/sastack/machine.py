"""Abstract x86-64 machine with a modeled save area and interrupt delivery.

Programs from the supported subset are compiled to per-instruction closures
and executed over a small set of mapped byte regions (stack, data, save
area).  Every memory access is checked first for canonical form, then for a
mapped range.  Interrupt delivery dumps register state into the save area
and restores it, so registers are preserved bit-for-bit while save-area
bytes are clobbered.

Program I/O convention: programs publish their result by storing to the
designated data word at RESULT_ADDR and exit by returning from the entry
function; there are no syscalls.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass

from .asm_ir import Function, Program, successor_labels
from .instrument import (
    SCRATCH,
    InstrumentationConfig,
    MODE_NONE,
    MODE_VARYS,
    VARYS_SENTINEL,
)
from .isa import (
    GPR_CLASSES,
    Immediate,
    Instruction,
    MemOperand,
    RegClass,
    Register,
    mnemonic_kind,
    mnemonic_width,
)
from .ssa_layout import (
    LA48,
    AddressingMode,
    SecondStackPlan,
    SsaLayout,
    default_ssa_layout,
    CLASS_FP_MMX,
    CLASS_OPMASK,
    CLASS_XMM,
    CLASS_YMM_HI,
    CLASS_ZMM_HI,
)

MASK64 = (1 << 64) - 1

SSA_BASE = 0x300000
DATA_BASE = 0x600000
DATA_BYTES = 0x10000
RESULT_ADDR = DATA_BASE
STACK_TOP = 0x7FFE0000
RET_TOKEN_BASE = 0x0000400000000000
HALT_TOKEN = 0x0000410000000000
PRIME_QWORD = 0xAAAAAAAAAAAAAAAA
RIP_TAG = 0x0000300000000000

CRASH_NON_CANONICAL = "non_canonical_access"
CRASH_UNMAPPED = "unmapped_access"
CRASH_VARYS = "varys_abort"
CRASH_DEPTH = "depth_overflow"


class LoadError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


class TrialBudgetExceeded(SimulationError):
    def __init__(self, budget: int):
        super().__init__(f"instruction budget of {budget} exhausted before exit or crash")
        self.budget = budget


class _Crash(Exception):
    def __init__(self, reason: str, addr: int | None = None):
        self.reason = reason
        self.addr = addr


class _CleanExit(Exception):
    pass


@dataclass(frozen=True)
class AttackSchedule:
    """Interrupt delivery plan in retired-instruction indices."""

    first_aex_at: int | str = 0  # boundary index, or "random"
    interval: int = 1            # retired instructions between deliveries
    max_aex: int = 100000

    def __post_init__(self) -> None:
        if self.interval < 1:
            raise ValueError("interval must be >= 1 (zero-stepping excluded)")


@dataclass(frozen=True)
class TrialResult:
    outcome: str  # "clean_exit" | "crash"
    crash_reason: str | None = None
    crash_site: str | None = None
    crash_addr: int | None = None
    aex_before_crash: int = 0
    instructions_after_first_aex: int = 0
    entered_block_after_attacked: bool = False
    retired: int = 0
    first_aex_at: int | None = None
    exit_value: int | None = None


_PACK_Q = struct.Struct("<Q")
_PACK_GPRS = struct.Struct("<16Q")
_PACK_TAIL = struct.Struct("<4Q")  # rflags, rip, ursp, urbp


class _BlockCode:
    __slots__ = ("ops", "name", "began_idx", "successors", "instructions", "term_kind")

    def __init__(self, ops, name, began_idx, successors, instructions, term_kind):
        self.ops = ops
        self.name = name
        self.began_idx = began_idx
        self.successors = successors
        self.instructions = instructions
        self.term_kind = term_kind


class _FunctionCode:
    __slots__ = ("name", "blocks")

    def __init__(self, name, blocks):
        self.name = name
        self.blocks = blocks


class CompiledProgram:
    def __init__(self, program: Program, plan: SecondStackPlan | None, cfg: InstrumentationConfig):
        self.program = program
        self.plan = plan
        self.cfg = cfg
        self.layout: SsaLayout = plan.layout if plan is not None else default_ssa_layout()
        self.addressing: AddressingMode = plan.addressing if plan is not None else cfg.addressing
        self.fn_index: dict[str, int] = {n: i for i, n in enumerate(program.functions)}
        self.functions: list[_FunctionCode] = []
        self.entry_fi = self.fn_index[program.entry] if program.entry else 0
        compiler = _Compiler(self)
        for fn in program.functions.values():
            self.functions.append(compiler.compile_function(fn))


def _to_signed(v: int, bits: int) -> int:
    return v - (1 << bits) if v >> (bits - 1) else v


class _Compiler:
    def __init__(self, code: CompiledProgram):
        self.code = code
        mode = code.addressing
        self._vshift = mode.v - 1
        self._topmask = (1 << (mode.u + 1)) - 1
        cfg = code.cfg
        self._reserved_idx = cfg.reserved_register.index if cfg.mode.startswith("qs-") else None

    # -- operand helpers ---------------------------------------------------

    def _ea_fn(self, op: MemOperand):
        disp = op.disp & MASK64
        if op.base is None and op.index is None:
            return lambda m: disp
        b = op.base.index if op.base is not None else None
        x = op.index.index if op.index is not None else None
        scale = op.scale
        if x is None:
            return lambda m: (m.gpr[b] + disp) & MASK64
        if b is None:
            return lambda m: (m.gpr[x] * scale + disp) & MASK64
        return lambda m: (m.gpr[b] + m.gpr[x] * scale + disp) & MASK64

    def _src_fn(self, op, width: int):
        mask = (1 << (8 * width)) - 1
        if isinstance(op, Immediate):
            val = op.value & mask
            return lambda m: val
        if isinstance(op, Register):
            i = op.index
            if width == 8:
                return lambda m: m.gpr[i]
            return lambda m: m.gpr[i] & mask
        ea = self._ea_fn(op)
        return lambda m: m.read(ea(m), width)

    # -- per-instruction compilation ---------------------------------------

    def _is_block_guard(self, instr: Instruction) -> bool:
        """Injected block-entry guards: the frame-base reload and the dummy
        frame access.  Recognized by shape so programs reparsed from emitted
        text keep the same block-entry accounting."""
        if instr.provenance != "injected" or instr.mnemonic != "movq":
            return False
        if len(instr.operands) != 2:
            return False
        src, dst = instr.operands
        reserved = self.code.cfg.reserved_register
        if (
            isinstance(src, MemOperand)
            and src.base is not None
            and src.base.index == reserved.index
            and src.index is None
            and src.disp == 0
            and isinstance(dst, Register)
            and dst.index == 5  # rbp
        ):
            return True
        return (
            isinstance(src, MemOperand)
            and src.base is not None
            and src.base.index == 5
            and isinstance(dst, Register)
            and dst.index == SCRATCH.index
        )

    def compile_function(self, fn: Function) -> _FunctionCode:
        fi = self.code.fn_index[fn.name]
        labels = fn.label_index()
        blocks: list[_BlockCode] = []
        for bi, block in enumerate(fn.blocks):
            ops = [
                self._compile_instruction(instr, fn, labels, fi, bi, ii)
                for ii, instr in enumerate(block.instructions)
            ]
            began = 0
            for instr in block.instructions:
                if self._is_block_guard(instr):
                    began += 1
                else:
                    break
            succs: list[tuple[int, int]] = []
            for target in successor_labels(fn, bi):
                if isinstance(target, int):
                    succs.append((fi, target))
                else:
                    succs.append((self.code.fn_index[target], 0))
            name = block.label or block.marker or f"b{bi}"
            blocks.append(
                _BlockCode(ops, name, began, tuple(succs), block.instructions, block.terminator_kind)
            )
        return _FunctionCode(fn.name, blocks)

    def _resolve(self, name: str, labels: dict[str, int], fi: int) -> tuple[int, int, int]:
        if name in labels:
            return (fi, labels[name], 0)
        return (self.code.fn_index[name], 0, 0)

    def _wrap_reserved_check(self, op, write_idx: int | None):
        """Writes to the reserved register must keep it inside the planned
        second-stack window; leaving it is a frame-budget overflow."""
        if write_idx is None or write_idx != self._reserved_idx:
            return op
        plan = self.code.plan
        lo = SSA_BASE + plan.s
        hi = SSA_BASE + plan.s + plan.n_bytes - 8
        ridx = self._reserved_idx

        def checked(m, _op=op):
            _op(m)
            v = m.gpr[ridx]
            if v < lo or v > hi:
                raise _Crash(CRASH_DEPTH, v)

        return checked

    def _compile_instruction(self, instr: Instruction, fn, labels, fi, bi, ii):
        kind = mnemonic_kind(instr.mnemonic)
        width = mnemonic_width(instr.mnemonic)
        ops = instr.operands

        if kind in ("mov", "movabs"):
            if any(isinstance(o, Register) and o.cls not in GPR_CLASSES for o in ops):
                return self._compile_vector(instr, "mov")
            src, dst = ops
            get = self._src_fn(src, width)
            if isinstance(dst, Register):
                d = dst.index
                return self._wrap_reserved_check(
                    lambda m: m.gpr.__setitem__(d, get(m)), d
                )
            ea = self._ea_fn(dst)
            w = width
            return lambda m: m.write(ea(m), get(m), w)

        if kind == "movsx":
            src, dst = ops
            d = dst.index
            if isinstance(src, Register):
                s = src.index

                def op_movsx_r(m):
                    m.gpr[d] = _to_signed(m.gpr[s] & 0xFFFFFFFF, 32) & MASK64

                return self._wrap_reserved_check(op_movsx_r, d)
            ea = self._ea_fn(src)

            def op_movsx(m):
                m.gpr[d] = _to_signed(m.read(ea(m), 4), 32) & MASK64

            return self._wrap_reserved_check(op_movsx, d)

        if kind == "lea":
            src, dst = ops
            ea = self._ea_fn(src)
            d = dst.index
            return self._wrap_reserved_check(lambda m: m.gpr.__setitem__(d, ea(m)), d)

        if kind.startswith("alu."):
            return self._compile_alu(kind[4:], ops, width)

        if kind == "imul":
            src, dst = ops
            get = self._src_fn(src, width)
            d = dst.index
            bits = width * 8
            mask = (1 << bits) - 1
            sign = 1 << (bits - 1)

            def op_imul(m):
                a = _to_signed(m.gpr[d] & mask, bits)
                b = _to_signed(get(m), bits)
                prod = a * b
                res = prod & mask
                m.gpr[d] = res
                over = prod != _to_signed(res, bits)
                m.cf = m.of = over
                m.zf = res == 0
                m.sf = bool(res & sign)

            return self._wrap_reserved_check(op_imul, d)

        if kind.startswith("shift."):
            return self._compile_shift(kind[6:], ops, width)

        if kind == "cmp":
            src, dst = ops
            get_b = self._src_fn(src, width)
            get_a = self._src_fn(dst, width)
            bits = width * 8
            mask = (1 << bits) - 1
            sign = 1 << (bits - 1)

            def op_cmp(m):
                a = get_a(m)
                b = get_b(m)
                res = (a - b) & mask
                m.zf = res == 0
                m.sf = bool(res & sign)
                m.cf = b > a
                m.of = bool((a ^ b) & (a ^ res) & sign)

            return op_cmp

        if kind == "test":
            src, dst = ops
            get_b = self._src_fn(src, width)
            get_a = self._src_fn(dst, width)
            sign = 1 << (width * 8 - 1)

            def op_test(m):
                res = get_a(m) & get_b(m)
                m.zf = res == 0
                m.sf = bool(res & sign)
                m.cf = m.of = False

            return op_test

        if kind == "push":
            get = self._src_fn(ops[0], 8)

            def op_push(m):
                rsp = (m.gpr[4] - 8) & MASK64
                m.write(rsp, get(m), 8)
                m.gpr[4] = rsp

            return op_push

        if kind == "pop":
            d = ops[0].index

            def op_pop(m):
                rsp = m.gpr[4]
                m.gpr[d] = m.read(rsp, 8)
                m.gpr[4] = (rsp + 8) & MASK64

            return self._wrap_reserved_check(op_pop, d)

        if kind == "call":
            target = self._resolve(ops[0].name, labels, fi)
            cont = (fi, bi + 1, 0)

            def op_call(m):
                token = RET_TOKEN_BASE + m.ret_serial
                m.ret_serial += 1
                m.ret_tokens[token] = cont
                rsp = (m.gpr[4] - 8) & MASK64
                m.write(rsp, token, 8)
                m.gpr[4] = rsp
                m.npos = target

            return op_call

        if kind == "ret":
            def op_ret(m):
                rsp = m.gpr[4]
                token = m.read(rsp, 8)
                m.gpr[4] = (rsp + 8) & MASK64
                if token == HALT_TOKEN:
                    raise _CleanExit()
                pos = m.ret_tokens.get(token)
                if pos is None:
                    # Return target is not a live call site: treat as a fetch
                    # from that address.
                    m.check_canonical(token)
                    raise _Crash(CRASH_UNMAPPED, token)
                m.npos = pos

            return op_ret

        if kind == "jmp":
            target = self._resolve(ops[0].name, labels, fi)
            return lambda m: setattr(m, "npos", target)

        if kind == "jcc":
            target = self._resolve(ops[0].name, labels, fi)
            fall = (fi, bi + 1, 0)
            pred = _JCC_PREDICATES[instr.mnemonic]

            def op_jcc(m):
                m.npos = target if pred(m) else fall

            return op_jcc

        if kind == "ud2":
            def op_ud2(m):
                raise _Crash(CRASH_VARYS)

            return op_ud2

        if kind == "nop":
            return lambda m: None

        if kind == "vmov" or kind.startswith("valu.") or kind == "kmov":
            return self._compile_vector(instr, kind)

        raise LoadError(f"cannot simulate mnemonic {instr.mnemonic!r}")  # pragma: no cover

    def _compile_alu(self, opname: str, ops, width: int):
        src, dst = ops
        get = self._src_fn(src, width)
        bits = width * 8
        mask = (1 << bits) - 1
        sign = 1 << (bits - 1)

        def combine(m, a, b):
            if opname == "add":
                res = (a + b) & mask
                m.cf = res < a
                m.of = bool(~(a ^ b) & (a ^ res) & sign)
            elif opname == "sub":
                res = (a - b) & mask
                m.cf = b > a
                m.of = bool((a ^ b) & (a ^ res) & sign)
            else:
                if opname == "and":
                    res = a & b
                elif opname == "or":
                    res = a | b
                else:
                    res = a ^ b
                m.cf = m.of = False
            m.zf = res == 0
            m.sf = bool(res & sign)
            return res

        if isinstance(dst, Register):
            d = dst.index

            def op_alu_reg(m):
                m.gpr[d] = combine(m, m.gpr[d] & mask, get(m))

            return self._wrap_reserved_check(op_alu_reg, d)

        ea = self._ea_fn(dst)
        w = width

        def op_alu_mem(m):
            addr = ea(m)
            m.write(addr, combine(m, m.read(addr, w), get(m)), w)

        return op_alu_mem

    def _compile_shift(self, opname: str, ops, width: int):
        src, dst = ops
        bits = width * 8
        mask = (1 << bits) - 1
        sign = 1 << (bits - 1)
        cntmask = 63 if width == 8 else 31
        if isinstance(src, Immediate):
            getc = lambda m, _v=src.value & cntmask: _v
        else:
            if src.name not in ("cl", "rcx", "ecx"):
                raise LoadError("shift count must be an immediate or %cl")
            getc = lambda m: m.gpr[1] & cntmask
        if not isinstance(dst, Register):
            raise LoadError("shift destination must be a register")
        d = dst.index

        def op_shift(m):
            cnt = getc(m)
            if cnt == 0:
                return
            a = m.gpr[d] & mask
            if opname == "shl":
                res = (a << cnt) & mask
                m.cf = bool((a >> (bits - cnt)) & 1) if cnt <= bits else False
            elif opname == "shr":
                res = a >> cnt
                m.cf = bool((a >> (cnt - 1)) & 1) if cnt <= bits else False
            else:  # sar
                res = (_to_signed(a, bits) >> cnt) & mask
                m.cf = bool((_to_signed(a, bits) >> (cnt - 1)) & 1)
            m.gpr[d] = res
            m.zf = res == 0
            m.sf = bool(res & sign)
            m.of = False

        return self._wrap_reserved_check(op_shift, d)

    # -- vector lanes -------------------------------------------------------

    def _lane_ref(self, reg: Register) -> list[tuple[str, int, int]]:
        if reg.cls == RegClass.XMM:
            return [(CLASS_XMM, 16 * reg.index, 16)]
        if reg.cls == RegClass.YMM:
            return [(CLASS_XMM, 16 * reg.index, 16), (CLASS_YMM_HI, 16 * reg.index, 16)]
        if reg.cls == RegClass.ZMM:
            if reg.index < 16:
                raise LoadError("zmm0-15 have unmodeled upper state; use zmm16-31")
            return [(CLASS_ZMM_HI, 64 * (reg.index - 16), 64)]
        if reg.cls == RegClass.MMX:
            return [(CLASS_FP_MMX, 16 * reg.index, 8)]
        if reg.cls == RegClass.KMASK:
            return [(CLASS_OPMASK, 8 * reg.index, 8)]
        raise LoadError(f"register {reg.name} is not a vector register")

    def _compile_vector(self, instr: Instruction, kind: str):
        src, dst = instr.operands
        if kind == "kmov" and (src.cls in GPR_CLASSES or dst.cls in GPR_CLASSES):
            width = mnemonic_width(instr.mnemonic)
            if dst.cls in GPR_CLASSES:
                (cls, off, _size), = self._lane_ref(src)
                d = dst.index

                def op_k2g(m):
                    m.gpr[d] = int.from_bytes(m.lanes[cls][off : off + width], "little")

                return self._wrap_reserved_check(op_k2g, d)
            (cls, off, _size), = self._lane_ref(dst)
            s = src.index

            def op_g2k(m):
                m.lanes[cls][off : off + 8] = (m.gpr[s] & ((1 << (8 * width)) - 1)).to_bytes(
                    8, "little"
                )

            return op_g2k

        srefs = self._lane_ref(src)
        drefs = self._lane_ref(dst)
        if [r[2] for r in srefs] != [r[2] for r in drefs]:
            raise LoadError(f"{instr.mnemonic}: operand width mismatch")
        if kind == "mov" or kind == "vmov":
            def op_vmov(m):
                for (scls, soff, size), (dcls, doff, _s) in zip(srefs, drefs):
                    m.lanes[dcls][doff : doff + size] = m.lanes[scls][soff : soff + size]

            return op_vmov
        vop = kind.split(".")[1]

        def op_valu(m):
            for (scls, soff, size), (dcls, doff, _s) in zip(srefs, drefs):
                a = int.from_bytes(m.lanes[dcls][doff : doff + size], "little")
                b = int.from_bytes(m.lanes[scls][soff : soff + size], "little")
                if vop == "xor":
                    r = a ^ b
                else:
                    r = (a + b) & ((1 << (8 * size)) - 1)
                m.lanes[dcls][doff : doff + size] = r.to_bytes(size, "little")

        return op_valu


def _flag(attr):
    return lambda m: getattr(m, attr)


_JCC_PREDICATES = {
    "je": lambda m: m.zf,
    "jne": lambda m: not m.zf,
    "js": lambda m: m.sf,
    "jns": lambda m: not m.sf,
    "jl": lambda m: m.sf != m.of,
    "jge": lambda m: m.sf == m.of,
    "jle": lambda m: m.zf or m.sf != m.of,
    "jg": lambda m: not m.zf and m.sf == m.of,
    "jb": lambda m: m.cf,
    "jae": lambda m: not m.cf,
    "jbe": lambda m: m.cf or m.zf,
    "ja": lambda m: not m.cf and not m.zf,
}


class Machine:
    """One executing program instance: registers, flags, memory map, and the
    attack bookkeeping a trial needs."""

    __slots__ = (
        "code", "gpr", "zf", "sf", "cf", "of", "lanes", "regions",
        "stack_buf", "data_buf", "ssa_buf", "fi", "bi", "ii", "npos",
        "retired", "aex_count", "ret_tokens", "ret_serial", "outcome",
        "crash_reason", "crash_site", "crash_addr",
        "attack_started", "attacked_key", "allowed_blocks", "entered_after",
        "first_aex_retired", "ret_watch", "_vshift", "_topmask",
        "_gpr_dump_off", "_lane_offsets", "_sentinel_off",
    )

    def __init__(self, code: CompiledProgram, stack_bytes: int, seed: int,
                 randomize_registers: bool):
        self.code = code
        layout = code.layout
        rng = random.Random(seed)
        if randomize_registers:
            self.gpr = [rng.getrandbits(64) for _ in range(16)]
            self.zf, self.sf = rng.random() < 0.5, rng.random() < 0.5
            self.cf, self.of = rng.random() < 0.5, rng.random() < 0.5
        else:
            self.gpr = [0] * 16
            self.zf = self.sf = self.cf = self.of = False

        self.stack_buf = bytearray(stack_bytes)
        self.data_buf = bytearray(DATA_BYTES)
        self.ssa_buf = bytearray(layout.total_size)
        self.regions = (
            (STACK_TOP - stack_bytes, STACK_TOP, self.stack_buf),
            (DATA_BASE, DATA_BASE + DATA_BYTES, self.data_buf),
            (SSA_BASE, SSA_BASE + layout.total_size, self.ssa_buf),
        )

        prime = _PACK_Q.pack(PRIME_QWORD)
        self.lanes = {
            cls: bytearray(prime * (size // 8))
            for cls, (_, size) in layout.class_ranges().items()
        }
        self._lane_offsets = {
            cls: off for cls, (off, _) in layout.class_ranges().items()
        }
        self._gpr_dump_off = layout.gprsgx[0]
        self._sentinel_off = layout.gprsgx[0]

        mode = code.addressing
        self._vshift = mode.v - 1
        self._topmask = (1 << (mode.u + 1)) - 1

        self.gpr[4] = STACK_TOP - 8  # rsp
        _PACK_Q.pack_into(self.stack_buf, stack_bytes - 8, HALT_TOKEN)

        cfg = code.cfg
        plan = code.plan
        if cfg.mode.startswith("qs-"):
            assert plan is not None
            self.gpr[cfg.reserved_register.index] = SSA_BASE + plan.base_offset
        elif cfg.mode == MODE_VARYS:
            self.gpr[cfg.reserved_register.index] = SSA_BASE + self._sentinel_off
            _PACK_Q.pack_into(self.ssa_buf, self._sentinel_off, VARYS_SENTINEL)

        self.fi, self.bi, self.ii = code.entry_fi, 0, 0
        self.npos = None
        self.retired = 0
        self.aex_count = 0
        self.ret_tokens: dict[int, tuple[int, int, int]] = {}
        self.ret_serial = 0
        self.outcome = "running"
        self.crash_reason = None
        self.crash_site = None
        self.crash_addr = None
        self.attack_started = False
        self.attacked_key = None
        self.allowed_blocks: set[tuple[int, int]] = set()
        self.entered_after = False
        self.first_aex_retired = 0
        self.ret_watch = False

    # -- memory -------------------------------------------------------------

    def check_canonical(self, addr: int) -> None:
        t = (addr >> self._vshift) & self._topmask
        if t != 0 and t != self._topmask:
            raise _Crash(CRASH_NON_CANONICAL, addr)

    def _find(self, addr: int, size: int):
        t = (addr >> self._vshift) & self._topmask
        if t != 0 and t != self._topmask:
            raise _Crash(CRASH_NON_CANONICAL, addr)
        for lo, hi, buf in self.regions:
            if lo <= addr and addr + size <= hi:
                return buf, addr - lo
        raise _Crash(CRASH_UNMAPPED, addr)

    def read(self, addr: int, size: int) -> int:
        buf, off = self._find(addr & MASK64, size)
        return int.from_bytes(buf[off : off + size], "little")

    def write(self, addr: int, value: int, size: int) -> None:
        buf, off = self._find(addr & MASK64, size)
        buf[off : off + size] = value.to_bytes(size, "little")

    def site(self) -> str:
        fn = self.code.functions[self.fi]
        if self.bi < len(fn.blocks):
            blk = fn.blocks[self.bi]
            return f"{fn.name}:{blk.name}:{self.ii}"
        return f"{fn.name}:end"

    def exit_value(self) -> int:
        return int.from_bytes(self.data_buf[0:8], "little")

    def data_snapshot(self) -> bytes:
        return bytes(self.data_buf)

    def flags_word(self) -> int:
        return (
            (1 if self.cf else 0)
            | 0x2
            | ((1 if self.zf else 0) << 6)
            | ((1 if self.sf else 0) << 7)
            | ((1 if self.of else 0) << 11)
        )

    def set_flags_word(self, word: int) -> None:
        self.cf = bool(word & 1)
        self.zf = bool(word & (1 << 6))
        self.sf = bool(word & (1 << 7))
        self.of = bool(word & (1 << 11))


MachineState = Machine


def deliver_aex(m: Machine) -> None:
    """Save all register state into the save area, then restore it.

    Register values round-trip exactly; the only net effect is that save-area
    bytes are rewritten wherever register state lands, which is precisely
    what clobbers any second-stack slots kept there.
    """
    ssa = m.ssa_buf
    g = m._gpr_dump_off
    _PACK_GPRS.pack_into(ssa, g, *m.gpr)
    rip_enc = RIP_TAG | (m.fi << 32) | (m.bi << 16) | (m.ii & 0xFFFF)
    _PACK_TAIL.pack_into(ssa, g + 128, m.flags_word(), rip_enc, m.gpr[4], m.gpr[5])
    ssa[g + 160 : g + 176] = b"\x00" * 16
    offs = m._lane_offsets
    for cls, img in m.lanes.items():
        off = offs[cls]
        ssa[off : off + len(img)] = img
    # ERESUME: restore from the save-area image.
    m.gpr = list(_PACK_GPRS.unpack_from(ssa, g))
    flags_word, _rip, _ursp, _urbp = _PACK_TAIL.unpack_from(ssa, g + 128)
    m.set_flags_word(flags_word)
    for cls, img in m.lanes.items():
        off = offs[cls]
        img[:] = ssa[off : off + len(img)]
    m.aex_count += 1


def compile_program(
    program: Program,
    plan: SecondStackPlan | None = None,
    cfg: InstrumentationConfig | None = None,
) -> CompiledProgram:
    cfg = cfg or InstrumentationConfig(mode=MODE_NONE)
    if cfg.mode.startswith("qs-"):
        if plan is None:
            raise LoadError("qs modes require a second-stack plan")
        missing = [n for n in program.functions if n not in plan.frame_bytes]
        if missing:
            raise LoadError(f"plan has no frame bytes for {missing}")
        reserved = plan.reserved_register
        for fn in program.functions.values():
            for instr in fn.instructions():
                if instr.provenance != "original":
                    continue
                if any(
                    r.index == reserved.index and r.cls in GPR_CLASSES
                    for r in instr.registers()
                ):
                    raise LoadError(
                        f"original instruction uses reserved register %{reserved.name}"
                    )
    if not program.functions:
        raise LoadError("program has no functions")
    return CompiledProgram(program, plan, cfg)


def load(
    program: Program | CompiledProgram,
    plan: SecondStackPlan | None = None,
    cfg: InstrumentationConfig | None = None,
    stack_bytes: int = 65536,
    seed: int = 0,
    randomize_registers: bool = False,
) -> Machine:
    """Initialize a machine: stack mapped and primed with the halt token,
    extended lanes primed with the non-canonical pattern, and the reserved
    register pointed into the planned save-area region."""
    code = program if isinstance(program, CompiledProgram) else compile_program(program, plan, cfg)
    if stack_bytes < 4096:
        raise LoadError("stack too small")
    return Machine(code, stack_bytes, seed, randomize_registers)


def step(m: Machine) -> str:
    """Execute one instruction; returns 'running', 'clean_exit', or 'crash'."""
    _run(m, sched=None, budget=None, stop_after=m.retired + 1)
    return m.outcome


def _record_crash(m: Machine, exc: _Crash) -> None:
    m.outcome = "crash"
    m.crash_reason = exc.reason
    m.crash_site = m.site()
    m.crash_addr = exc.addr


def _begin_attack(m: Machine) -> None:
    m.attack_started = True
    m.first_aex_retired = m.retired
    m.attacked_key = (m.fi, m.bi)
    fn = m.code.functions[m.fi]
    blk = fn.blocks[m.bi] if m.bi < len(fn.blocks) else None
    m.allowed_blocks = {m.attacked_key}
    if blk is not None:
        m.allowed_blocks.update(blk.successors)
        m.ret_watch = blk.term_kind == "ret"


def _run(m, sched, budget, stop_after=None, trace=None):
    if m.outcome != "running":
        return
    code = m.code
    fns = code.functions
    fi, bi, ii = m.fi, m.bi, m.ii
    fn = fns[fi]
    blk = fn.blocks[bi]
    ops = blk.ops
    attacking = sched is not None
    if attacking:
        next_aex = sched.first_aex_at
        interval = sched.interval
        max_aex = sched.max_aex
    try:
        while True:
            if stop_after is not None and m.retired >= stop_after:
                break
            if budget is not None and m.retired >= budget:
                raise TrialBudgetExceeded(budget)
            if attacking and m.retired >= next_aex and m.aex_count < max_aex:
                m.fi, m.bi, m.ii = fi, bi, ii
                deliver_aex(m)
                if trace is not None:
                    trace(m.retired, m.site(), "aex")
                if not m.attack_started:
                    _begin_attack(m)
                next_aex = m.retired + interval
            if ii >= len(ops):
                bi += 1
                if bi >= len(fn.blocks):
                    raise SimulationError(
                        f"control fell off the end of {fn.name}"
                    )
                blk = fn.blocks[bi]
                ops = blk.ops
                ii = 0
                continue
            if m.attack_started:
                key = (fi, bi)
                # A block "begins" only when its first non-guard instruction
                # completes; a fault during it is the intended termination.
                pending_begin = (
                    ii == blk.began_idx
                    and key != m.attacked_key
                    and key not in m.allowed_blocks
                )
                watch_ret = m.ret_watch and key == m.attacked_key and ii == len(ops) - 1
            else:
                pending_begin = False
                watch_ret = False
            op = ops[ii]
            m.fi, m.bi, m.ii = fi, bi, ii
            if trace is not None:
                trace(m.retired, m.site(), "exec")
            op(m)
            if pending_begin:
                m.entered_after = True
            m.retired += 1
            np = m.npos
            if np is None:
                ii += 1
            else:
                m.npos = None
                nfi, nbi, nii = np
                if watch_ret:
                    m.allowed_blocks.add((nfi, nbi))
                    m.ret_watch = False
                if nfi != fi:
                    fi = nfi
                    fn = fns[fi]
                bi, ii = nbi, nii
                blk = fn.blocks[bi]
                ops = blk.ops
    except _CleanExit:
        m.retired += 1
        m.outcome = "clean_exit"
        if trace is not None:
            trace(m.retired, m.site(), "exit")
    except _Crash as exc:
        m.fi, m.bi, m.ii = fi, bi, ii
        _record_crash(m, exc)
        if trace is not None:
            trace(m.retired, m.site(), "crash")
    finally:
        if m.outcome == "running":
            m.fi, m.bi, m.ii = fi, bi, ii


def _benign_length(code: CompiledProgram, stack_bytes, seed, randomize, budget) -> int:
    probe = Machine(code, stack_bytes, seed, randomize)
    _run(probe, sched=None, budget=budget)
    if probe.outcome != "clean_exit":
        raise SimulationError(
            f"benign probe did not exit cleanly: {probe.outcome} ({probe.crash_reason})"
        )
    return probe.retired


DEFAULT_BUDGET = 2_000_000
# Attack starts are sampled before this many instructions from the benign
# exit: a first interrupt delivered after the final guarded access cannot
# crash the run, and the result is already externally visible by then.
ATTACK_TAIL_MARGIN = 12


def run_trial(
    program: Program | CompiledProgram,
    plan: SecondStackPlan | None = None,
    cfg: InstrumentationConfig | None = None,
    sched: AttackSchedule | None = None,
    seed: int = 0,
    budget: int = DEFAULT_BUDGET,
    stack_bytes: int = 65536,
    randomize_registers: bool = False,
    trace=None,
) -> TrialResult:
    """Run one trial: benign when sched is None, attacked otherwise.

    A "random" attack start is resolved by probing the benign run length and
    sampling a boundary uniformly, excluding the last few instructions after
    the final guarded access (the run's result is already externally visible
    there)."""
    code = program if isinstance(program, CompiledProgram) else compile_program(program, plan, cfg)
    if sched is not None and sched.first_aex_at == "random":
        total = _benign_length(code, stack_bytes, seed, randomize_registers, budget)
        rng = random.Random(seed)
        hi = max(1, total - ATTACK_TAIL_MARGIN)
        sched = AttackSchedule(
            first_aex_at=rng.randrange(0, hi),
            interval=sched.interval,
            max_aex=sched.max_aex,
        )
    m = Machine(code, stack_bytes, seed, randomize_registers)
    _run(m, sched=sched, budget=budget, trace=trace)
    if m.outcome == "running":  # stop_after unused here
        raise TrialBudgetExceeded(budget)
    return TrialResult(
        outcome=m.outcome,
        crash_reason=m.crash_reason,
        crash_site=m.crash_site,
        crash_addr=m.crash_addr,
        aex_before_crash=m.aex_count,
        instructions_after_first_aex=(
            m.retired - m.first_aex_retired if m.attack_started else 0
        ),
        entered_block_after_attacked=m.entered_after,
        retired=m.retired,
        first_aex_at=(sched.first_aex_at if sched is not None else None),
        exit_value=m.exit_value() if m.outcome == "clean_exit" else None,
    )


# -- overwrite-probability validation ---------------------------------------

REG_MODELS = ("uniform64", "address_like", "mixture")


def _overwrite_window_shift(mode: AddressingMode, o_bits: int) -> int:
    """Bit position of the u-bit register window that lands on a stored
    slot's most-significant u bits.  o = 0 is the aligned, fully-covering
    case where the top u bits of the register land on the slot's top u
    bits; with an o-bit slot offset the window is [o-u, o)."""
    if o_bits == 0:
        return 64 - mode.u
    if not mode.u <= o_bits <= mode.v:
        raise ValueError(f"o must be 0 or within [{mode.u}, {mode.v}]")
    return o_bits - mode.u


def overwrite_survival_oracle(mode: AddressingMode = LA48) -> float:
    """Exact fraction of top-bit patterns that leave a stored address
    canonical-compatible: enumerate all 2^(u+1) patterns of the top u+1
    bits; the overwrite survives iff the u-bit window is uniform (the sign
    position is counted as matching).  Equals 2/2^u."""
    u = mode.u
    umask = (1 << u) - 1
    survive = 0
    for pattern in range(1 << (u + 1)):
        window = pattern & umask
        if window == 0 or window == umask:
            survive += 1
    return survive / (1 << (u + 1))


def overwrite_probability_oracle(mode: AddressingMode = LA48) -> float:
    """Exact non-canonical rate for uniform register values: 1 - 2/2^u."""
    return 1.0 - overwrite_survival_oracle(mode)


def mc_overwrite_probability(
    mode: AddressingMode = LA48,
    o_bits: int | None = None,
    reg_model: str = "uniform64",
    samples: int = 100000,
    seed: int = 0,
    mixture_p: float = 0.5,
) -> float:
    """Monte Carlo estimate of the fraction of register values that render a
    stored canonical address non-canonical when their window overwrites the
    slot's most-significant bits."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if reg_model not in REG_MODELS:
        raise ValueError(f"unknown register model {reg_model!r}")
    if o_bits is None:
        o_bits = mode.u
    shift = _overwrite_window_shift(mode, o_bits)
    u = mode.u
    umask = (1 << u) - 1
    addr_mask = (1 << (64 - u)) - 1  # address-like: top u bits zero
    rng = random.Random(seed)
    getrandbits = rng.getrandbits
    non_canonical = 0
    for _ in range(samples):
        r = getrandbits(64)
        if reg_model == "address_like" or (
            reg_model == "mixture" and rng.random() < mixture_p
        ):
            r &= addr_mask
        window = (r >> shift) & umask
        if window != 0 and window != umask:
            non_canonical += 1
    return non_canonical / samples
