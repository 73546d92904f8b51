"""Register, operand, and instruction vocabulary for the supported x86-64 subset.

Only AT&T syntax is supported.  The subset covers the mov/alu/branch core
plus a handful of vector and mask moves so extended-feature usage can be
detected in input programs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class RegClass(enum.Enum):
    GPR64 = "gpr64"
    GPR32 = "gpr32"
    GPR16 = "gpr16"
    GPR8 = "gpr8"
    XMM = "xmm"
    YMM = "ymm"
    ZMM = "zmm"
    MMX = "mmx"      # FP/MMX stack aliases
    KMASK = "kmask"  # AVX-512 opmask


@dataclass(frozen=True)
class Register:
    name: str
    cls: RegClass
    index: int

    def __str__(self) -> str:
        return "%" + self.name


_GPR64 = ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
          "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"]
_GPR32 = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
          "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d"]
_GPR16 = ["ax", "cx", "dx", "bx", "sp", "bp", "si", "di",
          "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w"]
_GPR8 = ["al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil",
         "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b"]

REGISTERS: dict[str, Register] = {}
for _i, _n in enumerate(_GPR64):
    REGISTERS[_n] = Register(_n, RegClass.GPR64, _i)
for _i, _n in enumerate(_GPR32):
    REGISTERS[_n] = Register(_n, RegClass.GPR32, _i)
for _i, _n in enumerate(_GPR16):
    REGISTERS[_n] = Register(_n, RegClass.GPR16, _i)
for _i, _n in enumerate(_GPR8):
    REGISTERS[_n] = Register(_n, RegClass.GPR8, _i)
for _i in range(16):
    REGISTERS[f"xmm{_i}"] = Register(f"xmm{_i}", RegClass.XMM, _i)
    REGISTERS[f"ymm{_i}"] = Register(f"ymm{_i}", RegClass.YMM, _i)
for _i in range(32):
    REGISTERS[f"zmm{_i}"] = Register(f"zmm{_i}", RegClass.ZMM, _i)
for _i in range(8):
    REGISTERS[f"mm{_i}"] = Register(f"mm{_i}", RegClass.MMX, _i)
    REGISTERS[f"k{_i}"] = Register(f"k{_i}", RegClass.KMASK, _i)

GPR_CLASSES = {RegClass.GPR64, RegClass.GPR32, RegClass.GPR16, RegClass.GPR8}
VECTOR_CLASSES = {RegClass.XMM, RegClass.YMM, RegClass.ZMM, RegClass.MMX, RegClass.KMASK}

RAX = REGISTERS["rax"]
RCX = REGISTERS["rcx"]
RDX = REGISTERS["rdx"]
RSP = REGISTERS["rsp"]
RBP = REGISTERS["rbp"]
R10 = REGISTERS["r10"]
R14 = REGISTERS["r14"]


def gpr64(index: int) -> Register:
    return REGISTERS[_GPR64[index]]


@dataclass(frozen=True)
class Immediate:
    value: int

    def __str__(self) -> str:
        if self.value >= 4096 or self.value <= -4096:
            return f"$0x{self.value:x}" if self.value >= 0 else f"$-0x{-self.value:x}"
        return f"${self.value}"


@dataclass(frozen=True)
class MemOperand:
    """disp(base, index, scale); absolute addressing when base and index are absent."""

    base: Register | None = None
    index: Register | None = None
    scale: int = 1
    disp: int = 0

    def __post_init__(self) -> None:
        if self.scale not in (1, 2, 4, 8):
            raise ValueError(f"invalid scale {self.scale}")

    def __str__(self) -> str:
        def _d(v: int) -> str:
            if v >= 4096:
                return f"0x{v:x}"
            if v <= -4096:
                return f"-0x{-v:x}"
            return str(v)

        if self.base is None and self.index is None:
            return _d(self.disp)
        inner = str(self.base) if self.base is not None else ""
        if self.index is not None:
            inner += f",{self.index},{self.scale}"
        disp = _d(self.disp) if self.disp != 0 else ""
        return f"{disp}({inner})"


@dataclass(frozen=True)
class LabelRef:
    name: str

    def __str__(self) -> str:
        return self.name


Operand = Register | Immediate | MemOperand | LabelRef

PROVENANCE_ORIGINAL = "original"
PROVENANCE_INJECTED = "injected"
PROVENANCE_MODIFIED = "modified"


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple[Operand, ...] = ()
    source_line: int = 0
    provenance: str = PROVENANCE_ORIGINAL
    # Role tag for injected/modified instructions (frame_add, rbp_store,
    # reload, dummy, frame_sub, slot_rewrite, varys_check, varys_abort).
    role: str | None = None
    # Directive lines (verbatim) that preceded this instruction in the source.
    leading_raw: tuple[str, ...] = field(default_factory=tuple)

    def format(self) -> str:
        if not self.operands:
            return self.mnemonic
        return self.mnemonic + "\t" + ", ".join(str(op) for op in self.operands)

    def memory_operands(self) -> tuple[MemOperand, ...]:
        return tuple(op for op in self.operands if isinstance(op, MemOperand))

    def registers(self) -> tuple[Register, ...]:
        regs: list[Register] = []
        for op in self.operands:
            if isinstance(op, Register):
                regs.append(op)
            elif isinstance(op, MemOperand):
                if op.base is not None:
                    regs.append(op.base)
                if op.index is not None:
                    regs.append(op.index)
        return tuple(regs)


# Operand-shape codes: r = register, i = immediate, m = memory, l = label.
# Each entry: (kind, width-in-bytes or 0, allowed shapes).
_RM = ("ri,rm", "m,r")  # src can be reg/imm/mem; mem-to-mem is rejected

MNEMONICS: dict[str, tuple[str, int]] = {
    "movq": ("mov", 8),
    "movl": ("mov", 4),
    "movslq": ("movsx", 8),
    "movabsq": ("movabs", 8),
    "leaq": ("lea", 8),
    "addq": ("alu.add", 8), "addl": ("alu.add", 4),
    "subq": ("alu.sub", 8), "subl": ("alu.sub", 4),
    "andq": ("alu.and", 8), "andl": ("alu.and", 4),
    "orq": ("alu.or", 8), "orl": ("alu.or", 4),
    "xorq": ("alu.xor", 8), "xorl": ("alu.xor", 4),
    "imulq": ("imul", 8), "imull": ("imul", 4),
    "shlq": ("shift.shl", 8), "shll": ("shift.shl", 4),
    "shrq": ("shift.shr", 8), "shrl": ("shift.shr", 4),
    "sarq": ("shift.sar", 8), "sarl": ("shift.sar", 4),
    "cmpq": ("cmp", 8), "cmpl": ("cmp", 4),
    "testq": ("test", 8), "testl": ("test", 4),
    "pushq": ("push", 8),
    "popq": ("pop", 8),
    "call": ("call", 0), "callq": ("call", 0),
    "ret": ("ret", 0), "retq": ("ret", 0),
    "jmp": ("jmp", 0),
    "ud2": ("ud2", 0),
    "nop": ("nop", 0),
    # Vector / mask moves: enough to detect extended-feature use and to
    # shuffle register-to-register state in the simulator.
    "movaps": ("vmov", 16), "movups": ("vmov", 16), "movapd": ("vmov", 16),
    "movdqa": ("vmov", 16), "movdqu": ("vmov", 16),
    "vmovaps": ("vmov", 0), "vmovapd": ("vmov", 0),
    "vmovdqa": ("vmov", 0), "vmovdqu": ("vmov", 0),
    "pxor": ("valu.xor", 0), "xorps": ("valu.xor", 16),
    "paddq": ("valu.add", 0), "addps": ("valu.add", 16),
    "vaddps": ("valu.add", 0), "vaddpd": ("valu.add", 0),
    "vpxord": ("valu.xor", 0),
    "kmovw": ("kmov", 2), "kmovq": ("kmov", 8),
}

JCC = {
    "je", "jne", "jl", "jle", "jg", "jge", "ja", "jae", "jb", "jbe", "js", "jns",
}
for _j in JCC:
    MNEMONICS[_j] = ("jcc", 0)

# Terminator mnemonics end a basic block.  Calls end blocks too: the
# continuation after a call is its own block so block-entry guards cover it.
TERMINATOR_KINDS = {"jmp": "jmp", "jcc": "jcc", "ret": "ret", "call": "call-return-continuation"}


def mnemonic_kind(mnemonic: str) -> str:
    return MNEMONICS[mnemonic][0]


def mnemonic_width(mnemonic: str) -> int:
    return MNEMONICS[mnemonic][1]


def is_terminator(mnemonic: str) -> bool:
    return MNEMONICS[mnemonic][0] in ("jmp", "jcc", "ret", "call")
