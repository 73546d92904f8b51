"""Parse, partition, and re-emit AT&T-syntax x86-64 assembly.

The parser is line oriented.  Functions begin at non-dot labels; `.L*`
labels and LLVM-style `# %bb.N:` marker comments begin basic blocks.
Directives are preserved verbatim and attached to the instruction that
follows them, so emission reproduces the original ordering.  Note that a
directive placed between a terminator and a label re-emits after the
label; none of the supported inputs do this.

CFI directives are passed through unmodified; after instrumentation they
may describe stale offsets.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .isa import (
    Immediate,
    Instruction,
    LabelRef,
    MemOperand,
    MNEMONICS,
    Operand,
    PROVENANCE_INJECTED,
    PROVENANCE_MODIFIED,
    Register,
    REGISTERS,
    TERMINATOR_KINDS,
    is_terminator,
    mnemonic_kind,
)


class AsmError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedInstructionError(AsmError):
    pass


class UnresolvedLabelError(AsmError):
    pass


@dataclass(frozen=True)
class BasicBlock:
    labels: tuple[str, ...] = ()
    marker: str | None = None  # "%bb.N" comment marker, if the block had one
    instructions: tuple[Instruction, ...] = ()

    @property
    def label(self) -> str | None:
        return self.labels[0] if self.labels else None

    @property
    def terminator_kind(self) -> str:
        if not self.instructions:
            return "fallthrough"
        last = self.instructions[-1]
        kind = mnemonic_kind(last.mnemonic)
        return TERMINATOR_KINDS.get(kind, "fallthrough")

    @property
    def terminator(self) -> Instruction | None:
        if self.instructions and self.terminator_kind != "fallthrough":
            return self.instructions[-1]
        return None

    def original_count(self) -> int:
        return sum(1 for i in self.instructions if i.provenance == "original")


@dataclass(frozen=True)
class Function:
    name: str
    blocks: tuple[BasicBlock, ...]
    leading_raw: tuple[str, ...] = ()
    is_instrumented: bool = False

    @property
    def entry(self) -> BasicBlock:
        return self.blocks[0]

    def label_index(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for i, b in enumerate(self.blocks):
            for lab in b.labels:
                out[lab] = i
        return out

    def instructions(self):
        for b in self.blocks:
            yield from b.instructions


@dataclass(frozen=True)
class Program:
    functions: dict[str, Function]
    entry: str | None = None
    data_lines: tuple[str, ...] = ()
    trailing_raw: tuple[str, ...] = ()
    meta: dict[str, str] = field(default_factory=dict)

    def function(self, name: str) -> Function:
        return self.functions[name]


_LABEL_RE = re.compile(r"^([A-Za-z_.$][A-Za-z0-9_.$]*):\s*$")
_MARKER_RE = re.compile(r"^\s*#\s*(%bb\.\d+):\s*$")
_META_RE = re.compile(r"^#\s*sastack:\s*(.*)$")
_PROV_RE = re.compile(r";\s*(injected|modified)\s*$")


def _parse_int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmError(f"bad integer {tok!r}", line) from None


def _parse_register(tok: str, line: int) -> Register:
    name = tok[1:].lower()
    reg = REGISTERS.get(name)
    if reg is None:
        raise AsmError(f"unknown register {tok!r}", line)
    return reg


def _parse_operand(tok: str, line: int) -> Operand:
    tok = tok.strip()
    if not tok:
        raise AsmError("empty operand", line)
    if tok.startswith("$"):
        return Immediate(_parse_int(tok[1:], line))
    if tok.startswith("%"):
        return _parse_register(tok, line)
    if "(" in tok:
        m = re.match(r"^(-?(?:0x[0-9a-fA-F]+|\d+))?\(([^)]*)\)$", tok)
        if m is None:
            raise AsmError(f"malformed memory operand {tok!r}", line)
        disp = _parse_int(m.group(1), line) if m.group(1) else 0
        parts = [p.strip() for p in m.group(2).split(",")]
        base = _parse_register(parts[0], line) if parts[0] else None
        index = None
        scale = 1
        if len(parts) >= 2 and parts[1]:
            index = _parse_register(parts[1], line)
        if len(parts) >= 3 and parts[2]:
            scale = _parse_int(parts[2], line)
        if len(parts) > 3:
            raise AsmError(f"malformed memory operand {tok!r}", line)
        try:
            return MemOperand(base=base, index=index, scale=scale, disp=disp)
        except ValueError as exc:
            raise AsmError(str(exc), line) from None
    if re.match(r"^-?(?:0x[0-9a-fA-F]+|\d+)$", tok):
        return MemOperand(disp=_parse_int(tok, line))
    if re.match(r"^[A-Za-z_.$][A-Za-z0-9_.$]*$", tok):
        return LabelRef(tok)
    raise AsmError(f"cannot parse operand {tok!r}", line)


def _split_operands(text: str) -> list[str]:
    parts: list[str] = []
    depth = 0
    cur = []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur))
    return parts


def _validate_operands(instr: Instruction, line: int) -> None:
    kind = mnemonic_kind(instr.mnemonic)
    ops = instr.operands
    n = len(ops)

    def fail(msg: str) -> None:
        raise AsmError(f"{instr.mnemonic}: {msg}", line)

    mem_count = sum(1 for op in ops if isinstance(op, MemOperand))
    if mem_count > 1:
        fail("at most one memory operand")
    if kind in ("ret", "ud2", "nop"):
        if n != 0:
            fail("takes no operands")
    elif kind in ("jmp", "jcc", "call"):
        if n != 1 or not isinstance(ops[0], LabelRef):
            fail("expects a label operand")
    elif kind == "push":
        if n != 1 or not isinstance(ops[0], (Register, Immediate)):
            fail("expects a register or immediate")
    elif kind == "pop":
        if n != 1 or not isinstance(ops[0], Register):
            fail("expects a register")
    elif kind == "lea":
        if n != 2 or not isinstance(ops[0], MemOperand) or not isinstance(ops[1], Register):
            fail("expects memory, register")
    elif kind == "movsx":
        if n != 2 or not isinstance(ops[0], (MemOperand, Register)) or not isinstance(ops[1], Register):
            fail("expects reg/mem, register")
    elif kind == "movabs":
        if n != 2 or not isinstance(ops[0], Immediate) or not isinstance(ops[1], Register):
            fail("expects immediate, register")
    elif kind in ("mov", "cmp", "test") or kind.startswith("alu.") or kind == "imul":
        if n != 2:
            fail("expects two operands")
        if not isinstance(ops[0], (Register, Immediate, MemOperand)):
            fail("bad source operand")
        if not isinstance(ops[1], (Register, MemOperand)):
            fail("bad destination operand")
        if kind == "imul" and not isinstance(ops[1], Register):
            fail("destination must be a register")
    elif kind.startswith("shift."):
        if n != 2 or not isinstance(ops[0], (Immediate, Register)) or not isinstance(ops[1], (Register, MemOperand)):
            fail("expects imm/%cl, reg/mem")
    elif kind == "vmov" or kind.startswith("valu.") or kind == "kmov":
        if n != 2 or not all(isinstance(op, Register) for op in ops):
            fail("register-to-register form only")
    else:  # pragma: no cover - table exhaustive
        fail("unhandled mnemonic kind")


def _parse_instruction(text: str, line: int, provenance: str) -> Instruction:
    parts = text.split(None, 1)
    mnemonic = parts[0].lower()
    if mnemonic not in MNEMONICS:
        raise UnsupportedInstructionError(f"unsupported mnemonic {mnemonic!r}", line)
    operands: tuple[Operand, ...] = ()
    if len(parts) > 1:
        operands = tuple(_parse_operand(t, line) for t in _split_operands(parts[1]))
    instr = Instruction(mnemonic=mnemonic, operands=operands, source_line=line, provenance=provenance)
    _validate_operands(instr, line)
    return instr


def _split_blocks(events: list, fname: str) -> tuple[BasicBlock, ...]:
    blocks: list[BasicBlock] = []
    labels: list[str] = []
    marker: str | None = None
    instrs: list[Instruction] = []
    open_block = True  # the entry block exists even while empty

    def flush(require_instrs: bool) -> None:
        nonlocal labels, marker, instrs, open_block
        if not instrs and not labels and marker is None and blocks:
            return
        if not instrs and require_instrs:
            raise AsmError(f"label {labels or marker} in {fname} has no instructions")
        blocks.append(BasicBlock(labels=tuple(labels), marker=marker, instructions=tuple(instrs)))
        labels, marker, instrs = [], None, []
        open_block = False

    for ev in events:
        tag = ev[0]
        if tag == "label":
            if instrs:
                flush(False)
            labels.append(ev[1])
            open_block = True
        elif tag == "marker":
            if instrs:
                flush(False)
            if marker is not None:
                raise AsmError(f"consecutive block markers in {fname}")
            marker = ev[1]
            open_block = True
        else:
            instrs.append(ev[1])
            open_block = True
            if is_terminator(ev[1].mnemonic):
                flush(False)
    if instrs or labels or marker is not None or not blocks:
        flush(require_instrs=bool(labels) or marker is not None)
    return tuple(blocks)


def _resolve_labels(functions: dict[str, Function]) -> None:
    for fn in functions.values():
        labels = fn.label_index()
        for block in fn.blocks:
            term = block.terminator
            if term is None:
                continue
            kind = mnemonic_kind(term.mnemonic)
            if kind in ("jmp", "jcc", "call"):
                target = term.operands[0]
                assert isinstance(target, LabelRef)
                if target.name not in labels and target.name not in functions:
                    raise UnresolvedLabelError(
                        f"unresolved label {target.name!r} in {fn.name}", term.source_line
                    )


def parse_program(text: str, entry: str | None = None) -> Program:
    """Parse assembly text into a Program with per-function basic blocks."""
    functions: dict[str, Function] = {}
    data_lines: list[str] = []
    meta: dict[str, str] = {}
    pending_raw: list[str] = []
    cur_name: str | None = None
    cur_leading: tuple[str, ...] = ()
    cur_events: list = []
    in_text = True

    def close_function() -> None:
        nonlocal cur_name, cur_events, cur_leading
        if cur_name is None:
            return
        if cur_name in functions:
            raise AsmError(f"duplicate function {cur_name!r}")
        functions[cur_name] = Function(
            name=cur_name, blocks=_split_blocks(cur_events, cur_name), leading_raw=cur_leading
        )
        cur_name, cur_events, cur_leading = None, [], ()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line.strip():
            continue
        m = _META_RE.match(line.strip())
        if m:
            for item in m.group(1).split():
                if "=" in item:
                    k, v = item.split("=", 1)
                    meta[k] = v
            continue
        m = _MARKER_RE.match(line)
        if m:
            if cur_name is None:
                raise AsmError("block marker outside function", lineno)
            cur_events.append(("marker", m.group(1)))
            continue
        provenance = "original"
        pm = _PROV_RE.search(line)
        if pm:
            provenance = pm.group(1)
            line = line[: pm.start()]
        line = line.split("#", 1)[0].rstrip()
        if ";" in line:
            line = line.split(";", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()

        if not in_text:
            if stripped in (".text",) or stripped.startswith(".section .text"):
                in_text = True
                pending_raw.append(stripped)
            else:
                data_lines.append(stripped)
            continue

        lm = _LABEL_RE.match(stripped)
        if lm:
            name = lm.group(1)
            if name.startswith("."):
                if cur_name is None:
                    raise AsmError(f"block label {name!r} outside function", lineno)
                if pending_raw:
                    # Directives before a block label attach to the next instruction.
                    pass
                cur_events.append(("label", name))
            else:
                close_function()
                cur_name = name
                cur_leading = tuple(pending_raw)
                pending_raw = []
            continue

        if stripped.startswith("."):
            if stripped == ".data" or (
                stripped.startswith(".section") and ".text" not in stripped
            ):
                in_text = False
                data_lines.append(stripped)
                continue
            pending_raw.append(stripped)
            continue

        if cur_name is None:
            raise AsmError("instruction outside of any function", lineno)
        instr = _parse_instruction(stripped, lineno, provenance)
        if pending_raw:
            instr = replace(instr, leading_raw=tuple(pending_raw))
            pending_raw = []
        cur_events.append(("instr", instr))

    close_function()
    _resolve_labels(functions)
    if entry is None and functions:
        entry = next(iter(functions))
    if entry is not None and functions and entry not in functions:
        raise AsmError(f"entry function {entry!r} not defined")
    return Program(
        functions=functions,
        entry=entry if functions else None,
        data_lines=tuple(data_lines),
        trailing_raw=tuple(pending_raw),
        meta=meta,
    )


def build_cfg(fn: Function) -> Function:
    """Re-derive the block partition of a function from its instruction stream.

    Splits at labels, block markers, and after every jump, branch, ret, and
    call.  Idempotent on well-formed functions; used to renormalize after
    passes that insert branches.
    """
    events: list = []
    for block in fn.blocks:
        for lab in block.labels:
            events.append(("label", lab))
        if block.marker is not None:
            events.append(("marker", block.marker))
        for instr in block.instructions:
            events.append(("instr", instr))
    return replace(fn, blocks=_split_blocks(events, fn.name))


def successor_labels(fn: Function, block_index: int) -> tuple[str | int, ...]:
    """Static successors of a block: block indices within fn, or function names."""
    labels = fn.label_index()
    block = fn.blocks[block_index]
    kind = block.terminator_kind
    out: list[str | int] = []

    def resolve(name: str) -> str | int:
        return labels.get(name, name)

    if kind == "jmp":
        out.append(resolve(block.terminator.operands[0].name))
    elif kind == "jcc":
        out.append(resolve(block.terminator.operands[0].name))
        if block_index + 1 < len(fn.blocks):
            out.append(block_index + 1)
    elif kind == "ret":
        pass
    elif kind == "call-return-continuation":
        out.append(resolve(block.terminator.operands[0].name))
    else:  # fallthrough
        if block_index + 1 < len(fn.blocks):
            out.append(block_index + 1)
    return tuple(out)


@dataclass(frozen=True)
class BlockStats:
    block_count: int
    original_instructions: int
    avg_block_size: float
    degenerate: bool = False


def block_stats(program: Program) -> dict[str, BlockStats]:
    """Per-function block count and average original instructions per block."""
    out: dict[str, BlockStats] = {}
    for name, fn in program.functions.items():
        count = len(fn.blocks)
        total = sum(b.original_count() for b in fn.blocks)
        avg = total / count if count else 0.0
        out[name] = BlockStats(
            block_count=count,
            original_instructions=total,
            avg_block_size=avg,
            degenerate=total == 0,
        )
    return out


def program_stats(program: Program) -> BlockStats:
    per = block_stats(program)
    count = sum(s.block_count for s in per.values())
    total = sum(s.original_instructions for s in per.values())
    return BlockStats(
        block_count=count,
        original_instructions=total,
        avg_block_size=total / count if count else 0.0,
        degenerate=total == 0,
    )


def emit_asm(program: Program) -> str:
    """Emit a Program back to text.  parse(emit(p)) is structurally equal to p."""
    lines: list[str] = []
    if program.meta:
        kv = " ".join(f"{k}={v}" for k, v in program.meta.items())
        lines.append(f"# sastack: {kv}")
    first = True
    for fn in program.functions.values():
        if not first:
            lines.append("")
        first = False
        for raw in fn.leading_raw:
            lines.append("\t" + raw)
        lines.append(f"{fn.name}:")
        for block in fn.blocks:
            for lab in block.labels:
                lines.append(f"{lab}:")
            if block.marker is not None:
                lines.append(f"# {block.marker}:")
            for instr in block.instructions:
                for raw in instr.leading_raw:
                    lines.append("\t" + raw)
                text = "\t" + instr.format()
                if instr.provenance in (PROVENANCE_INJECTED, PROVENANCE_MODIFIED):
                    text += f" ;{instr.provenance}"
                lines.append(text)
    for raw in program.trailing_raw:
        lines.append("\t" + raw)
    for raw in program.data_lines:
        lines.append("\t" + raw)
    return "\n".join(lines) + ("\n" if lines else "")


def normalize_asm(text: str) -> str:
    """Comment-normalized form: drop '#' comments and blank lines, collapse
    whitespace.  Provenance markers (';injected'/';modified') are kept."""
    out: list[str] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        line = re.sub(r"\s+", " ", line.strip())
        if line:
            out.append(line)
    return "\n".join(out) + ("\n" if out else "")


def structurally_equal(a: Program, b: Program) -> bool:
    if list(a.functions) != list(b.functions) or a.data_lines != b.data_lines:
        return False
    for fa, fb in zip(a.functions.values(), b.functions.values()):
        if fa.name != fb.name or len(fa.blocks) != len(fb.blocks):
            return False
        if fa.leading_raw != fb.leading_raw:
            return False
        for ba, bb in zip(fa.blocks, fb.blocks):
            if ba.labels != bb.labels or ba.marker != bb.marker:
                return False
            if len(ba.instructions) != len(bb.instructions):
                return False
            for ia, ib in zip(ba.instructions, bb.instructions):
                if (ia.mnemonic, ia.operands, ia.provenance, ia.leading_raw) != (
                    ib.mnemonic,
                    ib.operands,
                    ib.provenance,
                    ib.leading_raw,
                ):
                    return False
    return True
