"""State-save-area model: region layout, feature scan, second-stack planning,
canonical-address predicate, and the per-function frame-size formula.

The save area is laid out as XSAVE | MISC | GPRSGX | PAD, padded to a 4 KiB
multiple.  XSAVE and MISC are tiled by extended-register state blocks using
a fixed synthetic sub-layout (x87/MMX, XMM, YMM-high, ZMM16-31 in XSAVE;
opmask state filling MISC).  Byte ranges are what matters here, not the
exact hardware encoding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

from .asm_ir import Program
from .isa import RegClass, Register, REGISTERS

SSA_PAGE = 4096
GPRSGX_BYTES = 176
XSAVE_RANGE = (2048, 3072)
MISC_RANGE = (512, 1024)


class LayoutError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class AddressingMode:
    name: str
    v: int  # addressing bits
    u: int  # 64 - v

    def __post_init__(self) -> None:
        if self.v + self.u != 64:
            raise LayoutError(f"{self.name}: v + u must be 64")


LA48 = AddressingMode("LA48", v=48, u=16)
LA57 = AddressingMode("LA57", v=57, u=7)
ADDRESSING_MODES = {"LA48": LA48, "LA57": LA57}


def addressing_mode(name: str) -> AddressingMode:
    try:
        return ADDRESSING_MODES[name.upper()]
    except KeyError:
        raise LayoutError(f"unknown addressing mode {name!r}") from None


def is_canonical(addr: int, mode: AddressingMode = LA48) -> bool:
    """True iff bits [v, 63] are all copies of bit v-1."""
    top = (addr >> (mode.v - 1)) & ((1 << (mode.u + 1)) - 1)
    return top == 0 or top == (1 << (mode.u + 1)) - 1


def canonical_count(mode: AddressingMode = LA48) -> int:
    """Exact number of canonical 64-bit values: 2 sign choices * 2^(v-1)."""
    return 2 * (1 << (mode.v - 1))


def benign_survival_bounds(mode: AddressingMode = LA48) -> tuple[float, float]:
    """Probability that a random u-bit overwrite leaves a stored address
    canonical-compatible: between 1/2^u (window must match the stored sign)
    and 2/2^u (any uniform window counted). The overwrite oracle uses the
    upper count."""
    return (1.0 / (1 << mode.u), 2.0 / (1 << mode.u))


# Extended-register state blocks, in fixed order inside XSAVE.
CLASS_FP_MMX = "fp_mmx"
CLASS_XMM = "xmm"
CLASS_YMM_HI = "ymm_hi"
CLASS_ZMM_HI = "zmm16_31"
CLASS_OPMASK = "opmask"

EXTENDED_CLASSES = (CLASS_FP_MMX, CLASS_XMM, CLASS_YMM_HI, CLASS_ZMM_HI, CLASS_OPMASK)

_FP_BYTES = 128   # 8 regs x 16 bytes
_XMM_BYTES = 256  # 16 regs x 16 bytes
_YMM_BYTES = 256  # 16 high halves x 16 bytes


@dataclass(frozen=True)
class SsaLayout:
    """Region table (name, offset, size) covering one save-area frame."""

    regions: tuple[tuple[str, int, int], ...]
    total_size: int

    def region(self, name: str) -> tuple[int, int]:
        for rname, off, size in self.regions:
            if rname == name:
                return off, size
        raise LayoutError(f"no region {name!r}")

    @property
    def xsave(self) -> tuple[int, int]:
        return self.region("XSAVE")

    @property
    def misc(self) -> tuple[int, int]:
        return self.region("MISC")

    @property
    def gprsgx(self) -> tuple[int, int]:
        return self.region("GPRSGX")

    def class_ranges(self) -> dict[str, tuple[int, int]]:
        """Byte range (offset, size) each extended-state block occupies.
        Blocks tile XSAVE and MISC completely; ZMM16-31 absorbs XSAVE slack
        and opmask absorbs MISC slack."""
        xoff, xsize = self.xsave
        moff, msize = self.misc
        zmm_bytes = xsize - _FP_BYTES - _XMM_BYTES - _YMM_BYTES
        if zmm_bytes < 16 * 64:
            raise LayoutError("XSAVE region too small for the synthetic sub-layout")
        return {
            CLASS_FP_MMX: (xoff, _FP_BYTES),
            CLASS_XMM: (xoff + _FP_BYTES, _XMM_BYTES),
            CLASS_YMM_HI: (xoff + _FP_BYTES + _XMM_BYTES, _YMM_BYTES),
            CLASS_ZMM_HI: (xoff + _FP_BYTES + _XMM_BYTES + _YMM_BYTES, zmm_bytes),
            CLASS_OPMASK: (moff, msize),
        }


def default_ssa_layout(xsave_bytes: int = 2048, misc_bytes: int = 512) -> SsaLayout:
    """Accumulate XSAVE | MISC | GPRSGX | PAD, padding to a 4096 multiple."""
    if not XSAVE_RANGE[0] <= xsave_bytes <= XSAVE_RANGE[1]:
        raise LayoutError(f"XSAVE size {xsave_bytes} outside {XSAVE_RANGE}")
    if not MISC_RANGE[0] <= misc_bytes <= MISC_RANGE[1]:
        raise LayoutError(f"MISC size {misc_bytes} outside {MISC_RANGE}")
    used = xsave_bytes + misc_bytes + GPRSGX_BYTES
    total = ((used + SSA_PAGE - 1) // SSA_PAGE) * SSA_PAGE
    regions = (
        ("XSAVE", 0, xsave_bytes),
        ("MISC", xsave_bytes, misc_bytes),
        ("GPRSGX", xsave_bytes + misc_bytes, GPRSGX_BYTES),
        ("PAD", used, total - used),
    )
    return SsaLayout(regions=regions, total_size=total)


@dataclass(frozen=True)
class FeatureSet:
    """Extended-register classes a program touches, plus the byte ranges of
    their save-state blocks."""

    used_classes: frozenset[str]
    used_ranges: tuple[tuple[int, int], ...]

    @property
    def all_used(self) -> bool:
        return set(EXTENDED_CLASSES) <= self.used_classes


def _classes_for_register(reg: Register) -> tuple[str, ...]:
    if reg.cls == RegClass.XMM:
        return (CLASS_XMM,)
    if reg.cls == RegClass.YMM:
        return (CLASS_XMM, CLASS_YMM_HI)
    if reg.cls == RegClass.ZMM:
        if reg.index >= 16:
            return (CLASS_ZMM_HI,)
        # zmm0-15 alias xmm/ymm state; their upper 256 bits have no block here.
        return (CLASS_XMM, CLASS_YMM_HI)
    if reg.cls == RegClass.MMX:
        return (CLASS_FP_MMX,)
    if reg.cls == RegClass.KMASK:
        return (CLASS_OPMASK,)
    return ()


def scan_used_features(program: Program, layout: SsaLayout | None = None) -> FeatureSet:
    """Mark a register class used iff any instruction operand references it."""
    layout = layout or default_ssa_layout()
    used: set[str] = set()
    for fn in program.functions.values():
        for instr in fn.instructions():
            for reg in instr.registers():
                used.update(_classes_for_register(reg))
    ranges = layout.class_ranges()
    used_ranges = tuple(sorted(ranges[c] for c in used))
    return FeatureSet(used_classes=frozenset(used), used_ranges=used_ranges)


@dataclass(frozen=True)
class SecondStackPlan:
    s: int                     # byte offset of the chosen region within the SSA
    n_bytes: int               # usable second-stack capacity
    o_bits: int                # bit offset inside the region (0 unless fallback)
    addressing: AddressingMode
    reserved_register: Register
    fallback_mode: bool
    layout: SsaLayout
    frame_bytes: dict[str, int] = field(default_factory=dict)
    stored_generic: dict[str, int] = field(default_factory=dict)

    @property
    def base_offset(self) -> int:
        """Offset of the reserved register's initial value within the SSA."""
        return self.s + self.o_bits // 8

    def to_json_dict(self) -> dict:
        return {
            "s": self.s,
            "N": self.n_bytes,
            "o": self.o_bits,
            "mode": self.addressing.name,
            "reserved_register": self.reserved_register.name,
            "fallback": self.fallback_mode,
            "frame_bytes": dict(sorted(self.frame_bytes.items())),
            "stored_generic": dict(sorted(self.stored_generic.items())),
            "layout": {
                "regions": [list(r) for r in self.layout.regions],
                "total_size": self.layout.total_size,
            },
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def plan_from_json_dict(data: dict) -> SecondStackPlan:
    layout = SsaLayout(
        regions=tuple(tuple(r) for r in data["layout"]["regions"]),
        total_size=data["layout"]["total_size"],
    )
    return SecondStackPlan(
        s=data["s"],
        n_bytes=data["N"],
        o_bits=data["o"],
        addressing=addressing_mode(data["mode"]),
        reserved_register=REGISTERS[data["reserved_register"]],
        fallback_mode=data["fallback"],
        layout=layout,
        frame_bytes=dict(data.get("frame_bytes", {})),
        stored_generic=dict(data.get("stored_generic", {})),
    )


def save_plan(plan: SecondStackPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_plan(path) -> SecondStackPlan:
    with open(path, encoding="utf-8") as fh:
        return plan_from_json_dict(json.load(fh))


DEFAULT_O_BITS = 16


def plan_second_stack(
    layout: SsaLayout,
    feats: FeatureSet,
    mode: AddressingMode = LA48,
    o_req: int | None = None,
    reserved_register: Register = REGISTERS["r14"],
) -> SecondStackPlan:
    """Pick the second-stack region.

    Preferred: the largest contiguous run of extended-state bytes whose
    classes the program never touches (those bytes are rewritten with the
    primed lane value on every save).  Fallback, when every class is used:
    the general-purpose dump region with an o-bit slot offset so register
    values splice across stored slots.
    """
    ranges = layout.class_ranges()
    xsave_off, xsave_size = layout.xsave
    misc_off, misc_size = layout.misc
    free = bytearray(layout.total_size)
    for off, size in (ranges[c] for c in EXTENDED_CLASSES if c not in feats.used_classes):
        for i in range(off, off + size):
            free[i] = 1
    # Largest contiguous free run inside XSAVE+MISC.
    best = (0, 0)
    run_start = None
    lo, hi = xsave_off, misc_off + misc_size
    for i in range(lo, hi + 1):
        if i < hi and free[i]:
            if run_start is None:
                run_start = i
        elif run_start is not None:
            if i - run_start > best[1]:
                best = (run_start, i - run_start)
            run_start = None

    if best[1] >= 8:
        return SecondStackPlan(
            s=best[0],
            n_bytes=best[1],
            o_bits=0,
            addressing=mode,
            reserved_register=reserved_register,
            fallback_mode=False,
            layout=layout,
        )

    # Fallback: all extended features used; live in the GPR dump region with
    # an o-bit offset (clamped to [u, v], byte multiple).
    o = DEFAULT_O_BITS if o_req is None else o_req
    o = max(mode.u, min(mode.v, o))
    o = min((o + 7) // 8 * 8, mode.v // 8 * 8)
    gpr_off, gpr_size = layout.gprsgx
    n = gpr_size - o // 8
    if n < 8:
        raise CapacityError("save area cannot host a single 8-byte slot")
    return SecondStackPlan(
        s=gpr_off,
        n_bytes=n,
        o_bits=o,
        addressing=mode,
        reserved_register=reserved_register,
        fallback_mode=True,
        layout=layout,
    )


@dataclass(frozen=True)
class FrameSizeInputs:
    m_refs: int       # generic memory references in the function
    n_bytes: int      # total second-stack capacity
    p_depth: int      # maximum call depth

    def __post_init__(self) -> None:
        if self.m_refs < 0 or self.n_bytes <= 0 or self.p_depth < 1:
            raise ValueError("require M >= 0, N > 0, P >= 1")


@dataclass(frozen=True)
class FrameSpec:
    size_bytes: int
    stored_generic_count: int


def frame_size(inputs: FrameSizeInputs) -> FrameSpec:
    """8 * min{M+1, floor(N/8P)} bytes; the frame holds the frame base slot
    plus as many generic-reference slots as fit."""
    cap_slots = inputs.n_bytes // (8 * inputs.p_depth)
    if cap_slots == 0:
        raise CapacityError(
            f"no room for a frame base slot: N={inputs.n_bytes}, P={inputs.p_depth}"
        )
    slots = min(inputs.m_refs + 1, cap_slots)
    return FrameSpec(size_bytes=8 * slots, stored_generic_count=min(inputs.m_refs, cap_slots - 1))


def with_frames(
    plan: SecondStackPlan, frame_bytes: dict[str, int], stored_generic: dict[str, int]
) -> SecondStackPlan:
    return replace(plan, frame_bytes=dict(frame_bytes), stored_generic=dict(stored_generic))
