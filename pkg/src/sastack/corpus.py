"""Bundled synthetic workload registry.

Eight programs spanning block-size profiles from ~3 to ~36 average
instructions per block, standing in for real benchmark suites.  Expected
exit values were computed with independent Python models of each algorithm
(see tests) and are re-verified by an uninstrumented run at experiment
start.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .asm_ir import Program, parse_program, program_stats

CORPUS_DIR = Path(__file__).parent / "corpus"


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    path: Path
    entry_function: str
    expected_exit: int
    description: str
    block_count: int = 0
    avg_block_size: float = 0.0

    def load(self) -> Program:
        return parse_program(self.path.read_text(encoding="utf-8"), entry=self.entry_function)


_RAW = [
    ("state_machine", 0x200, "three-state dispatch loop, tiny blocks"),
    ("classifier", 0x52F5, "eight-way threshold cascade, branch heavy"),
    ("sort_loop", 0x2B7416, "insertion sort over a data array, helper call"),
    ("list_walk", 0x5FEDA, "pointer-chasing walk of a built linked list"),
    ("bitfield", 0x19F3F7C873A, "bit test/rotate rounds over a word"),
    ("string_scan", 0xA80ED5D07D844C14, "sentinel scan with accumulator mixing"),
    ("matrix_kernel", 0x1E915, "3x3 matrix product with spilled row pointers"),
    ("feistel_rounds", 0xD6C766EE0178E057, "unrolled cipher rounds, very large blocks"),
]


def load_corpus(names: list[str] | None = None) -> list[CorpusEntry]:
    entries = []
    for name, expected, desc in _RAW:
        if names is not None and name not in names:
            continue
        path = CORPUS_DIR / f"{name}.s"
        program = parse_program(path.read_text(encoding="utf-8"), entry="main")
        stats = program_stats(program)
        entries.append(
            CorpusEntry(
                name=name,
                path=path,
                entry_function="main",
                expected_exit=expected,
                description=desc,
                block_count=stats.block_count,
                avg_block_size=stats.avg_block_size,
            )
        )
    if names is not None:
        unknown = set(names) - {e.name for e in entries}
        if unknown:
            raise KeyError(f"unknown corpus programs: {sorted(unknown)}")
    return entries


def corpus_names() -> list[str]:
    return [name for name, _, _ in _RAW]
