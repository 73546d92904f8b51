"""Save-area second-stack toolchain: assembly instrumentation, an abstract
machine with interrupt delivery, and an evaluation harness."""

from .asm_ir import (
    AsmError,
    BasicBlock,
    Function,
    Program,
    UnresolvedLabelError,
    UnsupportedInstructionError,
    block_stats,
    build_cfg,
    emit_asm,
    normalize_asm,
    parse_program,
    program_stats,
)
from .instrument import (
    InstrumentationConfig,
    InstrumentError,
    MemRefAnalysis,
    OverheadStats,
    identify_memory_refs,
    instrument,
    instrument_quanshield,
    instrument_varys,
    plan_frames,
    prepare_plan,
)
from .machine import (
    AttackSchedule,
    LoadError,
    Machine,
    MachineState,
    SimulationError,
    TrialBudgetExceeded,
    TrialResult,
    compile_program,
    deliver_aex,
    load,
    mc_overwrite_probability,
    overwrite_probability_oracle,
    overwrite_survival_oracle,
    run_trial,
    step,
)
from .ssa_layout import (
    LA48,
    LA57,
    AddressingMode,
    CapacityError,
    FeatureSet,
    FrameSizeInputs,
    FrameSpec,
    LayoutError,
    SecondStackPlan,
    SsaLayout,
    default_ssa_layout,
    frame_size,
    is_canonical,
    load_plan,
    plan_second_stack,
    save_plan,
    scan_used_features,
)

__version__ = "0.1.0"
