"""Two-track attention block stack with branch, shard and data parallel
training schedules over a simulated communicator, plus an analytic step
cost model."""

from .costmodel import (
    DeviceModel,
    FINE_TUNING_DEVICE,
    FINE_TUNING_MODEL,
    INITIAL_TRAINING_DEVICE,
    INITIAL_TRAINING_MODEL,
    end_to_end_days,
    evoformer_fraction,
    speedup,
    speedup_report,
    step_time,
)
from .errors import (
    BranchparError,
    CollectiveError,
    ComparisonError,
    ConfigError,
    ContractError,
    DimensionError,
    NumericsError,
    WorldError,
)
from .evoformer import EvoConfig, evoformer_block, evoformer_stack, init_params
from .schedules import (
    ParallelLayout,
    compare_runs,
    expected_comm_volume,
    run_bp,
    run_dap,
    run_distributed,
    run_dp,
    run_single,
    trace_volume,
)

__version__ = "0.1.0"
