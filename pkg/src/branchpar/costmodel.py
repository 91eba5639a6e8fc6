"""Analytic step-time model for the block stack under each layout.

A step costs compute, kernel launches and communication:

* compute: closed-form forward FLOPs per sub-op (matmul and projection
  multiply-adds times two; normalizations, softmax and elementwise work
  ride along free), multiplied by (recycle_factor + bwd_flop_factor) to
  cover recycled forwards plus the backward pass, divided by the device
  rate. Axial sharding divides this term.
* launches: one kernel per recorded op, same multiplier, times a fixed
  overhead. Sharding does not shrink an op count, so this is the floor
  that sharded layouts eventually hit.
* communication: collective count times link latency plus payload bytes
  over link bandwidth, from the same per-block collective schedule the
  simulator executes in the fwd and bwd phases. Parameter gradients are
  modeled as one fused bucket per sync stage.

Branch parallelism assigns each rank its branch's FLOPs and ops; the
step takes the slower branch. The split is whatever the closed forms
say for the model dims, roughly 54/46 at short crops and 75/25 at long
ones, which is why the branch schedule pays off less on fine-tune shapes
than sharding does.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ConfigError
from .evoformer import EvoConfig, param_count
from .schedules import ParallelLayout


@dataclass(frozen=True)
class DeviceModel:
    """Hardware constants, hand-calibrated so the presets land in the
    published performance envelope."""

    compute_rate: float = 2.2e13      # FLOP/s sustained
    link_bandwidth: float = 6.0e11    # bytes/s
    link_latency: float = 1.0e-3      # seconds per collective
    launch_overhead: float = 3.5e-5   # seconds per kernel
    non_evoformer_time: float = 1.89  # everything outside the stack, per step
    recycle_factor: float = 2.5       # average forward passes per step
    bwd_flop_factor: float = 2.0      # backward cost relative to forward
    precision_bytes: int = 8

    @property
    def pass_multiplier(self) -> float:
        return self.recycle_factor + self.bwd_flop_factor


INITIAL_TRAINING_MODEL = EvoConfig(
    s=128, r=256, c_m=256, c_z=128, h=8, c_opm=32, t_factor=4,
    n_blocks=52, variant="parallel")
FINE_TUNING_MODEL = EvoConfig(
    s=512, r=384, c_m=256, c_z=128, h=8, c_opm=32, t_factor=4,
    n_blocks=52, variant="parallel")

INITIAL_TRAINING_DEVICE = DeviceModel()
FINE_TUNING_DEVICE = replace(DeviceModel(), non_evoformer_time=3.67)

GLOBAL_BATCH = 128  # proteins per step across the cluster


def op_flops(cfg: EvoConfig) -> dict:
    """Forward FLOPs per sub-op (projections and matmuls, 2*m*n*k each)."""
    s, r = cfg.s, cfg.r
    c_m, c_z, h = cfg.c_m, cfg.c_z, cfg.h
    c, t = cfg.c_opm, cfg.t_factor
    tri_mult = 10 * r * r * c_z * c + 2 * r * r * c_z * c_z + 2 * c * r ** 3
    tri_attn = 10 * r * r * c_z * c_m + 2 * r * r * c_z * h + 4 * r ** 3 * c_m
    return {
        "row_attn": 10 * s * r * c_m * c_m + 2 * r * r * c_z * h
                    + 4 * s * r * r * c_m,
        "col_attn": 10 * s * r * c_m * c_m + 4 * s * s * r * c_m,
        "msa_transition": 4 * t * s * r * c_m * c_m,
        "opm": 4 * s * r * c_m * c + 2 * s * r * r * c * c
               + 2 * r * r * c * c * c_z,
        "tri_mult_out": tri_mult,
        "tri_mult_in": tri_mult,
        "tri_attn_start": tri_attn,
        "tri_attn_end": tri_attn,
        "pair_transition": 4 * t * r * r * c_z * c_z,
    }


# tape nodes recorded per sub-op; shape independent
OP_NODE_COUNTS = {
    "row_attn": 25,
    "col_attn": 23,
    "msa_transition": 4,
    "opm": 12,
    "tri_mult_out": 18,
    "tri_mult_in": 18,
    "tri_attn_start": 24,
    "tri_attn_end": 26,
    "pair_transition": 4,
}
MSA_TRACK_NODES = (OP_NODE_COUNTS["row_attn"] + OP_NODE_COUNTS["col_attn"]
                   + OP_NODE_COUNTS["msa_transition"] + 3)  # residual adds
PAIR_TRACK_NODES = (OP_NODE_COUNTS["tri_mult_out"] + OP_NODE_COUNTS["tri_mult_in"]
                    + OP_NODE_COUNTS["tri_attn_start"] + OP_NODE_COUNTS["tri_attn_end"]
                    + OP_NODE_COUNTS["pair_transition"] + 5)
MSA_BRANCH_NODES = MSA_TRACK_NODES + OP_NODE_COUNTS["opm"]      # 67
PAIR_BRANCH_NODES = PAIR_TRACK_NODES + 1                        # join add, 96
BLOCK_NODES = MSA_BRANCH_NODES + PAIR_BRANCH_NODES              # 163


def branch_flops(cfg: EvoConfig):
    """(msa branch, pair branch) forward FLOPs for one block."""
    f = op_flops(cfg)
    msa = f["row_attn"] + f["col_attn"] + f["msa_transition"] + f["opm"]
    pair = (f["tri_mult_out"] + f["tri_mult_in"] + f["tri_attn_start"]
            + f["tri_attn_end"] + f["pair_transition"])
    return msa, pair


def block_flops(cfg: EvoConfig) -> int:
    msa, pair = branch_flops(cfg)
    return msa + pair


def _tensor_sizes(cfg: EvoConfig):
    M = cfg.s * cfg.r * cfg.c_m
    Z = cfg.r * cfg.r * cfg.c_z
    O = cfg.r * cfg.r * cfg.c_opm
    B = cfg.r * cfg.r * cfg.h
    return M, Z, O, B


def _role_comm(cfg: EvoConfig, layout: ParallelLayout, role: str, width: int):
    """(collective count, payload bytes) one rank moves in fwd plus bwd."""
    K = cfg.n_blocks
    M, Z, O, B = _tensor_sizes(cfg)
    colls = 0
    elems = 0
    if layout.bp == 2:
        colls += 2 * K + (K + 1) + K
        elems += 2 * K * Z + (K * Z + M) + K * Z
    if layout.dap > 1:
        if role == "full":
            colls += 14 * K + 15 * K
            elems += K * (3 * M + 6 * Z + 3 * O + 2 * B) \
                + K * (4 * M + 6 * Z + 3 * O + 2 * B)
        elif role == "msa":
            colls += 4 * K + 5 * K
            elems += K * (3 * M + Z) + K * (4 * M + Z)
        else:
            colls += 10 * K + 10 * K
            elems += 2 * K * (5 * Z + 3 * O + 2 * B)
    # fused parameter bucket per sync stage
    stages = (layout.dap > 1) + (layout.bp == 2) + (layout.dp > 1)
    colls += stages
    elems += stages * param_count(cfg)
    return colls, elems * width


@dataclass(frozen=True)
class StepTime:
    total: float
    evoformer: float
    non_evoformer: float
    compute: float
    launch: float
    comm: float
    bottleneck: str

    @property
    def evoformer_fraction(self) -> float:
        return self.evoformer / self.total


def step_time(cfg: EvoConfig, layout: ParallelLayout,
              device: DeviceModel) -> StepTime:
    """Modeled seconds per training step under the layout."""
    layout.validate_model(cfg)
    msa_f, pair_f = branch_flops(cfg)
    K = cfg.n_blocks
    mult = device.pass_multiplier
    width = device.precision_bytes

    if layout.bp == 2:
        roles = [("msa", msa_f, MSA_BRANCH_NODES),
                 ("pair", pair_f, PAIR_BRANCH_NODES)]
    else:
        roles = [("full", msa_f + pair_f, BLOCK_NODES)]

    best = None
    for name, flops, nodes in roles:
        compute = flops * K * mult / (device.compute_rate * layout.dap)
        launch = nodes * K * mult * device.launch_overhead
        n_colls, n_bytes = _role_comm(cfg, layout, name, width)
        comm = n_colls * device.link_latency + n_bytes / device.link_bandwidth
        candidate = (compute + launch + comm, name, compute, launch, comm)
        if best is None or candidate[0] > best[0]:
            best = candidate
    evo, name, compute, launch, comm = best
    return StepTime(total=evo + device.non_evoformer_time, evoformer=evo,
                    non_evoformer=device.non_evoformer_time,
                    compute=compute, launch=launch, comm=comm,
                    bottleneck=name)


def evoformer_fraction(cfg: EvoConfig, device: DeviceModel) -> float:
    """Share of a single-rank step spent inside the stack."""
    return step_time(cfg, ParallelLayout(), device).evoformer_fraction


def schedule_bytes(cfg: EvoConfig, layout: ParallelLayout,
                   device: DeviceModel) -> dict:
    """Payload bytes per phase for the branch schedule's collectives,
    summed over one step of one group."""
    K = cfg.n_blocks
    M, Z, _, _ = _tensor_sizes(cfg)
    w = device.precision_bytes
    if layout.bp != 2:
        raise ConfigError("schedule_bytes describes the branch schedule; "
                          f"layout has bp={layout.bp}")
    return {
        "fwd": 2 * K * Z * w,
        "bwd": (2 * K * Z + M) * w,
        "param": param_count(cfg) * w,
    }


def speedup(cfg: EvoConfig, layout: ParallelLayout, device: DeviceModel) -> float:
    """step(single) / step(layout) - 1, as a fraction."""
    base = step_time(cfg, ParallelLayout(), device).total
    return base / step_time(cfg, layout, device).total - 1.0


@dataclass(frozen=True)
class ReportRow:
    layout: ParallelLayout
    step_seconds: float
    proteins_per_second: float
    speedup_pct: float


def speedup_report(cfg: EvoConfig, device: DeviceModel, layouts) -> list:
    """Rows for each layout; speedup is relative to the first entry."""
    rows = []
    base = None
    for layout in layouts:
        t = step_time(cfg, layout, device).total
        if base is None:
            base = t
        rows.append(ReportRow(layout, t, GLOBAL_BATCH / t,
                              (base / t - 1.0) * 100.0))
    return rows


def report_csv(rows) -> str:
    lines = ["layout,step_seconds,proteins_per_second,speedup_pct"]
    for r in rows:
        tag = f"dp{r.layout.dp}.bp{r.layout.bp}.dap{r.layout.dap}"
        lines.append(f"{tag},{r.step_seconds:.6f},"
                     f"{r.proteins_per_second:.6f},{r.speedup_pct:.4f}")
    return "\n".join(lines) + "\n"


INITIAL_STEPS = 78125   # ~10M samples at batch 128
FINE_TUNE_STEPS = 11718  # ~1.5M samples at batch 128


def end_to_end_days(initial_step_seconds: float,
                    fine_tune_step_seconds: float) -> float:
    """Full-schedule wall clock, in days, for the published step counts."""
    seconds = (INITIAL_STEPS * initial_step_seconds
               + FINE_TUNE_STEPS * fine_tune_step_seconds)
    return seconds / 86400.0
