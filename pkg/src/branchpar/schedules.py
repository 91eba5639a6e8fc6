"""Distributed training schedules over the simulated communicator.

Three composable axes, addressed as (dp, bp, dap):

* dp  - data parallelism: replicas run distinct samples, parameter
        gradients are summed across replicas and divided by dp.
* bp  - branch parallelism over the parallel block wiring: rank pairs
        split each block into the MSA branch (row/col attention, MSA
        transition, outer product mean) and the pair branch (triangle
        ops, pair transition). Two broadcasts per block join the
        branches forward; one broadcast plus one allreduce join them
        backward. Branch execution is bit-exact against the single-rank
        run: each branch records the same ops in the same order as its
        slice of the monolithic tape, cross-branch gradient sums have
        exactly two operands, and two-operand float addition commutes.
* dap - axial sharding inside every sub-op: each rank computes a row
        shard of each delta, produced shards are allgathered, operands
        consumed by shard-local compute get their gradients completed by
        an allreduce on the way back. Results agree with the single-rank
        run up to reassociation of float sums.

rank = ((dp_idx * bp) + bp_idx) * dap + dap_idx.

Parameter synchronization happens once per step in the 'param' phase:
shard completion over the dap group, then owner broadcast over the
branch pair, then sum-and-divide over the dp group.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .comm import CommTrace, World
from .errors import ComparisonError, ConfigError, DimensionError
from .evoformer import (EvoConfig, ParamStore, evoformer_block, msa_track,
                        opm, pair_track)


@dataclass(frozen=True)
class ParallelLayout:
    dp: int = 1
    bp: int = 1
    dap: int = 1

    def __post_init__(self):
        if self.dp < 1:
            raise ConfigError(f"layout.dp must be >= 1, got {self.dp}")
        if self.bp not in (1, 2):
            raise ConfigError(
                "layout.bp must be 1 or 2: the block splits into exactly two "
                f"branches (MSA and pair), got bp={self.bp}")
        if self.dap < 1 or (self.dap & (self.dap - 1)) != 0:
            raise ConfigError(
                f"layout.dap must be a power of two >= 1, got {self.dap}")

    @property
    def world_size(self) -> int:
        return self.dp * self.bp * self.dap

    def rank_of(self, dp_i: int, bp_i: int, dap_i: int) -> int:
        return ((dp_i * self.bp) + bp_i) * self.dap + dap_i

    def coords(self, rank: int):
        dap_i = rank % self.dap
        rest = rank // self.dap
        return rest // self.bp, rest % self.bp, dap_i

    def dap_group(self, rank: int):
        dp_i, bp_i, _ = self.coords(rank)
        return tuple(self.rank_of(dp_i, bp_i, k) for k in range(self.dap))

    def bp_group(self, rank: int):
        dp_i, _, dap_i = self.coords(rank)
        return tuple(self.rank_of(dp_i, b, dap_i) for b in range(self.bp))

    def dp_group(self, rank: int):
        _, bp_i, dap_i = self.coords(rank)
        return tuple(self.rank_of(d, bp_i, dap_i) for d in range(self.dp))

    def validate_model(self, cfg: EvoConfig) -> None:
        if self.dap > 1 and (cfg.s % self.dap or cfg.r % self.dap):
            raise ConfigError(
                f"layout.dap={self.dap} must divide both model.s={cfg.s} "
                f"and model.r={cfg.r}")
        if self.bp == 2 and cfg.variant != "parallel":
            raise ConfigError(
                "branch parallelism needs the parallel block wiring; the "
                f"{cfg.variant!r} variant has a serial dependency between "
                "the tracks inside each block")


class DapContext:
    """Shard context handed to sub-ops when dap > 1.

    enter marks a tensor as consumed by shard-local compute; its backward
    allreduces the partial gradient so the contribution accumulated into
    the producer is complete. gather allgathers produced row shards; its
    backward slices the rank's own rows out of the (already complete)
    full gradient. reduce_sum joins partial sums forward (outer product
    mean) and passes gradients through unchanged.
    """

    def __init__(self, world: World, group, rank: int, graph: T.Graph):
        self.world = world
        self.group = tuple(group)
        self.rank = rank
        self.graph = graph
        self.index = self.group.index(rank)
        self.n = len(self.group)
        self.replicated: set[str] = set()

    def bounds(self, size: int):
        if size % self.n != 0:
            raise DimensionError(
                f"axis of size {size} does not split over {self.n} shards")
        w = size // self.n
        return self.index * w, (self.index + 1) * w

    def enter(self, t: T.Tensor) -> T.Tensor:
        g, w, grp, rk = self.graph, self.world, self.group, self.rank

        def backward(grad):
            g.accum(t.nid, w.allreduce_sum(grp, rk, grad, "bwd"))

        return T.custom_op("shard_enter", t.data, (t,), backward)

    def gather(self, t: T.Tensor, axis: int) -> T.Tensor:
        full = self.world.allgather(self.group, self.rank, t.data, axis, "fwd")
        lo = self.index * t.data.shape[axis]
        hi = lo + t.data.shape[axis]
        idx = tuple(slice(lo, hi) if i == axis else slice(None)
                    for i in range(t.data.ndim))
        g = self.graph

        def backward(grad):
            g.accum(t.nid, np.ascontiguousarray(grad[idx]))

        return T.custom_op("shard_gather", full, (t,), backward)

    def reduce_sum(self, t: T.Tensor) -> T.Tensor:
        total = self.world.allreduce_sum(self.group, self.rank, t.data, "fwd")
        g = self.graph

        def backward(grad):
            g.accum(t.nid, grad)

        return T.custom_op("shard_reduce", total, (t,), backward)

    def mark_replicated(self, name: str) -> None:
        self.replicated.add(name)


@dataclass
class RunResult:
    """Outputs of one training step.

    dm and dz are input gradients of the dp_idx=0 sample, unscaled by dp
    (input gradients are replica-local; only parameter gradients are
    averaged). grads hold the synchronized per-parameter gradients.
    """

    m_out: np.ndarray
    z_out: np.ndarray
    loss: float
    dm: np.ndarray
    dz: np.ndarray
    grads: dict
    trace: CommTrace | None = None
    rank_fwd_seconds: dict | None = None
    wall_seconds: float = 0.0


def make_batch(cfg: EvoConfig, seed: int, n: int, dtype=np.float64):
    """n standard-normal (m, z) samples drawn sequentially from one rng."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        m = rng.standard_normal((cfg.s, cfg.r, cfg.c_m)).astype(dtype)
        z = rng.standard_normal((cfg.r, cfg.r, cfg.c_z)).astype(dtype)
        out.append((m, z))
    return out


def _store_dtype(store: ParamStore):
    for _, arr in store.items():
        return arr.dtype
    return np.dtype(np.float64)


def _loss_nodes(m_t: T.Tensor, z_t: T.Tensor) -> T.Tensor:
    return T.add(T.reduce_mean(T.mul(m_t, m_t)), T.reduce_mean(T.mul(z_t, z_t)))


def _full_step(cfg, P, graph, m_np, z_np, shard):
    """Forward and backward of the whole stack on one tape."""
    t0 = time.perf_counter()
    m_t = graph.leaf(m_np)
    z_t = graph.leaf(z_np)
    m_c, z_c = m_t, z_t
    for blk in range(cfg.n_blocks):
        m_c, z_c = evoformer_block(P, blk, m_c, z_c, cfg, shard)
    fwd_seconds = time.perf_counter() - t0
    loss = _loss_nodes(m_c, z_c)
    graph.backward(loss)
    return dict(m_out=m_c.data, z_out=z_c.data, loss=loss.data,
                dm=graph.grad(m_t), dz=graph.grad(z_t),
                fwd_seconds=fwd_seconds)


def _bp_msa_step(cfg, P, graph, world, rank, pair, m_np, z_np, shard, dtype):
    """MSA branch of the block-wise branch schedule.

    Forward per block: run the MSA track and the outer product mean, send
    the opm delta, receive the joined pair tensor as a fresh leaf.
    Backward per block: receive the joined tensor's gradient, seed it
    into the opm output, sweep this block's segment, then allreduce the
    two branches' partial input-pair gradients.
    """
    other = pair[1]
    zshape = (cfg.r, cfg.r, cfg.c_z)
    t0 = time.perf_counter()
    m_t = graph.leaf(m_np)
    z_cur = graph.leaf(z_np)
    z_inputs = [z_cur]
    o_list, segments = [], []
    m_cur = m_t
    for blk in range(cfg.n_blocks):
        start = graph.mark()
        m_cur = msa_track(P, blk, m_cur, z_cur, cfg, shard)
        o = opm(P, f"blk{blk}.opm", m_cur, cfg, shard)
        segments.append((start, graph.mark()))
        o_list.append(o)
        world.broadcast(pair, rank, rank, o.data, "fwd")
        z_cur = graph.leaf(
            world.broadcast(pair, rank, other, np.zeros(zshape, dtype), "fwd"))
        z_inputs.append(z_cur)
    fwd_seconds = time.perf_counter() - t0

    loss_start = graph.mark()
    loss_m = T.reduce_mean(T.mul(m_cur, m_cur))
    graph.seed(loss_m, np.asarray(1.0, dtype=dtype))
    graph.sweep(loss_start, graph.mark())

    for blk in reversed(range(cfg.n_blocks)):
        dz_joined = world.broadcast(pair, rank, other, np.zeros(zshape, dtype), "bwd")
        graph.seed(o_list[blk], dz_joined)
        graph.sweep(*segments[blk])
        part = graph.grad(z_inputs[blk])
        total = world.allreduce_sum(pair, rank, part, "bwd")
        graph.set_grad(z_inputs[blk], total)
    dm = graph.grad(m_t)
    world.broadcast(pair, rank, rank, dm, "bwd")
    return dict(m_out=m_cur.data, z_out=z_inputs[-1].data, loss_m=loss_m.data,
                dm=dm, dz=graph.grad(z_inputs[0]), fwd_seconds=fwd_seconds)


def _bp_pair_step(cfg, P, graph, world, rank, pair, z_np, shard, dtype):
    """Pair branch: triangle ops and the transition, joined with the
    received opm delta at each block end."""
    other = pair[0]
    mshape = (cfg.s, cfg.r, cfg.c_m)
    zshape = (cfg.r, cfg.r, cfg.c_z)
    t0 = time.perf_counter()
    z_cur = graph.leaf(z_np)
    z_inputs = [z_cur]
    joined, segments = [], []
    for blk in range(cfg.n_blocks):
        start = graph.mark()
        z_branch = pair_track(P, blk, z_cur, cfg, shard)
        o_leaf = graph.leaf(
            world.broadcast(pair, rank, other, np.zeros(zshape, dtype), "fwd"))
        z_cur = T.add(z_branch, o_leaf)
        segments.append((start, graph.mark()))
        joined.append(z_cur)
        z_inputs.append(z_cur)
        world.broadcast(pair, rank, rank, z_cur.data, "fwd")
    fwd_seconds = time.perf_counter() - t0

    loss_start = graph.mark()
    loss_z = T.reduce_mean(T.mul(z_cur, z_cur))
    graph.seed(loss_z, np.asarray(1.0, dtype=dtype))
    graph.sweep(loss_start, graph.mark())

    for blk in reversed(range(cfg.n_blocks)):
        dz_joined = graph.grad(joined[blk])
        world.broadcast(pair, rank, rank, dz_joined, "bwd")
        graph.sweep(*segments[blk])
        part = graph.grad(z_inputs[blk])
        total = world.allreduce_sum(pair, rank, part, "bwd")
        graph.set_grad(z_inputs[blk], total)
    world.broadcast(pair, rank, other, np.zeros(mshape, dtype), "bwd")
    return dict(z_out=z_cur.data, loss_z=loss_z.data,
                dz=graph.grad(z_inputs[0]), fwd_seconds=fwd_seconds)


def _sync_param_grads(store, P, graph, world, rank, layout, shard, dtype):
    """The three-stage parameter gradient synchronization."""
    my_branch = None
    if layout.bp == 2:
        my_branch = "msa" if layout.coords(rank)[1] == 0 else "pair"

    grads = {}
    for name in store.names():
        if my_branch is not None and store.branch(name) != my_branch:
            continue
        g_arr = graph.grad(P[name])
        if shard is not None and name not in shard.replicated:
            g_arr = world.allreduce_sum(shard.group, rank, g_arr, "param")
        grads[name] = g_arr

    if layout.bp == 2:
        pair = layout.bp_group(rank)
        for name in store.names():
            owner = pair[0] if store.branch(name) == "msa" else pair[1]
            payload = grads.get(name)
            if payload is None:
                payload = np.zeros(store[name].shape, dtype)
            grads[name] = world.broadcast(pair, rank, owner, payload, "param")

    if layout.dp > 1:
        group = layout.dp_group(rank)
        for name in store.names():
            total = world.allreduce_sum(group, rank, grads[name], "param")
            grads[name] = total / layout.dp
    return grads


def run_distributed(cfg: EvoConfig, store: ParamStore, layout: ParallelLayout,
                    seed: int = 32, max_threads: int | None = None) -> RunResult:
    """One training step under the given layout. Returns assembled
    results from the dp_idx=0 replica plus the full communication trace."""
    layout.validate_model(cfg)
    dtype = _store_dtype(store)
    samples = make_batch(cfg, seed, layout.dp, dtype)
    world = World(layout.world_size, max_threads=max_threads)

    def rank_main(rank, world):
        dp_i, bp_i, _ = layout.coords(rank)
        m_np, z_np = samples[dp_i]
        graph = T.Graph()
        P = store.bind(graph)
        shard = (DapContext(world, layout.dap_group(rank), rank, graph)
                 if layout.dap > 1 else None)
        if layout.bp == 1:
            payload = _full_step(cfg, P, graph, m_np, z_np, shard)
        elif bp_i == 0:
            payload = _bp_msa_step(cfg, P, graph, world, rank,
                                   layout.bp_group(rank), m_np, z_np, shard, dtype)
        else:
            payload = _bp_pair_step(cfg, P, graph, world, rank,
                                    layout.bp_group(rank), z_np, shard, dtype)
        payload["grads"] = _sync_param_grads(store, P, graph, world, rank,
                                             layout, shard, dtype)
        return payload

    t0 = time.perf_counter()
    payloads = world.run(rank_main)
    wall = time.perf_counter() - t0

    def replica_loss(dp_i):
        if layout.bp == 1:
            return payloads[layout.rank_of(dp_i, 0, 0)]["loss"]
        lm = payloads[layout.rank_of(dp_i, 0, 0)]["loss_m"]
        lz = payloads[layout.rank_of(dp_i, 1, 0)]["loss_z"]
        return np.add(lm, lz)

    loss = replica_loss(0)
    if layout.dp > 1:
        for dp_i in range(1, layout.dp):
            loss = loss + replica_loss(dp_i)
        loss = loss / layout.dp

    head = payloads[layout.rank_of(0, 0, 0)]
    z_src = head if layout.bp == 1 else payloads[layout.rank_of(0, 1, 0)]
    return RunResult(
        m_out=head["m_out"], z_out=head["z_out"], loss=float(loss),
        dm=head["dm"], dz=z_src["dz"] if layout.bp == 2 else head["dz"],
        grads=head["grads"], trace=world.trace,
        rank_fwd_seconds={r: p["fwd_seconds"] for r, p in enumerate(payloads)},
        wall_seconds=wall)


def run_single(cfg: EvoConfig, store: ParamStore, seed: int = 32) -> RunResult:
    """Reference step: one rank, no communicator, full monolithic tape."""
    dtype = _store_dtype(store)
    m_np, z_np = make_batch(cfg, seed, 1, dtype)[0]
    graph = T.Graph()
    P = store.bind(graph)
    payload = _full_step(cfg, P, graph, m_np, z_np, None)
    grads = {name: graph.grad(P[name]) for name in store.names()}
    return RunResult(
        m_out=payload["m_out"], z_out=payload["z_out"],
        loss=float(payload["loss"]), dm=payload["dm"], dz=payload["dz"],
        grads=grads, trace=None,
        rank_fwd_seconds={0: payload["fwd_seconds"]})


def run_bp(cfg, store, seed: int = 32, max_threads=None) -> RunResult:
    return run_distributed(cfg, store, ParallelLayout(bp=2), seed, max_threads)


def run_dap(cfg, store, dap: int, seed: int = 32, max_threads=None) -> RunResult:
    return run_distributed(cfg, store, ParallelLayout(dap=dap), seed, max_threads)


def run_dp(cfg, store, dp: int, seed: int = 32, max_threads=None) -> RunResult:
    return run_distributed(cfg, store, ParallelLayout(dp=dp), seed, max_threads)


# ---------------------------------------------------------------------------
# comparing runs
# ---------------------------------------------------------------------------

@dataclass
class FieldComparison:
    field: str
    max_abs: float
    max_rel: float
    bitwise: bool


@dataclass
class ComparisonReport:
    fields: dict
    rtol: float

    @property
    def max_rel(self) -> float:
        return max((f.max_rel for f in self.fields.values()), default=0.0)

    @property
    def bitwise(self) -> bool:
        return all(f.bitwise for f in self.fields.values())

    @property
    def passed(self) -> bool:
        if self.rtol == 0.0:
            return self.bitwise
        return self.max_rel <= self.rtol

    def __str__(self):
        lines = [f"{'field':<12} {'max_abs':>12} {'max_rel':>12} bitwise"]
        for f in self.fields.values():
            lines.append(f"{f.field:<12} {f.max_abs:>12.3e} {f.max_rel:>12.3e} "
                         f"{f.bitwise}")
        verdict = "pass" if self.passed else "FAIL"
        lines.append(f"-> {verdict} (rtol={self.rtol:g})")
        return "\n".join(lines)


def _rel_diff(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(diff.max()) if diff.size else 0.0, \
        float((diff / denom).max()) if diff.size else 0.0


def compare_runs(a: RunResult, b: RunResult, rtol: float = 0.0) -> ComparisonReport:
    """Field-by-field comparison. rtol=0 demands exact float equality."""
    if set(a.grads) != set(b.grads):
        missing = set(a.grads) ^ set(b.grads)
        raise ComparisonError(f"gradient key sets differ: {sorted(missing)[:5]}")
    fields = {}
    for name in ("loss", "m_out", "z_out", "dm", "dz"):
        xa, xb = getattr(a, name), getattr(b, name)
        if np.shape(xa) != np.shape(xb):
            raise ComparisonError(
                f"{name} shapes differ: {np.shape(xa)} vs {np.shape(xb)}")
        max_abs, max_rel = _rel_diff(xa, xb)
        fields[name] = FieldComparison(name, max_abs, max_rel,
                                       np.array_equal(xa, xb))
    worst_abs = worst_rel = 0.0
    bit = True
    for key in a.grads:
        if a.grads[key].shape != b.grads[key].shape:
            raise ComparisonError(f"grad {key!r} shapes differ")
        max_abs, max_rel = _rel_diff(a.grads[key], b.grads[key])
        worst_abs = max(worst_abs, max_abs)
        worst_rel = max(worst_rel, max_rel)
        bit = bit and np.array_equal(a.grads[key], b.grads[key])
    fields["grads"] = FieldComparison("grads", worst_abs, worst_rel, bit)
    return ComparisonReport(fields, rtol)


# ---------------------------------------------------------------------------
# expected communication volume
# ---------------------------------------------------------------------------

def _branch_param_elems(cfg: EvoConfig):
    """(msa elements, pair elements) per block, matching init_params."""
    c_m, c_z, hc, h = cfg.c_m, cfg.c_z, cfg.hc, cfg.h
    c, t = cfg.c_opm, cfg.t_factor
    row = 2 * c_m + 2 * c_z + 3 * c_m * hc + c_m * hc + hc + c_z * h \
        + hc * c_m + c_m
    col = 2 * c_m + 3 * c_m * hc + c_m * hc + hc + hc * c_m + c_m
    mtrans = 2 * c_m + c_m * t * c_m + t * c_m + t * c_m * c_m + c_m
    opm_e = 2 * c_m + 2 * (c_m * c + c) + c * c * c_z + c_z
    tri_mult = 2 * c_z + 4 * (c_z * c + c) + c_z * c_z + c_z + 2 * c \
        + c * c_z + c_z
    tri_attn = 2 * c_z + 3 * c_z * hc + c_z * h + c_z * hc + hc \
        + hc * c_z + c_z
    ptrans = 2 * c_z + c_z * t * c_z + t * c_z + t * c_z * c_z + c_z
    return row + col + mtrans + opm_e, 2 * tri_mult + 2 * tri_attn + ptrans

MSA_PARAM_TENSORS = 35
PAIR_PARAM_TENSORS = 58


def expected_comm_volume(cfg: EvoConfig, layout: ParallelLayout) -> dict:
    """Closed-form {(phase, kind): (count, elements)} for one step,
    aggregated over every group in the world."""
    K = cfg.n_blocks
    M = cfg.s * cfg.r * cfg.c_m
    Z = cfg.r * cfg.r * cfg.c_z
    O = cfg.r * cfg.r * cfg.c_opm
    B = cfg.r * cfg.r * cfg.h
    msa_elems, pair_elems = _branch_param_elems(cfg)
    msa_elems *= K
    pair_elems *= K

    out = {}

    def bump(phase, kind, count, elements):
        if count:
            c0, e0 = out.get((phase, kind), (0, 0))
            out[(phase, kind)] = (c0 + count, e0 + elements)

    if layout.bp == 2:
        g = layout.dp * layout.dap  # one branch pair per (dp_i, dap_i)
        bump("fwd", "broadcast", 2 * K * g, 2 * K * Z * g)
        bump("bwd", "broadcast", (K + 1) * g, (K * Z + M) * g)
        bump("bwd", "allreduce_sum", K * g, K * Z * g)
        n_tensors = (MSA_PARAM_TENSORS + PAIR_PARAM_TENSORS) * K
        bump("param", "broadcast", n_tensors * g, (msa_elems + pair_elems) * g)

    if layout.dap > 1:
        if layout.bp == 1:
            g = layout.dp
            bump("fwd", "allgather", 13 * K * g,
                 K * (3 * M + 5 * Z + 3 * O + 2 * B) * g)
            bump("fwd", "allreduce_sum", K * g, K * Z * g)
            bump("bwd", "allreduce_sum", 15 * K * g,
                 K * (4 * M + 6 * Z + 3 * O + 2 * B) * g)
            bump("param", "allreduce_sum", (93 - 1) * K * g,
                 (msa_elems + pair_elems - K * cfg.c_z) * g)
        else:
            g = layout.dp  # one msa dap group and one pair dap group per dp_i
            bump("fwd", "allgather", 3 * K * g, 3 * K * M * g)
            bump("fwd", "allreduce_sum", K * g, K * Z * g)
            bump("bwd", "allreduce_sum", 5 * K * g, K * (4 * M + Z) * g)
            bump("param", "allreduce_sum", (MSA_PARAM_TENSORS - 1) * K * g,
                 (msa_elems - K * cfg.c_z) * g)
            bump("fwd", "allgather", 10 * K * g,
                 K * (5 * Z + 3 * O + 2 * B) * g)
            bump("bwd", "allreduce_sum", 10 * K * g,
                 K * (5 * Z + 3 * O + 2 * B) * g)
            bump("param", "allreduce_sum", PAIR_PARAM_TENSORS * K * g,
                 pair_elems * g)

    if layout.dp > 1:
        g = layout.bp * layout.dap
        n_tensors = (MSA_PARAM_TENSORS + PAIR_PARAM_TENSORS) * K
        bump("param", "allreduce_sum", n_tensors * g,
             (msa_elems + pair_elems) * g)

    return out


def trace_volume(trace: CommTrace) -> dict:
    """Same shape as expected_comm_volume, read off a recorded trace."""
    out = {}
    for r in trace.records:
        c0, e0 = out.get((r.phase, r.kind), (0, 0))
        out[(r.phase, r.kind)] = (c0 + 1, e0 + r.elements)
    return out
