"""Two-track Evoformer blocks over an MSA tensor m[s,r,c_m] and a pair
tensor z[r,r,c_z].

Three block wirings are supported:

* ``af2``       - MSA track, then outer product mean, then pair track
                  (serial dependency within the block).
* ``multimer``  - outer product mean first; both tracks then read the
                  updated pair tensor.
* ``parallel``  - MSA track and pair track both read the block inputs;
                  the outer product mean of the updated MSA joins the
                  pair output at the block end. The two tracks have no
                  intra-block data dependency, which is what makes the
                  two-branch schedule in ``schedules`` possible.

Sub-ops follow the usual gated-attention / triangle formulations:
layer norm first in every sub-op, sigmoid gates whose projection biases
start at 1 (gates open), attention scaled by 1/sqrt(c_head).

Every sub-op accepts an optional ``shard`` context. When it is None the
op computes on the full tensors; a shard context restricts the computed
rows and routes produced pieces through collectives. The formulas appear
once either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError

VARIANTS = ("af2", "multimer", "parallel")

MSA_SUBOPS = ("row_attn", "col_attn", "msa_transition", "opm")
PAIR_SUBOPS = ("tri_mult_out", "tri_mult_in", "tri_attn_start", "tri_attn_end",
               "pair_transition")
SUBOPS = MSA_SUBOPS + PAIR_SUBOPS


@dataclass(frozen=True)
class EvoConfig:
    """Model dimensions. ``c_head`` is derived as ``c_m // h``."""

    s: int = 8
    r: int = 16
    c_m: int = 8
    c_z: int = 8
    h: int = 2
    c_opm: int = 32
    t_factor: int = 4
    n_blocks: int = 2
    variant: str = "parallel"
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("s", "r", "c_m", "c_z", "h", "c_opm", "t_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_blocks < 0:
            raise ConfigError(f"model.n_blocks must be >= 0, got {self.n_blocks}")
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.c_m % self.h != 0:
            raise ConfigError(
                f"model.h must divide model.c_m (got h={self.h}, c_m={self.c_m})")
        if self.eps <= 0:
            raise ConfigError(f"model.eps must be > 0, got {self.eps}")

    @property
    def c_head(self) -> int:
        return self.c_m // self.h

    @property
    def hc(self) -> int:
        return self.h * self.c_head


class ParamStore:
    """Ordered name -> array map with a branch tag per parameter.

    Branch tags split the parameters between the two tracks of a block:
    ``msa`` owns row/column attention, the MSA transition and the outer
    product mean; ``pair`` owns the triangle ops and the pair transition.
    """

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._branch: dict[str, str] = {}

    def add(self, name: str, array: np.ndarray, branch: str) -> None:
        if name in self._arrays:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._arrays[name] = array
        self._branch[name] = branch

    def names(self):
        return list(self._arrays.keys())

    def branch(self, name: str) -> str:
        return self._branch[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def total_size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def replace(self, name: str, array: np.ndarray) -> None:
        if array.shape != self._arrays[name].shape:
            raise ConfigError(
                f"replacement for {name!r} has shape {array.shape}, "
                f"expected {self._arrays[name].shape}")
        self._arrays[name] = array

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, arr in self._arrays.items():
            out.add(name, arr.copy(), self._branch[name])
        return out

    def bind(self, graph: T.Graph) -> dict[str, T.Tensor]:
        """Attach every parameter to ``graph`` as a leaf, in store order."""
        return {name: graph.leaf(arr) for name, arr in self._arrays.items()}


def _subop_param_specs(cfg: EvoConfig, subop: str):
    """(suffix, shape, kind) for each tensor of one sub-op.

    kind is one of weight / bias / gate_bias / ln_scale / ln_shift and
    selects the init rule.
    """
    c_m, c_z, hc, h = cfg.c_m, cfg.c_z, cfg.hc, cfg.h
    c, t = cfg.c_opm, cfg.t_factor
    if subop == "row_attn":
        return [("ln_g", (c_m,), "ln_scale"), ("ln_b", (c_m,), "ln_shift"),
                ("lnz_g", (c_z,), "ln_scale"), ("lnz_b", (c_z,), "ln_shift"),
                ("q_w", (c_m, hc), "weight"), ("k_w", (c_m, hc), "weight"),
                ("v_w", (c_m, hc), "weight"),
                ("gate_w", (c_m, hc), "weight"), ("gate_b", (hc,), "gate_bias"),
                ("bias_w", (c_z, h), "weight"),
                ("out_w", (hc, c_m), "weight"), ("out_b", (c_m,), "bias")]
    if subop == "col_attn":
        return [("ln_g", (c_m,), "ln_scale"), ("ln_b", (c_m,), "ln_shift"),
                ("q_w", (c_m, hc), "weight"), ("k_w", (c_m, hc), "weight"),
                ("v_w", (c_m, hc), "weight"),
                ("gate_w", (c_m, hc), "weight"), ("gate_b", (hc,), "gate_bias"),
                ("out_w", (hc, c_m), "weight"), ("out_b", (c_m,), "bias")]
    if subop == "msa_transition":
        return [("ln_g", (c_m,), "ln_scale"), ("ln_b", (c_m,), "ln_shift"),
                ("w1", (c_m, t * c_m), "weight"), ("b1", (t * c_m,), "bias"),
                ("w2", (t * c_m, c_m), "weight"), ("b2", (c_m,), "bias")]
    if subop == "opm":
        return [("ln_g", (c_m,), "ln_scale"), ("ln_b", (c_m,), "ln_shift"),
                ("a_w", (c_m, c), "weight"), ("a_b", (c,), "bias"),
                ("b_w", (c_m, c), "weight"), ("b_b", (c,), "bias"),
                ("out_w", (c * c, c_z), "weight"), ("out_b", (c_z,), "bias")]
    if subop in ("tri_mult_out", "tri_mult_in"):
        return [("ln_g", (c_z,), "ln_scale"), ("ln_b", (c_z,), "ln_shift"),
                ("a_gate_w", (c_z, c), "weight"), ("a_gate_b", (c,), "gate_bias"),
                ("a_w", (c_z, c), "weight"), ("a_b", (c,), "bias"),
                ("b_gate_w", (c_z, c), "weight"), ("b_gate_b", (c,), "gate_bias"),
                ("b_w", (c_z, c), "weight"), ("b_b", (c,), "bias"),
                ("out_gate_w", (c_z, c_z), "weight"), ("out_gate_b", (c_z,), "gate_bias"),
                ("p_ln_g", (c,), "ln_scale"), ("p_ln_b", (c,), "ln_shift"),
                ("out_w", (c, c_z), "weight"), ("out_b", (c_z,), "bias")]
    if subop in ("tri_attn_start", "tri_attn_end"):
        return [("ln_g", (c_z,), "ln_scale"), ("ln_b", (c_z,), "ln_shift"),
                ("q_w", (c_z, hc), "weight"), ("k_w", (c_z, hc), "weight"),
                ("v_w", (c_z, hc), "weight"),
                ("bias_w", (c_z, h), "weight"),
                ("gate_w", (c_z, hc), "weight"), ("gate_b", (hc,), "gate_bias"),
                ("out_w", (hc, c_z), "weight"), ("out_b", (c_z,), "bias")]
    if subop == "pair_transition":
        return [("ln_g", (c_z,), "ln_scale"), ("ln_b", (c_z,), "ln_shift"),
                ("w1", (c_z, t * c_z), "weight"), ("b1", (t * c_z,), "bias"),
                ("w2", (t * c_z, c_z), "weight"), ("b2", (c_z,), "bias")]
    raise ConfigError(f"unknown sub-op {subop!r}")


def init_params(cfg: EvoConfig, seed: int, dtype=np.float64) -> ParamStore:
    """Seeded parameter store.

    Projection weights draw from uniform(-0.02, 0.02) in a fixed insertion
    order; plain biases start at zero, gate-projection biases at one (so
    all gates start open), layer-norm scales at one and shifts at zero.
    The same seed therefore reproduces bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for b in range(cfg.n_blocks):
        for subop in SUBOPS:
            branch = "msa" if subop in MSA_SUBOPS else "pair"
            for suffix, shape, kind in _subop_param_specs(cfg, subop):
                if kind == "weight":
                    arr = rng.uniform(-0.02, 0.02, size=shape)
                elif kind == "bias":
                    arr = np.zeros(shape)
                elif kind == "gate_bias":
                    arr = np.ones(shape)
                elif kind == "ln_scale":
                    arr = np.ones(shape)
                else:  # ln_shift
                    arr = np.zeros(shape)
                store.add(f"blk{b}.{subop}.{suffix}", arr.astype(dtype), branch)
    return store


def param_count(cfg: EvoConfig) -> int:
    """Closed-form total parameter count (all blocks)."""
    c_m, c_z, hc, h = cfg.c_m, cfg.c_z, cfg.hc, cfg.h
    c, t = cfg.c_opm, cfg.t_factor
    row = 2 * c_m + 2 * c_z + 3 * c_m * hc + c_m * hc + hc + c_z * h \
        + hc * c_m + c_m
    col = 2 * c_m + 3 * c_m * hc + c_m * hc + hc + hc * c_m + c_m
    mtrans = 2 * c_m + c_m * t * c_m + t * c_m + t * c_m * c_m + c_m
    opm = 2 * c_m + 2 * (c_m * c + c) + c * c * c_z + c_z
    tri_mult = 2 * c_z + 4 * (c_z * c + c) + c_z * c_z + c_z + 2 * c \
        + c * c_z + c_z
    tri_attn = 2 * c_z + 3 * c_z * hc + c_z * h + c_z * hc + hc \
        + hc * c_z + c_z
    ptrans = 2 * c_z + c_z * t * c_z + t * c_z + t * c_z * c_z + c_z
    per_block = row + col + mtrans + opm + 2 * tri_mult + 2 * tri_attn + ptrans
    return cfg.n_blocks * per_block


# ---------------------------------------------------------------------------
# sub-ops
#
# P is a dict of bound leaf tensors (ParamStore.bind), px the sub-op prefix
# such as "blk0.row_attn". shard is None or a context with:
#   bounds(n) -> (lo, hi)   rows of an axis this rank computes
#   enter(t) -> Tensor      mark t as consumed by shard-local compute
#   gather(t, axis) -> Tensor   allgather shards into the full tensor
#   reduce_sum(t) -> Tensor     sum partial contributions across ranks
#   mark_replicated(name)       param whose gradient needs no completion
# ---------------------------------------------------------------------------

def _shard_rows(x: T.Tensor, shard, axis: int = 0) -> T.Tensor:
    if shard is None:
        return x
    lo, hi = shard.bounds(x.shape[axis])
    return T.slice_axis(shard.enter(x), axis, lo, hi)


def _ln(x, P, px, name, cfg):
    return T.layer_norm(x, P[f"{px}.{name}_g"], P[f"{px}.{name}_b"], cfg.eps)


def _heads(x: T.Tensor, h: int, c_head: int) -> T.Tensor:
    """[B, L, h*c] -> [B, h, L, c]"""
    b, l = x.shape[0], x.shape[1]
    return T.permute(T.reshape(x, (b, l, h, c_head)), (0, 2, 1, 3))


def _gated_attention(P, px, xh, bias, cfg) -> T.Tensor:
    """Gated dot-product attention over the middle axis.

    xh: normalized input [B, L, c_in]; bias: [h, L, L] or None, added to
    the logits and broadcast over B. Returns [B, L, c_out].
    """
    h, c_head = cfg.h, cfg.c_head
    q = _heads(T.linear(xh, P[f"{px}.q_w"]), h, c_head)
    k = _heads(T.linear(xh, P[f"{px}.k_w"]), h, c_head)
    v = _heads(T.linear(xh, P[f"{px}.v_w"]), h, c_head)
    logits = T.matmul(T.scale(q, c_head ** -0.5), T.permute(k, (0, 1, 3, 2)))
    if bias is not None:
        logits = T.add(logits, bias)
    att = T.softmax(logits, axis=-1)
    ctxv = T.matmul(att, v)  # [B, h, L, c]
    b, l = xh.shape[0], xh.shape[1]
    merged = T.reshape(T.permute(ctxv, (0, 2, 1, 3)), (b, l, cfg.hc))
    gate = T.sigmoid(T.linear(xh, P[f"{px}.gate_w"], P[f"{px}.gate_b"]))
    return T.linear(T.mul(gate, merged), P[f"{px}.out_w"], P[f"{px}.out_b"])


def row_attn(P, px, m, z, cfg, shard=None) -> T.Tensor:
    """MSA row attention with additive pair bias. Shards the s axis."""
    m_in = _shard_rows(m, shard, 0)
    mh = _ln(m_in, P, px, "ln", cfg)
    z_in = shard.enter(z) if shard is not None else z
    zh = T.layer_norm(z_in, P[f"{px}.lnz_g"], P[f"{px}.lnz_b"], cfg.eps)
    bias = T.permute(T.linear(zh, P[f"{px}.bias_w"]), (2, 0, 1))  # [h, r, r]
    delta = _gated_attention(P, px, mh, bias, cfg)
    return shard.gather(delta, 0) if shard is not None else delta


def col_attn(P, px, m, cfg, shard=None) -> T.Tensor:
    """MSA column attention (row attention on swapped axes, no bias).

    Shards the r axis.
    """
    mp = T.permute(m, (1, 0, 2))  # [r, s, c_m]
    m_in = _shard_rows(mp, shard, 0)
    mh = _ln(m_in, P, px, "ln", cfg)
    delta = _gated_attention(P, px, mh, None, cfg)
    if shard is not None:
        delta = shard.gather(delta, 0)
    return T.permute(delta, (1, 0, 2))


def _transition(P, px, x, cfg, shard) -> T.Tensor:
    x_in = _shard_rows(x, shard, 0)
    xh = _ln(x_in, P, px, "ln", cfg)
    hidden = T.relu(T.linear(xh, P[f"{px}.w1"], P[f"{px}.b1"]))
    delta = T.linear(hidden, P[f"{px}.w2"], P[f"{px}.b2"])
    return shard.gather(delta, 0) if shard is not None else delta


def msa_transition(P, px, m, cfg, shard=None) -> T.Tensor:
    """Position-wise two-layer MLP on the MSA track. Shards the s axis."""
    return _transition(P, px, m, cfg, shard)


def pair_transition(P, px, z, cfg, shard=None) -> T.Tensor:
    """Position-wise two-layer MLP on the pair track. Shards the first r axis."""
    return _transition(P, px, z, cfg, shard)


def opm(P, px, m, cfg, shard=None) -> T.Tensor:
    """Outer product mean: mean over s of per-column outer products.

    o(i,j) = mean_s a(s,i) (x) b(s,j), flattened over the c_opm x c_opm
    channel pairs, then projected to c_z. Under sharding each rank sums
    its s rows, the projected partial sums are allreduced, the total is
    divided by s and the output bias applied once.
    """
    s = m.shape[0]
    m_in = _shard_rows(m, shard, 0)
    mh = _ln(m_in, P, px, "ln", cfg)
    a = T.linear(mh, P[f"{px}.a_w"], P[f"{px}.a_b"])  # [s', r, c]
    b = T.linear(mh, P[f"{px}.b_w"], P[f"{px}.b_b"])
    s_own, r, c = a.shape
    a2 = T.reshape(a, (s_own, r * c))
    b2 = T.reshape(b, (s_own, r * c))
    raw = T.matmul(T.permute(a2, (1, 0)), b2)          # [(i,p), (j,q)] sums
    o = T.reshape(T.permute(T.reshape(raw, (r, c, r, c)), (0, 2, 1, 3)),
                  (r, r, c * c))
    if shard is None:
        return T.linear(T.scale(o, 1.0 / s), P[f"{px}.out_w"], P[f"{px}.out_b"])
    part = T.linear(o, P[f"{px}.out_w"])
    total = shard.reduce_sum(part)
    shard.mark_replicated(f"{px}.out_b")
    return T.add(T.scale(total, 1.0 / s), P[f"{px}.out_b"])


def tri_mult(P, px, z, cfg, incoming: bool, shard=None) -> T.Tensor:
    """Triangle multiplicative update.

    outgoing: p(i,j) = sum_k a(i,k) * b(j,k)
    incoming: p(i,j) = sum_k a(k,i) * b(k,j)
    with a, b sigmoid-gated projections of the normalized pair tensor and
    the result normalized, projected and gated again. Shards the first r
    axis of the output; the partner projections it cannot compute locally
    are allgathered.
    """
    z_in = _shard_rows(z, shard, 0)
    zh = _ln(z_in, P, px, "ln", cfg)

    def gated_proj(tag):
        gate = T.sigmoid(T.linear(zh, P[f"{px}.{tag}_gate_w"], P[f"{px}.{tag}_gate_b"]))
        return T.mul(gate, T.linear(zh, P[f"{px}.{tag}_w"], P[f"{px}.{tag}_b"]))

    a = gated_proj("a")
    b = gated_proj("b")
    if not incoming:
        if shard is not None:
            b = shard.enter(shard.gather(b, 0))
        ac = T.permute(a, (2, 0, 1))                   # [c, i, k]
        bc = T.permute(b, (2, 1, 0))                   # [c, k, j]
        p = T.permute(T.matmul(ac, bc), (1, 2, 0))     # [i, j, c]
    else:
        if shard is not None:
            a = shard.enter(shard.gather(a, 0))
            b = shard.enter(shard.gather(b, 0))
            lo, hi = shard.bounds(z.shape[0])
            a = T.slice_axis(a, 1, lo, hi)             # columns i this rank owns
        ac = T.permute(a, (2, 1, 0))                   # [c, i, k]
        bc = T.permute(b, (2, 0, 1))                   # [c, k, j]
        p = T.permute(T.matmul(ac, bc), (1, 2, 0))
    pn = T.layer_norm(p, P[f"{px}.p_ln_g"], P[f"{px}.p_ln_b"], cfg.eps)
    out = T.linear(pn, P[f"{px}.out_w"], P[f"{px}.out_b"])
    gate = T.sigmoid(T.linear(zh, P[f"{px}.out_gate_w"], P[f"{px}.out_gate_b"]))
    delta = T.mul(gate, out)
    return shard.gather(delta, 0) if shard is not None else delta


def _tri_attn_rows(P, px, z, cfg, shard) -> T.Tensor:
    """Attention within each pair row; logits biased by a projection of
    the normalized pair tensor. Shards the attended-row axis."""
    z_in = _shard_rows(z, shard, 0)
    zh = _ln(z_in, P, px, "ln", cfg)
    bias_rows = T.linear(zh, P[f"{px}.bias_w"])        # [i', k, h]
    if shard is not None:
        bias_rows = shard.enter(shard.gather(bias_rows, 0))
    bias = T.permute(bias_rows, (2, 0, 1))             # [h, j, k]
    delta = _gated_attention(P, px, zh, bias, cfg)
    return shard.gather(delta, 0) if shard is not None else delta


def tri_attn(P, px, z, cfg, ending: bool, shard=None) -> T.Tensor:
    """Triangle attention. Start mode attends within rows; end mode is
    start mode on the transposed pair tensor, transposed back."""
    if not ending:
        return _tri_attn_rows(P, px, z, cfg, shard)
    zt = T.permute(z, (1, 0, 2))
    delta = _tri_attn_rows(P, px, zt, cfg, shard)
    return T.permute(delta, (1, 0, 2))


# ---------------------------------------------------------------------------
# tracks, blocks and the stack
# ---------------------------------------------------------------------------

def msa_track(P, blk: int, m, z, cfg, shard=None) -> T.Tensor:
    """Row attention, column attention and the MSA transition, residually."""
    m = T.add(m, row_attn(P, f"blk{blk}.row_attn", m, z, cfg, shard))
    m = T.add(m, col_attn(P, f"blk{blk}.col_attn", m, cfg, shard))
    m = T.add(m, msa_transition(P, f"blk{blk}.msa_transition", m, cfg, shard))
    return m


def pair_track(P, blk: int, z, cfg, shard=None) -> T.Tensor:
    """Both triangle multiplications, both triangle attentions and the
    pair transition, residually."""
    z = T.add(z, tri_mult(P, f"blk{blk}.tri_mult_out", z, cfg, False, shard))
    z = T.add(z, tri_mult(P, f"blk{blk}.tri_mult_in", z, cfg, True, shard))
    z = T.add(z, tri_attn(P, f"blk{blk}.tri_attn_start", z, cfg, False, shard))
    z = T.add(z, tri_attn(P, f"blk{blk}.tri_attn_end", z, cfg, True, shard))
    z = T.add(z, pair_transition(P, f"blk{blk}.pair_transition", z, cfg, shard))
    return z


def evoformer_block(P, blk: int, m, z, cfg, shard=None):
    """One block in the configured wiring. Returns (m_out, z_out)."""
    if cfg.variant == "af2":
        m = msa_track(P, blk, m, z, cfg, shard)
        z = T.add(z, opm(P, f"blk{blk}.opm", m, cfg, shard))
        z = pair_track(P, blk, z, cfg, shard)
    elif cfg.variant == "multimer":
        z = T.add(z, opm(P, f"blk{blk}.opm", m, cfg, shard))
        m = msa_track(P, blk, m, z, cfg, shard)
        z = pair_track(P, blk, z, cfg, shard)
    else:  # parallel: both tracks read the block inputs
        m_new = msa_track(P, blk, m, z, cfg, shard)
        z_pair = pair_track(P, blk, z, cfg, shard)
        o = opm(P, f"blk{blk}.opm", m_new, cfg, shard)
        m, z = m_new, T.add(z_pair, o)
    return m, z


def evoformer_stack(P, m, z, cfg, shard=None):
    for blk in range(cfg.n_blocks):
        m, z = evoformer_block(P, blk, m, z, cfg, shard)
    return m, z


def seeded_inputs(cfg: EvoConfig, seed: int, dtype=np.float64):
    """Deterministic standard-normal m and z for the given dims."""
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((cfg.s, cfg.r, cfg.c_m)).astype(dtype)
    z = rng.standard_normal((cfg.r, cfg.r, cfg.c_z)).astype(dtype)
    return m, z
