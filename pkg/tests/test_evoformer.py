import numpy as np
import pytest

from branchpar import tensor as T
from branchpar.errors import ConfigError
from branchpar.evoformer import (
    EvoConfig, MSA_SUBOPS, PAIR_SUBOPS, SUBOPS,
    col_attn, evoformer_block, evoformer_stack, init_params, msa_transition,
    opm, pair_transition, param_count, row_attn, seeded_inputs, tri_attn,
    tri_mult,
)


def toy_cfg(**kw):
    base = dict(s=3, r=4, c_m=4, c_z=4, h=2, c_opm=3, t_factor=2,
                n_blocks=1, variant="parallel")
    base.update(kw)
    return EvoConfig(**base)


# ---------------------------------------------------------------------------
# numpy oracles
# ---------------------------------------------------------------------------

def ln_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def sigmoid_np(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attn_np(xh, bias, W, px, h, c_head):
    bsz, l, _ = xh.shape

    def heads(y):
        return y.reshape(bsz, l, h, c_head).transpose(0, 2, 1, 3)

    q = heads(xh @ W[f"{px}.q_w"]) * c_head ** -0.5
    k = heads(xh @ W[f"{px}.k_w"])
    v = heads(xh @ W[f"{px}.v_w"])
    logits = q @ k.transpose(0, 1, 3, 2)
    if bias is not None:
        logits = logits + bias
    att = softmax_np(logits)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, l, h * c_head)
    gate = sigmoid_np(xh @ W[f"{px}.gate_w"] + W[f"{px}.gate_b"])
    return (gate * o) @ W[f"{px}.out_w"] + W[f"{px}.out_b"]


def tri_mult_np(W, px, z, incoming, eps=1e-5):
    zh = ln_np(z, W[f"{px}.ln_g"], W[f"{px}.ln_b"], eps)

    def gated(tag):
        gate = sigmoid_np(zh @ W[f"{px}.{tag}_gate_w"] + W[f"{px}.{tag}_gate_b"])
        return gate * (zh @ W[f"{px}.{tag}_w"] + W[f"{px}.{tag}_b"])

    a, b = gated("a"), gated("b")
    if incoming:
        p = np.einsum("kic,kjc->ijc", a, b)
    else:
        p = np.einsum("ikc,jkc->ijc", a, b)
    pn = ln_np(p, W[f"{px}.p_ln_g"], W[f"{px}.p_ln_b"], eps)
    gate = sigmoid_np(zh @ W[f"{px}.out_gate_w"] + W[f"{px}.out_gate_b"])
    return gate * (pn @ W[f"{px}.out_w"] + W[f"{px}.out_b"])


def run_subop(subop, P, cfg, m, z):
    px = f"blk0.{subop}"
    if subop == "row_attn":
        return row_attn(P, px, m, z, cfg)
    if subop == "col_attn":
        return col_attn(P, px, m, cfg)
    if subop == "msa_transition":
        return msa_transition(P, px, m, cfg)
    if subop == "opm":
        return opm(P, px, m, cfg)
    if subop == "tri_mult_out":
        return tri_mult(P, px, z, cfg, incoming=False)
    if subop == "tri_mult_in":
        return tri_mult(P, px, z, cfg, incoming=True)
    if subop == "tri_attn_start":
        return tri_attn(P, px, z, cfg, ending=False)
    if subop == "tri_attn_end":
        return tri_attn(P, px, z, cfg, ending=True)
    return pair_transition(P, px, z, cfg)


def bound(cfg, seed=32):
    store = init_params(cfg, seed)
    g = T.Graph()
    P = store.bind(g)
    m, z = seeded_inputs(cfg, seed + 1)
    return store, g, P, g.leaf(m), g.leaf(z)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

def test_init_rules():
    cfg = toy_cfg(n_blocks=2)
    store = init_params(cfg, seed=32)
    for name, arr in store.items():
        leafname = name.rsplit(".", 1)[1]
        if leafname.endswith("gate_b"):
            assert np.array_equal(arr, np.ones_like(arr)), name
        elif leafname.endswith("_g") and "ln" in leafname:
            assert np.array_equal(arr, np.ones_like(arr)), name
        elif leafname.endswith("_w"):
            assert arr.ndim == 2 and np.abs(arr).max() <= 0.02, name
        elif leafname in ("w1", "w2"):
            assert np.abs(arr).max() <= 0.02, name
        else:
            assert np.array_equal(arr, np.zeros_like(arr)), name


def test_init_reproducible_and_branch_tags():
    cfg = toy_cfg(n_blocks=2)
    s1 = init_params(cfg, seed=7)
    s2 = init_params(cfg, seed=7)
    assert s1.names() == s2.names()
    for name, arr in s1.items():
        assert np.array_equal(arr, s2[name])
        subop = name.split(".")[1]
        want = "msa" if subop in MSA_SUBOPS else "pair"
        assert s1.branch(name) == want
    assert any(not np.array_equal(arr, init_params(cfg, seed=8)[name])
               for name, arr in s1.items() if name.endswith("q_w"))


@pytest.mark.parametrize("cfg", [
    toy_cfg(),
    toy_cfg(s=5, r=6, c_m=6, c_z=5, h=3, c_opm=4, t_factor=3, n_blocks=3),
    EvoConfig(s=8, r=16, c_m=8, c_z=8, h=2, c_opm=4, n_blocks=2),
])
def test_param_count_formula(cfg):
    store = init_params(cfg, seed=0)
    assert param_count(cfg) == store.total_size()
    assert len(store) == 93 * cfg.n_blocks


def test_config_validation():
    with pytest.raises(ConfigError):
        toy_cfg(h=3)  # must divide c_m
    with pytest.raises(ConfigError):
        toy_cfg(variant="serial")
    with pytest.raises(ConfigError):
        toy_cfg(s=0)


# ---------------------------------------------------------------------------
# sub-op oracles
# ---------------------------------------------------------------------------

def test_row_attn_matches_oracle():
    cfg = toy_cfg()
    store, g, P, m, z = bound(cfg)
    W = dict(store.items())
    out = row_attn(P, "blk0.row_attn", m, z, cfg)
    mh = ln_np(m.data, W["blk0.row_attn.ln_g"], W["blk0.row_attn.ln_b"])
    zh = ln_np(z.data, W["blk0.row_attn.lnz_g"], W["blk0.row_attn.lnz_b"])
    bias = (zh @ W["blk0.row_attn.bias_w"]).transpose(2, 0, 1)
    want = attn_np(mh, bias, W, "blk0.row_attn", cfg.h, cfg.c_head)
    np.testing.assert_allclose(out.data, want, rtol=1e-12, atol=1e-13)


def test_col_attn_matches_oracle():
    cfg = toy_cfg()
    store, g, P, m, z = bound(cfg)
    W = dict(store.items())
    out = col_attn(P, "blk0.col_attn", m, cfg)
    mp = m.data.transpose(1, 0, 2)
    mh = ln_np(mp, W["blk0.col_attn.ln_g"], W["blk0.col_attn.ln_b"])
    want = attn_np(mh, None, W, "blk0.col_attn", cfg.h, cfg.c_head)
    np.testing.assert_allclose(out.data, want.transpose(1, 0, 2),
                               rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("ending", [False, True])
def test_tri_attn_matches_oracle(ending):
    cfg = toy_cfg()
    store, g, P, m, z = bound(cfg)
    W = dict(store.items())
    px = "blk0.tri_attn_end" if ending else "blk0.tri_attn_start"
    out = tri_attn(P, px, z, cfg, ending=ending)
    zd = z.data.transpose(1, 0, 2) if ending else z.data
    zh = ln_np(zd, W[f"{px}.ln_g"], W[f"{px}.ln_b"])
    bias = (zh @ W[f"{px}.bias_w"]).transpose(2, 0, 1)
    want = attn_np(zh, bias, W, px, cfg.h, cfg.c_head)
    if ending:
        want = want.transpose(1, 0, 2)
    np.testing.assert_allclose(out.data, want, rtol=1e-12, atol=1e-13)


def test_opm_matches_einsum_oracle():
    cfg = toy_cfg()
    store, g, P, m, z = bound(cfg)
    W = dict(store.items())
    out = opm(P, "blk0.opm", m, cfg)
    mh = ln_np(m.data, W["blk0.opm.ln_g"], W["blk0.opm.ln_b"])
    a = mh @ W["blk0.opm.a_w"] + W["blk0.opm.a_b"]
    b = mh @ W["blk0.opm.b_w"] + W["blk0.opm.b_b"]
    o = np.einsum("sip,sjq->ijpq", a, b) / cfg.s
    want = o.reshape(cfg.r, cfg.r, cfg.c_opm ** 2) @ W["blk0.opm.out_w"] \
        + W["blk0.opm.out_b"]
    np.testing.assert_allclose(out.data, want, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("incoming", [False, True])
def test_tri_mult_matches_einsum_oracle(incoming):
    cfg = toy_cfg()
    store, g, P, m, z = bound(cfg)
    W = dict(store.items())
    px = "blk0.tri_mult_in" if incoming else "blk0.tri_mult_out"
    out = tri_mult(P, px, z, cfg, incoming=incoming)
    want = tri_mult_np(W, px, z.data, incoming)
    np.testing.assert_allclose(out.data, want, rtol=1e-12, atol=1e-13)


def test_transition_matches_oracle():
    cfg = toy_cfg()
    store, g, P, m, z = bound(cfg)
    W = dict(store.items())
    out = pair_transition(P, "blk0.pair_transition", z, cfg)
    zh = ln_np(z.data, W["blk0.pair_transition.ln_g"], W["blk0.pair_transition.ln_b"])
    hid = np.maximum(zh @ W["blk0.pair_transition.w1"] + W["blk0.pair_transition.b1"], 0.0)
    want = hid @ W["blk0.pair_transition.w2"] + W["blk0.pair_transition.b2"]
    np.testing.assert_allclose(out.data, want, rtol=1e-12, atol=1e-13)


# ---------------------------------------------------------------------------
# structural properties
# ---------------------------------------------------------------------------

def test_uniform_attention_is_key_mean():
    # zero q/k projections and zero pair bias give uniform weights, so the
    # attended value is the mean over keys
    cfg = toy_cfg()
    store = init_params(cfg, seed=3)
    for name in ("q_w", "k_w", "bias_w"):
        store.replace(f"blk0.row_attn.{name}",
                      np.zeros_like(store[f"blk0.row_attn.{name}"]))
    g = T.Graph()
    P = store.bind(g)
    m, z = seeded_inputs(cfg, 11)
    out = row_attn(P, "blk0.row_attn", g.leaf(m), g.leaf(z), cfg)
    W = dict(store.items())
    mh = ln_np(m, W["blk0.row_attn.ln_g"], W["blk0.row_attn.ln_b"])
    v = mh @ W["blk0.row_attn.v_w"]
    o = np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape)
    gate = sigmoid_np(mh @ W["blk0.row_attn.gate_w"] + W["blk0.row_attn.gate_b"])
    want = (gate * o) @ W["blk0.row_attn.out_w"] + W["blk0.row_attn.out_b"]
    np.testing.assert_allclose(out.data, want, rtol=1e-12, atol=1e-13)


def test_single_key_attention_passes_value_through():
    cfg = toy_cfg(r=1)
    store, g, P, m, z = bound(cfg)
    W = dict(store.items())
    out = row_attn(P, "blk0.row_attn", m, z, cfg)
    mh = ln_np(m.data, W["blk0.row_attn.ln_g"], W["blk0.row_attn.ln_b"])
    v = mh @ W["blk0.row_attn.v_w"]
    gate = sigmoid_np(mh @ W["blk0.row_attn.gate_w"] + W["blk0.row_attn.gate_b"])
    want = (gate * v) @ W["blk0.row_attn.out_w"] + W["blk0.row_attn.out_b"]
    np.testing.assert_allclose(out.data, want, rtol=1e-12, atol=1e-13)


def test_tri_mult_transpose_identity_crossed_params():
    # incoming(z) equals outgoing(z^T)^T once the a and b projections are
    # swapped; everything else (ln, gates, output head) shared
    cfg = toy_cfg()
    store = init_params(cfg, seed=5)
    g = T.Graph()
    P = store.bind(g)
    crossed = {}
    for name, t in P.items():
        if not name.startswith("blk0.tri_mult_in."):
            continue
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("a_"):
            other = leaf.replace("a_", "b_", 1)
        elif leaf.startswith("b_"):
            other = leaf.replace("b_", "a_", 1)
        else:
            other = leaf
        crossed[f"blk0.tri_mult_in.{other}"] = t
    m, z = seeded_inputs(cfg, 13)
    z_t = g.leaf(z)
    got_in = tri_mult(P, "blk0.tri_mult_in", z_t, cfg, incoming=True)
    zt = T.permute(z_t, (1, 0, 2))
    got_out = tri_mult(crossed, "blk0.tri_mult_in", zt, cfg, incoming=False)
    np.testing.assert_allclose(got_in.data, got_out.data.transpose(1, 0, 2),
                               rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("variant", ["af2", "multimer", "parallel"])
def test_zeroed_output_projections_make_block_identity(variant):
    cfg = toy_cfg(variant=variant, n_blocks=2)
    store = init_params(cfg, seed=9)
    for name in store.names():
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("out_w", "out_b", "w2", "b2"):
            store.replace(name, np.zeros_like(store[name]))
    g = T.Graph()
    P = store.bind(g)
    m, z = seeded_inputs(cfg, 17)
    m_out, z_out = evoformer_stack(P, g.leaf(m), g.leaf(z), cfg)
    assert np.array_equal(m_out.data, m)
    assert np.array_equal(z_out.data, z)


def test_variant_wirings_differ_where_expected():
    m_outs, z_outs = {}, {}
    for variant in ("af2", "multimer", "parallel"):
        cfg = toy_cfg(variant=variant)
        store = init_params(cfg, seed=21)
        g = T.Graph()
        P = store.bind(g)
        m, z = seeded_inputs(cfg, 23)
        mo, zo = evoformer_block(P, 0, g.leaf(m), g.leaf(z), cfg)
        m_outs[variant], z_outs[variant] = mo.data, zo.data
    # af2 and parallel MSA tracks read the same inputs
    assert np.array_equal(m_outs["af2"], m_outs["parallel"])
    # multimer updates the pair tensor before the MSA track reads it
    assert np.abs(m_outs["multimer"] - m_outs["af2"]).max() > 0
    # the pair track input differs between af2 (after opm) and parallel
    assert np.abs(z_outs["af2"] - z_outs["parallel"]).max() > 0


def test_parallel_tracks_are_independent_without_bias():
    # with the pair-to-MSA bias projection zeroed, the parallel variant's
    # MSA output cannot depend on z at all
    cfg = toy_cfg()
    store = init_params(cfg, seed=25)
    store.replace("blk0.row_attn.bias_w",
                  np.zeros_like(store["blk0.row_attn.bias_w"]))
    m, z = seeded_inputs(cfg, 27)

    g = T.Graph()
    P = store.bind(g)
    m_t, z_t = g.leaf(m), g.leaf(z)
    m_out, _ = evoformer_block(P, 0, m_t, z_t, cfg)
    loss = T.reduce_mean(T.mul(m_out, m_out))
    g.backward(loss)
    assert np.array_equal(g.grad(z_t), np.zeros_like(z))

    g2 = T.Graph()
    P2 = store.bind(g2)
    m_out2, _ = evoformer_block(P2, 0, g2.leaf(m), g2.leaf(z + 3.0), cfg)
    assert np.array_equal(m_out.data, m_out2.data)


def test_residue_permutation_equivariance():
    cfg = toy_cfg(r=6)
    store = init_params(cfg, seed=31)
    m, z = seeded_inputs(cfg, 33)
    rng = np.random.default_rng(35)
    perm = rng.permutation(cfg.r)

    def run(mi, zi):
        g = T.Graph()
        P = store.bind(g)
        mo, zo = evoformer_block(P, 0, g.leaf(mi), g.leaf(zi), cfg)
        return mo.data, zo.data

    mo, zo = run(m, z)
    mo_p, zo_p = run(m[:, perm, :], z[perm][:, perm])
    np.testing.assert_allclose(mo_p, mo[:, perm, :], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(zo_p, zo[perm][:, perm], rtol=1e-12, atol=1e-12)


def test_msa_row_permutation():
    cfg = toy_cfg(s=5)
    store = init_params(cfg, seed=41)
    m, z = seeded_inputs(cfg, 43)
    perm = np.random.default_rng(45).permutation(cfg.s)

    def run(mi):
        g = T.Graph()
        P = store.bind(g)
        mo, zo = evoformer_block(P, 0, g.leaf(mi), g.leaf(z), cfg)
        return mo.data, zo.data

    mo, zo = run(m)
    mo_p, zo_p = run(m[perm])
    np.testing.assert_allclose(mo_p, mo[perm], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(zo_p, zo, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("subop", SUBOPS)
def test_subop_gradients(subop):
    cfg = toy_cfg(s=2, r=3, c_m=4, c_z=4, h=2, c_opm=2, t_factor=2)
    store = init_params(cfg, seed=51)
    names = [n for n in store.names() if n.split(".")[1] == subop]
    arrays = [store[n] for n in names]
    m, z = seeded_inputs(cfg, 53)
    needs_m = subop in MSA_SUBOPS
    needs_z = subop == "row_attn" or subop in PAIR_SUBOPS
    inputs = arrays + ([m] if needs_m else []) + ([z] if needs_z else [])

    def f(*leaves):
        P = dict(zip(names, leaves))
        rest = list(leaves[len(names):])
        mt = rest.pop(0) if needs_m else None
        zt = rest.pop(0) if needs_z else None
        out = run_subop(subop, P, cfg, mt, zt)
        return T.reduce_mean(T.mul(out, out))

    report = T.grad_check(f, inputs, h=1e-5, n=8, seed=55, tol=1e-6)
    assert report.passed, str(report)


@pytest.mark.parametrize("variant", ["af2", "multimer", "parallel"])
def test_block_gradients(variant):
    cfg = toy_cfg(s=2, r=3, c_m=4, c_z=4, h=2, c_opm=2, t_factor=2,
                  variant=variant)
    store = init_params(cfg, seed=61)
    names = store.names()
    m, z = seeded_inputs(cfg, 63)
    inputs = [store[n] for n in names] + [m, z]

    def f(*leaves):
        P = dict(zip(names, leaves))
        mo, zo = evoformer_block(P, 0, leaves[-2], leaves[-1], cfg)
        return T.add(T.reduce_mean(T.mul(mo, mo)), T.reduce_mean(T.mul(zo, zo)))

    report = T.grad_check(f, inputs, h=1e-5, n=2, seed=65, tol=1e-5)
    assert report.passed, str(report)


@pytest.mark.parametrize("variant", ["af2", "multimer", "parallel"])
def test_gradient_descent_reduces_loss(variant):
    cfg = toy_cfg(variant=variant)
    store = init_params(cfg, seed=71)
    m, z = seeded_inputs(cfg, 73)
    lr = 1e-3
    losses = []
    for _ in range(21):
        g = T.Graph()
        P = store.bind(g)
        mo, zo = evoformer_stack(P, g.leaf(m), g.leaf(z), cfg)
        loss = T.add(T.reduce_mean(T.mul(mo, mo)), T.reduce_mean(T.mul(zo, zo)))
        losses.append(float(loss.data))
        g.backward(loss)
        for name, t in P.items():
            store.replace(name, t.data - lr * g.grad(t))
    assert losses[20] < losses[0]


def test_stack_multi_block_shapes():
    cfg = toy_cfg(n_blocks=3)
    store, g, P, m, z = bound(cfg)
    mo, zo = evoformer_stack(P, m, z, cfg)
    assert mo.shape == (cfg.s, cfg.r, cfg.c_m)
    assert zo.shape == (cfg.r, cfg.r, cfg.c_z)
    assert np.isfinite(mo.data).all() and np.isfinite(zo.data).all()
