import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdlrec import autodiff as ad
from mdlrec.model import (
    ConfigError,
    ModelConfig,
    TokenState,
    build_model,
    count_params,
    domain_aware_attention,
    domain_fused,
    feature_self_interaction,
    flops_estimate,
    match_params,
    mdl_block_forward,
    model_forward,
    param_spec,
    scenario_mask,
    token_mixing,
)
from mdlrec.params import finite_diff_check, init_params
from mdlrec.schema import default_schema
from mdlrec.training import multi_task_loss

from conftest import random_batch, small_gen


# --- scripted numpy oracles, written independently of the tape ----------------

def o_mix(x):
    b, n, d = x.shape
    s = d // n
    out = np.empty_like(x)
    for h in range(n):
        for i in range(n):
            out[:, h, i * s:(i + 1) * s] = x[:, i, h * s:(h + 1) * s]
    return out


def o_ln(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def o_tok_ffn(x, p, pre):
    out = np.empty_like(x)
    for t in range(x.shape[1]):
        h = np.maximum(x[:, t] @ p[f"{pre}.W1"][t] + p[f"{pre}.b1"][t], 0.0)
        out[:, t] = h @ p[f"{pre}.W2"][t] + p[f"{pre}.b2"][t]
    return out


def o_fsi(x, p, pre):
    u = o_ln(o_mix(x) + x) * p[f"{pre}.ln.g"] + p[f"{pre}.ln.b"]
    return o_tok_ffn(u, p, f"{pre}.ffn") + u


def o_attention(qry, feats, p, pre, heads):
    b, tq, d = qry.shape
    nf = feats.shape[1]
    dh = d // heads
    out = np.zeros_like(qry)
    weights = np.zeros((b, heads, tq, nf))
    for i in range(b):
        q = np.stack([qry[i, t] @ p[f"{pre}.q.W"][t] + p[f"{pre}.q.b"][t] for t in range(tq)])
        k = np.stack([feats[i, f] @ p[f"{pre}.k.W"][f] + p[f"{pre}.k.b"][f] for f in range(nf)])
        v = np.stack([feats[i, f] @ p[f"{pre}.v.W"][f] + p[f"{pre}.v.b"][f] for f in range(nf)])
        for t in range(tq):
            cat = []
            for h in range(heads):
                sl = slice(h * dh, (h + 1) * dh)
                logits = np.array([q[t, sl] @ k[f, sl] for f in range(nf)]) / np.sqrt(dh)
                e = np.exp(logits - logits.max())
                w = e / e.sum()
                weights[i, h, t] = w
                cat.append(sum(w[f] * v[f, sl] for f in range(nf)))
            out[i, t] = np.concatenate(cat) @ p[f"{pre}.o.W"] + p[f"{pre}.o.b"]
    return out, weights


def o_fused(task_hat, scn_hat, member):
    out = task_hat.copy()
    for i in range(member.shape[0]):
        sel = [scn_hat[i, k] for k in range(member.shape[1]) if member[i, k] > 0]
        out[i] += sum(sel) / len(sel)
    return out


def o_block(f, s, t, member, p, layer, heads):
    pre = f"blk.{layer}"
    f1 = o_fsi(f, p, f"{pre}.f")
    s_hat = o_attention(s, f1, p, f"{pre}.sa", heads)[0] + s
    s1 = o_tok_ffn(s_hat, p, f"{pre}.sffn") + s_hat
    t_hat = o_attention(t, f1, p, f"{pre}.ta", heads)[0] + t
    t_til = o_fused(t_hat, s_hat, member)
    return f1, s1, o_tok_ffn(t_til, p, f"{pre}.tffn") + t_til


def o_ffn(x, p, pre):
    return np.maximum(x @ p[f"{pre}.W1"] + p[f"{pre}.b1"], 0.0) @ p[f"{pre}.W2"] + p[f"{pre}.b2"]


def o_model(batch, schema, p, config):
    def value(f, table):
        if f.kind == "categorical":
            return p[f"{table}.{f.name}"][getattr(batch, f.source)]
        if f.kind == "dense":
            return getattr(batch, f.source)
        return batch.seq[:, f.index]

    feats = np.stack([np.concatenate([value(schema[m], "emb") for m in members], axis=1) @ p[f"tok.proj.{j}.W"]
                      + p[f"tok.proj.{j}.b"] for j, (_, members) in enumerate(schema.groups)], axis=1)
    imp = [value(f, "imp") for f in schema.important]
    scn = [np.maximum(o_ffn(np.concatenate(imp + [value(schema[n], "prior") for n in prior], axis=1), p,
                            f"tok.scn.{k}"), 0.0) for k, (_, prior) in enumerate(schema.scenarios)]
    scn.append(np.maximum(o_ffn(np.concatenate(imp, axis=1), p, "tok.scn.global"), 0.0))
    tasks = [np.maximum(o_ffn(np.concatenate(imp + [value(schema[n], "prior") for n in prior], axis=1), p,
                              f"tok.task.{k}"), 0.0) for k, (_, prior) in enumerate(schema.tasks)]
    s, t = np.stack(scn, axis=1), np.stack(tasks, axis=1)
    member = np.concatenate([batch.member, np.ones((len(batch), 1))], axis=1)
    for layer in range(config.layers):
        feats, s, t = o_block(feats, s, t, member, p, layer, config.heads)
    logits = np.stack([t[:, n] @ p["head.W"][n][:, 0] + p["head.b"][n][0] for n in range(t.shape[1])], axis=1)
    return 1.0 / (1.0 + np.exp(-logits))


# --- token mixing -------------------------------------------------------------

def test_token_mixing_example():
    tape = ad.Tape()
    x = np.array([[[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]])
    out = token_mixing(tape.constant(x))
    assert out.value.tolist() == [[[1.0, 2.0, 5.0, 6.0], [3.0, 4.0, 7.0, 8.0]]]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), mult=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_token_mixing_involution(n, mult, seed):
    x = np.random.default_rng(seed).normal(size=(2, n, n * mult))
    tape = ad.Tape()
    twice = token_mixing(token_mixing(tape.constant(x)))
    assert np.array_equal(twice.value, x)
    np.testing.assert_array_equal(token_mixing(tape.constant(x)).value, o_mix(x))


def test_token_mixing_identical_tokens():
    seg = np.arange(12.0)
    x = np.tile(seg, (1, 3, 1))
    out = token_mixing(ad.Tape().constant(x)).value
    for h in range(3):
        np.testing.assert_array_equal(out[0, h], np.tile(seg[4 * h:4 * h + 4], 3))


def test_token_mixing_rejects_indivisible_width():
    with pytest.raises(ConfigError):
        token_mixing(ad.Tape().constant(np.ones((1, 3, 4))))
    with pytest.raises(ConfigError):
        ModelConfig(d=30).validate(default_schema(small_gen()))


# --- feature self-interaction -------------------------------------------------

def _fsi_params(nf, d, seed, zero_ffn=False):
    rng = np.random.default_rng(seed)
    p = {"f.ln.g": 1.0 + 0.1 * rng.normal(size=(nf, d)), "f.ln.b": 0.1 * rng.normal(size=(nf, d)),
         "f.ffn.W1": rng.normal(size=(nf, d, 2 * d)) * 0.5, "f.ffn.b1": rng.normal(size=(nf, 2 * d)) * 0.1,
         "f.ffn.W2": rng.normal(size=(nf, 2 * d, d)) * 0.5, "f.ffn.b2": rng.normal(size=(nf, d)) * 0.1}
    if zero_ffn:
        p.update({k: np.zeros_like(v) for k, v in p.items() if ".ffn." in k})
        p["f.ln.g"], p["f.ln.b"] = np.ones((nf, d)), np.zeros((nf, d))
    return p


def test_fsi_zero_ffn_is_layernorm_of_mix():
    x = np.random.default_rng(0).normal(size=(3, 4, 8))
    tape = ad.Tape()
    p = _fsi_params(4, 8, 0, zero_ffn=True)
    out = feature_self_interaction(tape.constant(x), {k: tape.constant(v) for k, v in p.items()}, "f")
    np.testing.assert_allclose(out.value, o_ln(o_mix(x) + x), rtol=0, atol=1e-12)


def test_fsi_single_token():
    x = np.random.default_rng(1).normal(size=(2, 1, 4))
    tape = ad.Tape()
    p = _fsi_params(1, 4, 1)
    out = feature_self_interaction(tape.constant(x), {k: tape.constant(v) for k, v in p.items()}, "f")
    u = o_ln(2.0 * x) * p["f.ln.g"] + p["f.ln.b"]
    np.testing.assert_allclose(out.value, o_tok_ffn(u, p, "f.ffn") + u, rtol=0, atol=1e-12)


def test_fsi_gradient():
    rng = np.random.default_rng(2)
    params = _fsi_params(2, 4, 2)
    params["x"] = rng.normal(size=(3, 2, 4))
    probe = rng.normal(size=(3, 2, 4))

    def fn(tape, t):
        out = feature_self_interaction(t["x"], t, "f")
        return ad.total(ad.mul(out, tape.constant(probe)))

    assert finite_diff_check(fn, params) < 1e-4


# --- domain-aware attention ---------------------------------------------------

def _attn_params(tq, nf, d, seed):
    rng = np.random.default_rng(seed)
    return {"a.q.W": rng.normal(size=(tq, d, d)), "a.q.b": rng.normal(size=(tq, d)),
            "a.k.W": rng.normal(size=(nf, d, d)), "a.k.b": rng.normal(size=(nf, d)),
            "a.v.W": rng.normal(size=(nf, d, d)), "a.v.b": rng.normal(size=(nf, d)),
            "a.o.W": rng.normal(size=(d, d)), "a.o.b": rng.normal(size=d)}


def test_attention_matches_dense_oracle():
    rng = np.random.default_rng(3)
    q, f = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 3, 4))
    p = _attn_params(2, 3, 4, 3)
    tape = ad.Tape()
    out, w = domain_aware_attention(tape.constant(q), tape.constant(f), {k: tape.constant(v) for k, v in p.items()},
                                    "a", 2)
    ref, ref_w = o_attention(q, f, p, "a", 2)
    np.testing.assert_allclose(out.value, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(w, ref_w, rtol=0, atol=1e-12)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


def test_attention_identical_values_pass_through():
    rng = np.random.default_rng(4)
    p = _attn_params(2, 3, 4, 4)
    p["a.v.W"] = np.zeros((3, 4, 4))
    v = rng.normal(size=4)
    p["a.v.b"] = np.tile(v, (3, 1))
    p["a.o.W"], p["a.o.b"] = np.eye(4), np.zeros(4)
    tape = ad.Tape()
    out, _ = domain_aware_attention(tape.constant(rng.normal(size=(5, 2, 4))), tape.constant(rng.normal(size=(5, 3, 4))),
                                    {k: tape.constant(x) for k, x in p.items()}, "a", 2)
    np.testing.assert_allclose(out.value, np.broadcast_to(v, (5, 2, 4)), rtol=0, atol=1e-12)


def test_attention_single_feature_weight_one():
    rng = np.random.default_rng(5)
    p = _attn_params(3, 1, 4, 5)
    tape = ad.Tape()
    _, w = domain_aware_attention(tape.constant(rng.normal(size=(2, 3, 4))), tape.constant(rng.normal(size=(2, 1, 4))),
                                  {k: tape.constant(x) for k, x in p.items()}, "a", 2)
    assert np.all(w == 1.0)


def test_attention_dim_mismatch():
    tape = ad.Tape()
    p = {k: tape.constant(v) for k, v in _attn_params(1, 1, 4, 0).items()}
    with pytest.raises(ad.ShapeError):
        domain_aware_attention(tape.constant(np.ones((1, 1, 4))), tape.constant(np.ones((1, 1, 6))), p, "a", 2)


def test_attention_gradient():
    rng = np.random.default_rng(6)
    params = _attn_params(2, 3, 4, 6)
    params = {k: 0.5 * v for k, v in params.items()}
    params["q"], params["f"] = rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 3, 4))
    probe = rng.normal(size=(2, 2, 4))

    def fn(tape, t):
        out, _ = domain_aware_attention(t["q"], t["f"], t, "a", 2)
        return ad.total(ad.mul(out, tape.constant(probe)))

    assert finite_diff_check(fn, params) < 1e-4


# --- domain fused -------------------------------------------------------------

def test_fused_single_scenario_identical_vectors():
    v = np.array([0.3, -1.2])
    scn = np.stack([v * 7.0, v, v])[None]  # scenarios 0, 1 and the global token
    tape = ad.Tape()
    mask = scenario_mask(tape, np.array([[0.0, 1.0]]), True)
    out = domain_fused(tape.constant(np.zeros((1, 3, 2))), tape.constant(scn), mask)
    np.testing.assert_array_equal(out.value[0], np.tile(v, (3, 1)))


def test_fused_mean_of_three():
    scn = np.array([[[2.0, 0.0], [0.0, 2.0], [1.0, 1.0]]])
    tape = ad.Tape()
    mask = scenario_mask(tape, np.array([[1.0, 1.0]]), True)
    out = domain_fused(tape.constant(np.zeros((1, 1, 2))), tape.constant(scn), mask)
    assert out.value.tolist() == [[[1.0, 1.0]]]


@pytest.mark.parametrize("global_token", [True, False])
def test_fused_matches_bruteforce(global_token):
    rng = np.random.default_rng(7)
    for _ in range(20):
        b = 9
        member = (rng.random((b, 5)) < 0.4).astype(float)
        member[np.arange(b), rng.integers(5, size=b)] = 1.0
        scn = rng.normal(size=(b, 5 + int(global_token), 3))
        tasks = rng.normal(size=(b, 4, 3))
        tape = ad.Tape()
        out = domain_fused(tape.constant(tasks), tape.constant(scn), scenario_mask(tape, member, global_token))
        full = np.concatenate([member, np.ones((b, 1))], axis=1) if global_token else member
        assert np.array_equal(out.value, o_fused(tasks, scn, full))


def test_fused_empty_selection_is_an_error():
    tape = ad.Tape()
    with pytest.raises(ValueError, match="no scenario"):
        scenario_mask(tape, np.array([[0.0, 0.0]]), False)


# --- MDL block ----------------------------------------------------------------

def _block_setup(seed, zero=False, d=4, nf=2, ns=2, nt=2, b=3):
    cfg = ModelConfig(d=d, layers=1, heads=2)
    spec = {}
    from mdlrec.model import _attention_spec, _pertoken_ffn_spec
    spec[f"blk.0.f.ln.g"] = ((nf, d), "ones")
    spec[f"blk.0.f.ln.b"] = ((nf, d), "zeros")
    spec.update(_pertoken_ffn_spec("blk.0.f.ffn", nf, d, 2 * d))
    spec.update(_attention_spec("blk.0.sa", ns + 1, nf, d))
    spec.update(_pertoken_ffn_spec("blk.0.sffn", ns + 1, d, 2 * d))
    spec.update(_attention_spec("blk.0.ta", nt, nf, d))
    spec.update(_pertoken_ffn_spec("blk.0.tffn", nt, d, 2 * d))
    if zero:
        spec = {k: (v[0], "zeros") for k, v in spec.items()}
    p = init_params(spec, seed).params
    rng = np.random.default_rng(seed)
    if not zero:
        # non-zero biases and gains so every term of the block is exercised
        p = {k: v + 0.1 * rng.normal(size=v.shape) if k.endswith((".b", ".b1", ".b2", ".g")) else v
             for k, v in p.items()}
    member = np.zeros((b, ns))
    member[np.arange(b), rng.integers(ns, size=b)] = 1.0
    member[0] = 1.0
    state = (rng.normal(size=(b, nf, d)), rng.normal(size=(b, ns + 1, d)), rng.normal(size=(b, nt, d)))
    return cfg, p, member, state


def _run_block(cfg, p, member, state, global_token=True):
    tape = ad.Tape()
    t = {k: tape.constant(v) for k, v in p.items()}
    st_ = TokenState(*(tape.constant(x) for x in state), 0)
    out, s_hat = mdl_block_forward(st_, t, scenario_mask(tape, member, global_token), cfg)
    return out, s_hat


def test_block_zero_parameters_trace():
    cfg, p, member, (f, s, t) = _block_setup(0, zero=True)
    out, _ = _run_block(cfg, p, member, (f, s, t))
    full = np.concatenate([member, np.ones((len(member), 1))], axis=1)
    avg = np.stack([s[i][full[i] > 0].mean(axis=0) for i in range(len(member))])
    np.testing.assert_allclose(out.tasks.value, t + avg[:, None, :], rtol=0, atol=1e-15)


def test_block_matches_step_replay():
    for seed in range(3):
        cfg, p, member, (f, s, t) = _block_setup(seed)
        out, s_hat = _run_block(cfg, p, member, (f, s, t))
        full = np.concatenate([member, np.ones((len(member), 1))], axis=1)
        f1, s1, t1 = o_block(f, s, t, full, p, 0, 2)
        np.testing.assert_allclose(out.features.value, f1, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.scenarios.value, s1, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.tasks.value, t1, rtol=0, atol=1e-12)
        assert out.layer == 1


# --- full model -----------------------------------------------------------------

def _model_setup(arch="mdl", d=8, layers=2, emb_dim=4, include_member=True, ablations=(), **gen):
    g = small_gen(**gen)
    schema = default_schema(g, emb_dim=emb_dim, include_member=include_member)
    return g, schema, ModelConfig(arch=arch, d=d, layers=layers, heads=2, ablations=list(ablations))


def test_model_matches_end_to_end_oracle():
    g, schema, cfg = _model_setup(d=4, emb_dim=2)
    model = build_model(cfg, schema, seed=11)
    batch = random_batch(2, users=g.users, queries=g.queries, items=g.items, seed=11)
    probs = model.predict(batch)
    np.testing.assert_allclose(probs, o_model(batch, schema, model.store.params, cfg), rtol=0, atol=1e-10)


@pytest.mark.parametrize("arch", ["mdl", "shared_bottom", "mmoe"])
def test_zero_parameters_give_one_half(arch):
    g, schema, cfg = _model_setup(arch)
    spec = {k: (v[0], "zeros") for k, v in param_spec(cfg, schema).items()}
    model = build_model(cfg, schema, 0)
    model.store = init_params(spec, 0)
    probs = model.predict(random_batch(7, users=g.users, queries=g.queries, items=g.items))
    assert np.all(probs == 0.5)


@pytest.mark.parametrize("arch", ["mdl", "shared_bottom", "mmoe"])
@pytest.mark.parametrize("K", [1, 2, 3, 5])
def test_head_count_independent_of_scenarios(arch, K):
    g, schema, cfg = _model_setup(arch, K=K, memberships=[[0]], scenario_mix=[1.0])
    model = build_model(cfg, schema, 1)
    probs = model.predict(random_batch(6, K=K, users=g.users, queries=g.queries, items=g.items))
    assert probs.shape == (6, schema.n_tasks)
    assert np.all((probs > 0.0) & (probs < 1.0))


def test_mmoe_gates_sum_to_one():
    g, schema, cfg = _model_setup("mmoe")
    model = build_model(cfg, schema, 2)
    fwd = model.forward(random_batch(10, users=g.users, queries=g.queries, items=g.items))
    assert fwd.gates.shape == (10, 3, 4)
    np.testing.assert_allclose(fwd.gates.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


def test_attention_rows_sum_to_one_every_layer():
    g, schema, cfg = _model_setup()
    fwd = build_model(cfg, schema, 3).forward(random_batch(8, users=g.users, queries=g.queries, items=g.items))
    assert len(fwd.attention["task"]) == 2 and len(fwd.attention["scenario"]) == 2
    for role in ("task", "scenario"):
        for w in fwd.attention[role]:
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


def test_parameter_count_hand_oracle():
    # users 30, queries 12, items 60, emb 4, latent 4, K = N = 3, d = 8, L = 1, ratio 2
    g, schema, cfg = _model_setup(d=8, layers=1)
    tables = (30 + 12 + 60) * 4
    proj = (16 * 8 + 8) + 2 * (4 * 8 + 8) + (7 * 8 + 8)
    tok_ffn = 8 * 16 + 16 + 16 * 8 + 8
    feature_layer = 2 * 4 * 8 + 4 * tok_ffn
    prompt_ffn = 16 * 16 + 16 + 16 * 8 + 8      # input: 12 important + 4 prior dims
    global_ffn = 12 * 16 + 16 + 16 * 8 + 8

    def attn(nq):
        return nq * (64 + 8) + 2 * 4 * (64 + 8) + 64 + 8

    expected = (tables + proj + feature_layer + tables + 3 * prompt_ffn + global_ffn + 3 * prompt_ffn
                + attn(4) + 4 * tok_ffn + attn(3) + 3 * tok_ffn + 3 * 8 + 3)
    assert expected == 8859
    assert count_params(cfg, schema) == expected
    assert build_model(cfg, schema, 0).n_params == expected


def test_flops_hand_count():
    g, schema, cfg = _model_setup("shared_bottom", d=8, layers=1)
    # projections (16+4+4+7)*8, one layer of 4 token FFNs 2*8*16 each, towers 8*3*64 + 3*64
    assert flops_estimate(cfg, schema) == 248 + 1024 + 1536 + 192


def test_match_params_within_five_percent():
    g, schema, cfg = _model_setup(d=8)
    target = count_params(cfg, schema)
    for arch in ("shared_bottom", "mmoe"):
        matched = match_params(ModelConfig(arch=arch, d=8, layers=2), schema, target)
        assert abs(count_params(matched, schema) - target) <= 0.05 * target


def test_ablations_only_for_mdl():
    g, schema, _ = _model_setup()
    with pytest.raises(ConfigError, match="only apply"):
        build_model(ModelConfig(arch="shared_bottom", ablations=["no_scenario_token"]), schema, 0)
    with pytest.raises(ConfigError, match="unknown ablation"):
        build_model(ModelConfig(ablations=["no_everything"]), schema, 0)


@pytest.mark.parametrize("flags", [["no_task_token"], ["no_task_feature_attn"], ["no_scenario_token"],
                                   ["no_global_scenario_token"], ["no_scenario_feature_attn"]])
def test_ablation_variants_run(flags):
    g, schema, cfg = _model_setup(ablations=flags)
    model = build_model(cfg, schema, 4)
    probs = model.predict(random_batch(5, users=g.users, queries=g.queries, items=g.items))
    assert probs.shape == (5, 3)
    assert count_params(cfg, schema) < count_params(ModelConfig(d=8, layers=2, heads=2), schema)


def test_no_scenario_token_ignores_membership():
    g, schema, cfg = _model_setup(include_member=False, ablations=["no_scenario_token"])
    model = build_model(cfg, schema, 5)
    batch = random_batch(12, users=g.users, queries=g.queries, items=g.items, seed=5)
    base = model.predict(batch)
    rng = np.random.default_rng(5)
    for _ in range(5):
        batch.member = (rng.random((12, 3)) < 0.5).astype(float)
        assert np.array_equal(model.predict(batch), base)


def gradient_isolation_trial(seed, schema, cfg, g):
    """All instances in scenario k: every other non-global scenario token's own parameters get zero gradient."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(schema.n_scenarios))
    member = np.zeros((6, schema.n_scenarios))
    member[:, k] = 1.0
    batch = random_batch(6, users=g.users, queries=g.queries, items=g.items, seed=seed, member=member)
    model = build_model(cfg, schema, seed)
    tape = ad.Tape()
    fwd = model.forward(batch, tape)
    loss = multi_task_loss(tape, fwd.probs, batch.labels, np.ones(schema.n_tasks))
    grads = ad.backward(tape, loss)
    checked = 0
    for j in range(schema.n_scenarios):
        own = [n for n in grads if isinstance(n, str) and n.startswith(f"tok.scn.{j}.")]
        sliced = [n for n in grads if isinstance(n, str) and (".sa.q." in n or ".sffn." in n)]
        if j == k:
            if not any(np.any(grads[n] != 0.0) for n in own):
                return False
            continue
        for n in own:
            checked += 1
            if np.any(grads[n] != 0.0):
                return False
        for n in sliced:
            checked += 1
            if np.any(grads[n][j] != 0.0):
                return False
    return checked > 0


def test_gradient_isolation():
    g, schema, cfg = _model_setup()
    assert all(gradient_isolation_trial(seed, schema, cfg, g) for seed in range(10))


def full_model_gradcheck(seed=0):
    g, schema, cfg = _model_setup(d=4, layers=2, emb_dim=2, users=5, queries=4, items=16)
    model = build_model(cfg, schema, seed)
    batch = random_batch(4, users=g.users, queries=g.queries, items=g.items, seed=seed)
    labels = batch.labels

    def fn(tape, t):
        fwd = model_forward(tape, t, batch, cfg, schema)
        return multi_task_loss(tape, fwd.probs, labels, np.ones(3))

    return finite_diff_check(fn, model.store)


def test_full_model_gradient():
    started = time.perf_counter()
    assert full_model_gradcheck() < 1e-4
    assert time.perf_counter() - started < 60
