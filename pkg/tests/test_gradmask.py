import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graddrop.errors import ConfigError, ContractError
from graddrop.gradmask import (
    GradMask,
    MaskPolicy,
    MaskState,
    PolicyKind,
    active_fraction,
    advance_epoch,
    all_active,
    anneal_p,
    apply_mask,
    freeze_layers,
    sample_batch_mask,
)
from graddrop.tensor import Tensor
from graddrop.transformer import ModelConfig, Param, ParamSet, init_params


def small_params(L=3):
    cfg = ModelConfig(d=4, l=2, o=4, n_a=2, d_a=2, L=L, vocab=8, max_len=4, classes=2, ff_width=6)
    return init_params(cfg, 0)


def one_big_param(shape=(1000, 1000)):
    return ParamSet([
        Param("emb", 0, Tensor(np.zeros((3, 2))), False),
        Param("w", 1, Tensor(np.zeros(shape)), True),
        Param("head", 2, Tensor(np.zeros(2)), False),
    ], num_layers=1)


def test_policy_validation():
    with pytest.raises(ConfigError):
        MaskPolicy(PolicyKind.GRADDROP, p=1.0)
    with pytest.raises(ConfigError):
        MaskPolicy("NotAPolicy")
    with pytest.raises(ConfigError):
        MaskPolicy(PolicyKind.FREEZE_TOPDOWN, T=0)
    assert MaskPolicy("GradDrop").kind is PolicyKind.GRADDROP


def test_p_zero_is_all_true_scale_one():
    params = small_params()
    policy = MaskPolicy(PolicyKind.GRADDROP, p=0.0, T=1)
    state = MaskState(seed=3)
    advance_epoch(state, policy, params)
    mask = sample_batch_mask(state, policy, params)
    assert mask.scale == 1.0
    assert all(s.all() for s in mask.support.values())


def test_scale_is_inverse_keep_probability():
    params = small_params()
    state = MaskState(seed=0)
    policy = MaskPolicy(PolicyKind.GRADDROP, p=0.2, T=1)
    advance_epoch(state, policy, params)
    mask = sample_batch_mask(state, policy, params)
    assert mask.scale == 1.25
    g = {p.name: np.ones(p.tensor.shape) for p in params}
    out = apply_mask(g, mask)
    for p in params.maskable():
        assert set(np.unique(out[p.name])) <= {0.0, 1.25}
    unscaled = MaskPolicy(PolicyKind.GRADDROP, p=0.2, T=1, scale_grads=False)
    assert sample_batch_mask(state, unscaled, params).scale == 1.0


def test_bernoulli_zero_fraction_and_unbiased_scale():
    p, N = 0.2, 10**6
    half_width = 3 * math.sqrt(p * (1 - p) / N)
    params = one_big_param()
    policy = MaskPolicy(PolicyKind.GRADDROP, p=p, T=1)
    state = MaskState(seed=1234)
    advance_epoch(state, policy, params)
    mask = sample_batch_mask(state, policy, params)
    support = mask.support["w"]
    assert support.size == N
    zero_frac = 1 - support.mean()
    assert p - half_width <= zero_frac <= p + half_width
    values = np.where(support, mask.scale, 0.0)
    assert abs(values.mean() - 1.0) < 0.005


def test_batch_sampling_rejects_epoch_policies():
    params = small_params()
    for kind in (PolicyKind.SFT, PolicyKind.GRADDROP_EPOCH, PolicyKind.FREEZE_TOPDOWN):
        with pytest.raises(ContractError):
            sample_batch_mask(MaskState(seed=0), MaskPolicy(kind, T=2), params)


def test_graddrop_epoch_cumulative_fractions():
    params = small_params()
    T = 5
    policy = MaskPolicy(PolicyKind.GRADDROP_EPOCH, T=T)
    state = MaskState(seed=7)
    prev = None
    for e in range(1, T + 1):
        mask = advance_epoch(state, policy, params)
        for p in params.maskable():
            s = mask.support[p.name]
            assert abs(s.sum() - e * s.size / T) <= 1
            if prev is not None:
                assert np.all(s >= prev[p.name])
        prev = {k: v.copy() for k, v in mask.support.items()}
    assert all(prev[p.name].all() for p in params.maskable())
    with pytest.raises(ContractError):
        advance_epoch(state, policy, params)


def test_epoch_toggle_partition():
    params = small_params()
    T = 4
    policy = MaskPolicy(PolicyKind.EPOCH_TOGGLE, T=T)
    state = MaskState(seed=5)
    sets = [advance_epoch(state, policy, params) for _ in range(T)]
    for p in params.maskable():
        stacked = np.stack([m.support[p.name] for m in sets]).astype(int)
        # every entry active in exactly one epoch: disjoint and exhaustive
        assert np.all(stacked.sum(axis=0) == 1)
    for a, b in itertools.combinations(sets, 2):
        for p in params.maskable():
            assert not np.any(a.support[p.name] & b.support[p.name])


def test_epoch_toggle_draws_same_order_as_cumulative():
    params = small_params()
    cum, tog = MaskState(seed=9), MaskState(seed=9)
    pc, pt = MaskPolicy(PolicyKind.GRADDROP_EPOCH, T=3), MaskPolicy(PolicyKind.EPOCH_TOGGLE, T=3)
    union = None
    for _ in range(3):
        mc, mt = advance_epoch(cum, pc, params), advance_epoch(tog, pt, params)
        union = {k: v.copy() for k, v in mt.support.items()} if union is None else {
            k: union[k] | mt.support[k] for k in union}
        for p in params.maskable():
            np.testing.assert_array_equal(union[p.name], mc.support[p.name])


def test_freeze_topdown_24_layers_k2():
    params = init_params(ModelConfig(d=4, l=2, o=4, n_a=1, d_a=4, L=24, vocab=8, max_len=4, ff_width=4), 0)
    policy = MaskPolicy(PolicyKind.FREEZE_TOPDOWN, T=12, k=2)
    state = MaskState(seed=0)
    for _ in range(3):
        mask = advance_epoch(state, policy, params)
    frac = active_fraction(mask)
    on = [layer for layer in range(1, 25) if frac[layer] == 1.0]
    assert on == list(range(19, 25))
    assert all(frac[layer] == 0.0 for layer in range(1, 19))


def test_freeze_schedules():
    T = 4
    top = MaskPolicy(PolicyKind.FREEZE_TOPDOWN, T=T, k=1)
    bottom = MaskPolicy(PolicyKind.FREEZE_BOTTOMUP, T=T, k=1)
    toggle = MaskPolicy(PolicyKind.FREEZE_TOGGLE_TOPDOWN, T=T, k=1)
    assert [freeze_layers(top, e, 4) for e in range(1, 5)] == [[4], [3, 4], [2, 3, 4], [1, 2, 3, 4]]
    assert [freeze_layers(bottom, e, 4) for e in range(1, 5)] == [[1], [1, 2], [1, 2, 3], [1, 2, 3, 4]]
    assert [freeze_layers(toggle, e, 4) for e in range(1, 5)] == [[4], [3], [2], [1]]
    # default k = ceil(L / T) unfreezes everything by the last epoch
    assert freeze_layers(MaskPolicy(PolicyKind.FREEZE_TOPDOWN, T=3), 3, 7) == list(range(1, 8))
    # window clamps to the bottom once exhausted
    assert freeze_layers(MaskPolicy(PolicyKind.FREEZE_TOGGLE_TOPDOWN, T=6, k=2), 6, 5) == [1]


def test_anneal_schedule_exact():
    params = small_params()
    for T in (1, 2, 5, 10, 12):
        policy = MaskPolicy(PolicyKind.ANNEAL_GRADDROP, T=T)
        state = MaskState(seed=0)
        for e in range(1, T + 1):
            assert advance_epoch(state, policy, params) is None
            assert state.p == max(0.0, 0.9 - e / T)
        assert state.p == 0.0
    assert anneal_p(1, 10) == 0.9 - 0.1


def test_anneal_requires_epoch_start():
    with pytest.raises(ContractError):
        sample_batch_mask(MaskState(seed=0), MaskPolicy(PolicyKind.ANNEAL_GRADDROP, T=3), small_params())


def test_layerwise_masks_share_one_boolean_per_layer():
    params = small_params(L=6)
    policy = MaskPolicy(PolicyKind.LAYER_GRADDROP, p=0.5, T=1)
    state = MaskState(seed=2)
    advance_epoch(state, policy, params)
    seen = set()
    for _ in range(20):
        mask = sample_batch_mask(state, policy, params)
        for layer in range(1, 7):
            vals = {bool(v) for p in params.in_layer(layer) for v in np.unique(mask.support[p.name])}
            assert len(vals) == 1
            seen |= vals
    assert seen == {True, False}


@pytest.mark.parametrize("kind", list(PolicyKind))
def test_exclusion_of_embeddings_and_head(kind):
    params = small_params()
    policy = MaskPolicy(kind, p=0.9, T=3, k=1)
    state = MaskState(seed=1)
    for _ in range(3):
        mask = advance_epoch(state, policy, params)
        if mask is None:
            mask = sample_batch_mask(state, policy, params)
        frac = active_fraction(mask)
        assert frac[0] == 1.0 and frac[params.num_layers + 1] == 1.0
        g = {p.name: np.full(p.tensor.shape, 3.0) for p in params}
        out = apply_mask(g, mask)
        for p in params:
            if not p.maskable:
                assert out[p.name] is g[p.name]


def test_apply_mask_identity_and_all_false():
    params = small_params()
    rng = np.random.default_rng(0)
    g = {p.name: rng.standard_normal(p.tensor.shape) for p in params}
    out = apply_mask(g, all_active(params))
    for k in g:
        assert out[k].tobytes() == g[k].tobytes()
    support = {p.name: np.zeros(p.tensor.shape, bool) if p.layer == 2 else np.ones(p.tensor.shape, bool)
               for p in params}
    mask = GradMask(support, params.layer_of(), frozenset(p.name for p in params.maskable()))
    out = apply_mask(g, mask)
    for p in params.in_layer(2):
        assert np.all(out[p.name] == 0.0)


def test_apply_mask_matches_elementwise_loop():
    params = small_params()
    rng = np.random.default_rng(4)
    g = {p.name: rng.standard_normal(p.tensor.shape) for p in params}
    support = {p.name: rng.random(p.tensor.shape) < 0.6 for p in params}
    maskable = frozenset(p.name for p in params.maskable())
    mask = GradMask(support, params.layer_of(), maskable, scale=1.7)
    out = apply_mask(g, mask)
    for name in g:
        flat_g, flat_s, flat_o = g[name].ravel(), support[name].ravel(), out[name].ravel()
        for i in range(flat_g.size):
            if name not in maskable:
                expect = flat_g[i]
            else:
                expect = flat_g[i] * 1.7 if flat_s[i] else 0.0
            assert flat_o[i] == expect


def test_apply_mask_shape_mismatch():
    params = small_params()
    mask = all_active(params)
    name = params.maskable()[0].name
    with pytest.raises(ContractError):
        apply_mask({name: np.zeros((99,))}, mask)


def test_active_fraction_counts():
    params = ParamSet([Param("a", 1, Tensor(np.zeros((4, 4))), True)], num_layers=1)
    full = all_active(params)
    assert active_fraction(full) == {1: 1.0}
    empty = GradMask({"a": np.zeros((4, 4), bool)}, {"a": 1}, frozenset({"a"}))
    assert active_fraction(empty) == {1: 0.0}
    checker = GradMask({"a": (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(bool)}, {"a": 1}, frozenset({"a"}))
    assert active_fraction(checker) == {1: 0.5}


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(list(PolicyKind)), st.integers(0, 10**6))
def test_same_seed_same_mask_sequence(kind, seed):
    params = small_params()
    policy = MaskPolicy(kind, p=0.3, T=3, k=1)

    def trace():
        state = MaskState(seed=seed)
        out = []
        for _ in range(3):
            m = advance_epoch(state, policy, params)
            if m is None:
                m = sample_batch_mask(state, policy, params)
                m2 = sample_batch_mask(state, policy, params)
                out.append(b"".join(np.packbits(v).tobytes() for v in m2.support.values()))
            out.append(b"".join(np.packbits(v).tobytes() for v in m.support.values()))
        return out

    assert trace() == trace()


def test_batch_masks_are_order_independent():
    params = small_params()
    policy = MaskPolicy(PolicyKind.GRADDROP, p=0.5, T=2)
    a, b = MaskState(seed=11), MaskState(seed=11)
    advance_epoch(a, policy, params)
    advance_epoch(b, policy, params)
    first = sample_batch_mask(a, policy, params)
    b.batch = 0
    again = sample_batch_mask(b, policy, params)
    for k in first.support:
        np.testing.assert_array_equal(first.support[k], again.support[k])
    nxt = sample_batch_mask(a, policy, params)
    assert any(not np.array_equal(first.support[p.name], nxt.support[p.name]) for p in params.maskable())
