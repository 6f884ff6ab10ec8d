"""Fast invariant and gradient self-tests behind ``graddrop check``."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .gradcheck import check_gradients
from .gradmask import (
    MaskPolicy,
    MaskState,
    PolicyKind,
    active_fraction,
    advance_epoch,
    anneal_p,
    sample_batch_mask,
)
from .optim import SGD, OptimConfig
from .stats import paired_ttest
from .tensor import Tensor
from .transformer import ModelConfig, Param, ParamSet, classification_loss, init_params

SMALL = ModelConfig(d=8, l=4, o=8, n_a=2, d_a=4, L=2, vocab=10, max_len=5, classes=3)


def gradient_check(seed: int = 0) -> tuple[bool, str]:
    params = init_params(SMALL, seed)
    rng = np.random.default_rng(seed + 1)
    x, y = rng.integers(0, SMALL.vocab, (2, 5)), rng.integers(0, SMALL.classes, 2)
    errs = check_gradients(lambda: classification_loss(params, x, y, SMALL), params.tensors())
    worst = max(errs, key=errs.get)
    return errs[worst] < 1e-4, f"max rel. error {errs[worst]:.2e} ({worst})"


def bernoulli_stats(p: float = 0.2, size: int = 10**6) -> tuple[bool, str]:
    params = ParamSet([Param("w", 1, Tensor(np.zeros(size)), True)], num_layers=1)
    policy = MaskPolicy(PolicyKind.GRADDROP, p=p, T=1)
    state = MaskState(seed=0)
    advance_epoch(state, policy, params)
    mask = sample_batch_mask(state, policy, params)
    zero = 1.0 - mask.support["w"].mean()
    mean = np.where(mask.support["w"], mask.scale, 0.0).mean()
    half = 3 * math.sqrt(p * (1 - p) / size)
    ok = abs(zero - p) <= half and abs(mean - 1.0) < 0.005
    return ok, f"zero fraction {zero:.5f} (band +/-{half:.4f}), mean value {mean:.5f}"


def masked_noop(steps: int = 10) -> tuple[bool, str]:
    params = init_params(SMALL, 0)
    initial = params.snapshot()
    ever = {p.name: np.zeros(p.tensor.shape, bool) for p in params}
    policy = MaskPolicy(PolicyKind.GRADDROP, p=0.9, T=1)
    state = MaskState(seed=0)
    advance_epoch(state, policy, params)
    opt = SGD(params, OptimConfig(lr=0.05, momentum=0.9, weight_decay=1e-4))
    rng = np.random.default_rng(0)
    for _ in range(steps):
        x, y = rng.integers(0, SMALL.vocab, (4, 5)), rng.integers(0, SMALL.classes, 4)
        classification_loss(params, x, y, SMALL).backward()
        mask = sample_batch_mask(state, policy, params)
        opt.step(mask)
        for name in ever:
            ever[name] |= mask.support[name]
    frozen = sum(int((~ever[p.name]).sum()) for p in params)
    ok = all(np.array_equal(p.tensor.data[~ever[p.name]], initial[p.name][~ever[p.name]]) for p in params)
    return ok, f"{frozen} never-active entries unchanged after {steps} steps"


def schedules() -> tuple[bool, str]:
    params = init_params(SMALL, 0)
    T = 5
    cum, tog = MaskState(seed=1), MaskState(seed=1)
    union = None
    ok = True
    for e in range(1, T + 1):
        m = advance_epoch(cum, MaskPolicy(PolicyKind.GRADDROP_EPOCH, T=T), params)
        t = advance_epoch(tog, MaskPolicy(PolicyKind.EPOCH_TOGGLE, T=T), params)
        for p in params.maskable():
            s = m.support[p.name]
            ok &= abs(int(s.sum()) - e * s.size / T) <= 1
            if union is not None:
                ok &= not np.any(union[p.name] & t.support[p.name])
        union = {k: v.copy() for k, v in t.support.items()} if union is None else {
            k: union[k] | t.support[k] for k in union}
    ok &= all(union[p.name].all() for p in params.maskable())
    deep = init_params(ModelConfig(d=4, l=2, o=4, n_a=1, d_a=4, L=24, vocab=8, max_len=4, ff_width=4), 0)
    state = MaskState(seed=0)
    for _ in range(3):
        mask = advance_epoch(state, MaskPolicy(PolicyKind.FREEZE_TOPDOWN, T=12, k=2), deep)
    frac = active_fraction(mask)
    on = sum(1 for layer in range(1, 25) if frac[layer] == 1.0)
    ok &= on == 6
    ok &= all(anneal_p(e, T) == max(0.0, 0.9 - e / T) for e in range(1, T + 1)) and anneal_p(T, T) == 0.0
    return bool(ok), f"GradDropEpoch/EpochToggle T={T} consistent; FreezeTopDown L=24 k=2 -> {on} layers after 3 epochs"


def ttest_reference() -> tuple[bool, str]:
    d = np.array([2.0, -1.0, 3.0, 0.0, 1.0])
    res = paired_ttest(d)
    ref = d.mean() / (d.std(ddof=1) / math.sqrt(d.size))
    return abs(res.t - ref) < 1e-10, f"t={res.t:.12f}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradient": gradient_check,
    "bernoulli": bernoulli_stats,
    "masked-noop": masked_noop,
    "schedules": schedules,
    "ttest": ttest_reference,
}


def run_checks(names=None, echo=print) -> bool:
    all_ok = True
    for name in names or CHECKS:
        ok, detail = CHECKS[name]()
        all_ok &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name:12s} {detail}")
    return all_ok
