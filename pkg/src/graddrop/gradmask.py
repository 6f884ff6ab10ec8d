"""Gradient masks for every gradient-dropout and gradual-unfreezing policy.

A mask is a boolean support per parameter (``True`` lets the gradient
through) plus one scale factor applied to the surviving entries of
maskable parameters. Bernoulli policies use ``scale = 1 / (1 - p)`` so each
mask entry has expectation one; schedule policies use ``scale = 1``.

Policies fall in two groups:

* per-batch (``GradDrop``, ``LayerGradDrop`` and their annealed versions)
  draw a fresh mask for every mini-batch with :func:`sample_batch_mask`;
* per-epoch (``SFT``, ``GradDropEpoch``, ``EpochToggle`` and the freeze
  schedules) fix one mask for a whole epoch, returned by :func:`advance_epoch`.

Annealed policies also go through :func:`advance_epoch`, which only updates
the dropout rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ContractError
from .rng import keyed_rng
from .transformer import ParamSet

ANNEAL_START = 0.9


class PolicyKind(str, Enum):
    SFT = "SFT"
    GRADDROP = "GradDrop"
    LAYER_GRADDROP = "LayerGradDrop"
    GRADDROP_EPOCH = "GradDropEpoch"
    EPOCH_TOGGLE = "EpochToggle"
    ANNEAL_GRADDROP = "AnnealGradDrop"
    ANNEAL_LAYER_GRADDROP = "AnnealLayerGradDrop"
    FREEZE_TOPDOWN = "FreezeTopDown"
    FREEZE_BOTTOMUP = "FreezeBottomUp"
    FREEZE_TOGGLE_TOPDOWN = "FreezeToggleTopDown"


PER_BATCH = frozenset({
    PolicyKind.GRADDROP,
    PolicyKind.LAYER_GRADDROP,
    PolicyKind.ANNEAL_GRADDROP,
    PolicyKind.ANNEAL_LAYER_GRADDROP,
})
LAYERWISE = frozenset({PolicyKind.LAYER_GRADDROP, PolicyKind.ANNEAL_LAYER_GRADDROP})
ANNEALED = frozenset({PolicyKind.ANNEAL_GRADDROP, PolicyKind.ANNEAL_LAYER_GRADDROP})
RANDOM_EPOCH = frozenset({PolicyKind.GRADDROP_EPOCH, PolicyKind.EPOCH_TOGGLE})
FREEZE = frozenset({PolicyKind.FREEZE_TOPDOWN, PolicyKind.FREEZE_BOTTOMUP, PolicyKind.FREEZE_TOGGLE_TOPDOWN})


@dataclass(frozen=True)
class MaskPolicy:
    """Which masking scheme to run and its hyperparameters.

    ``p`` is ignored by SFT and the freeze schedules, ``k`` (layers unfrozen
    per epoch, default ``ceil(L / T)``) only matters for the freeze schedules.
    """

    kind: PolicyKind = PolicyKind.SFT
    p: float = 0.2
    T: int = 10
    k: int | None = None
    scale_grads: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", PolicyKind(self.kind))
        except ValueError:
            valid = ", ".join(k.value for k in PolicyKind)
            raise ConfigError(f"unknown policy kind {self.kind!r}; expected one of {valid}") from None
        if not (0.0 <= self.p < 1.0):
            raise ConfigError(f"policy.p must lie in [0, 1), got {self.p}")
        if not isinstance(self.T, int) or self.T < 1:
            raise ConfigError(f"policy.T must be a positive integer, got {self.T!r}")
        if self.k is not None and (not isinstance(self.k, int) or self.k < 1):
            raise ConfigError(f"policy.k must be a positive integer, got {self.k!r}")

    def layers_per_epoch(self, num_layers: int) -> int:
        return self.k if self.k is not None else math.ceil(num_layers / self.T)


@dataclass
class GradMask:
    """Boolean support for every parameter plus the survivor scale.

    ``support`` may hold read-only broadcast views; callers must not write
    into it.
    """

    support: dict[str, np.ndarray]
    layer_of: dict[str, int]
    maskable: frozenset[str]
    scale: float = 1.0


@dataclass
class MaskState:
    seed: int
    epoch: int = 0
    batch: int = 0
    p: float | None = None
    order: dict[str, np.ndarray] = field(default_factory=dict)
    jitter: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)


def anneal_p(epoch: int, T: int) -> float:
    """Linearly decayed dropout rate, clamped at zero."""
    return max(0.0, ANNEAL_START - epoch / T)


def _full(params: ParamSet, active: dict[str, np.ndarray], scale: float = 1.0) -> GradMask:
    support = {}
    for p in params:
        if p.maskable and p.name in active:
            support[p.name] = active[p.name]
        else:
            support[p.name] = np.broadcast_to(np.True_, p.tensor.shape)
    return GradMask(support, params.layer_of(), frozenset(q.name for q in params.maskable()), scale)


def all_active(params: ParamSet) -> GradMask:
    return _full(params, {})


def _layer_mask(params: ParamSet, on_layers) -> GradMask:
    on_layers = set(on_layers)
    return _full(params, {
        p.name: np.broadcast_to(np.bool_(p.layer in on_layers), p.tensor.shape) for p in params.maskable()
    })


def sample_batch_mask(state: MaskState, policy: MaskPolicy, params: ParamSet) -> GradMask:
    """Fresh Bernoulli mask for the next mini-batch of the current epoch."""
    if policy.kind not in PER_BATCH:
        raise ContractError(f"{policy.kind.value} does not draw per-batch masks")
    p = state.p if policy.kind in ANNEALED and state.p is not None else policy.p
    if policy.kind in ANNEALED and state.p is None:
        raise ContractError("advance_epoch must run before sampling annealed masks")
    batch = state.batch
    state.batch += 1
    scale = 1.0 / (1.0 - p) if policy.scale_grads else 1.0
    if policy.kind in LAYERWISE:
        on = [
            layer for layer in range(1, params.num_layers + 1)
            if keyed_rng(state.seed, state.epoch, batch, "layer", layer).random() >= p
        ]
        mask = _layer_mask(params, on)
        mask.scale = scale
        return mask
    active = {
        q.name: keyed_rng(state.seed, state.epoch, batch, q.name).random(q.tensor.shape) >= p
        for q in params.maskable()
    }
    return _full(params, active, scale)


def _unfrozen_count(epoch: int, T: int, size: int, jitter: float) -> int:
    # epoch*size/T entries, fractional part rounded up with probability equal
    # to itself using a per-tensor threshold fixed for the whole run, so the
    # count is non-decreasing in epoch and exact whenever epoch*size/T is integral
    q, r = divmod(min(epoch, T) * size, T)
    return q + (1 if r / T > jitter else 0)


def _epoch_sets(state: MaskState, policy: MaskPolicy, params: ParamSet) -> dict[str, np.ndarray]:
    active = {}
    for q in params.maskable():
        if q.name not in state.order:
            rng = keyed_rng(state.seed, "unfreeze-order", q.name)
            state.order[q.name] = rng.permutation(q.tensor.size)
            state.jitter[q.name] = float(rng.random())
            state.counts[q.name] = 0
        order = state.order[q.name]
        prev = state.counts[q.name]
        now = _unfrozen_count(state.epoch, policy.T, q.tensor.size, state.jitter[q.name])
        state.counts[q.name] = now
        picked = order[prev:now] if policy.kind is PolicyKind.EPOCH_TOGGLE else order[:now]
        support = np.zeros(q.tensor.size, dtype=bool)
        support[picked] = True
        active[q.name] = support.reshape(q.tensor.shape)
    return active


def freeze_layers(policy: MaskPolicy, epoch: int, num_layers: int) -> list[int]:
    """Encoder layers (1-based, 1 = bottom) whose gradients flow at ``epoch``."""
    k = policy.layers_per_epoch(num_layers)
    L = num_layers
    if policy.kind is PolicyKind.FREEZE_TOPDOWN:
        return list(range(L - min(k * epoch, L) + 1, L + 1))
    if policy.kind is PolicyKind.FREEZE_BOTTOMUP:
        return list(range(1, min(k * epoch, L) + 1))
    if policy.kind is PolicyKind.FREEZE_TOGGLE_TOPDOWN:
        # once the windows run past the bottom, keep training the last one
        window = min(epoch - 1, math.ceil(L / k) - 1)
        top = L - window * k
        return list(range(max(top - k + 1, 1), top + 1))
    raise ContractError(f"{policy.kind.value} is not a freeze schedule")


def advance_epoch(state: MaskState, policy: MaskPolicy, params: ParamSet) -> GradMask | None:
    """Move to the next epoch and return the mask fixed for it.

    Per-batch policies return ``None``; annealed ones also update the
    dropout rate in ``state``.
    """
    if state.epoch + 1 > policy.T:
        raise ContractError(f"epoch {state.epoch + 1} exceeds T={policy.T}")
    state.epoch += 1
    state.batch = 0
    kind = policy.kind
    if kind in ANNEALED:
        state.p = anneal_p(state.epoch, policy.T)
        return None
    if kind in PER_BATCH:
        state.p = policy.p
        return None
    if kind is PolicyKind.SFT:
        return all_active(params)
    if kind in RANDOM_EPOCH:
        return _full(params, _epoch_sets(state, policy, params))
    return _layer_mask(params, freeze_layers(policy, state.epoch, params.num_layers))


def apply_mask(grads: dict[str, np.ndarray], mask: GradMask) -> dict[str, np.ndarray]:
    """Zero masked gradient entries and scale the survivors of maskable parameters."""
    out = {}
    for name, g in grads.items():
        if name not in mask.support:
            raise ContractError(f"mask has no entry for parameter {name!r}")
        support = mask.support[name]
        if support.shape != g.shape:
            raise ContractError(f"{name}: mask shape {support.shape} != gradient shape {g.shape}")
        if name not in mask.maskable:
            out[name] = g
        elif mask.scale == 1.0:
            out[name] = np.where(support, g, 0.0)
        else:
            out[name] = np.where(support, g * mask.scale, 0.0)
    return out


def layer_counts(mask: GradMask) -> dict[int, tuple[int, int]]:
    """``layer -> (active entries, total entries)``."""
    counts: dict[int, list[int]] = {}
    for name, support in mask.support.items():
        c = counts.setdefault(mask.layer_of[name], [0, 0])
        c[0] += int(np.count_nonzero(support))
        c[1] += support.size
    return {layer: (a, t) for layer, (a, t) in sorted(counts.items())}


def active_fraction(mask: GradMask) -> dict[int, float]:
    return {layer: float(Fraction(a, t)) for layer, (a, t) in layer_counts(mask).items()}
