"""Multi-head transformer encoder classifier built on :mod:`graddrop.tensor`.

Attention follows the un-conventional normalisation used by the method this
package reproduces: scores are ``(Q K / sqrt(d*l)) V^T Q^T`` with ``d`` the
model width and ``l`` the key width, rather than the usual ``sqrt(l)``.

Each encoder block is::

    Z_j   = softmax((Q K_j / sqrt(d l)) V_j^T Q^T) Q U_j      (per head)
    Z~    = concat(Z_1, ..., Z_na) W_o + b_o                  (back to width d)
    Z     = feedforward(layer_norm(Z~ + Q))

There is no second residual around the feedforward. A classifier mean-pools
the final block's output over positions and applies an affine head.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .tensor import (
    Tensor,
    add,
    concat_cols,
    cross_entropy,
    embedding_lookup,
    layer_norm,
    matmul,
    mean_pool,
    relu,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

CHECKPOINT_MAGIC = "graddrop-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    l: int = 16
    o: int = 32
    n_a: int = 2
    d_a: int = 16
    L: int = 4
    vocab: int = 32
    max_len: int = 16
    classes: int = 2
    ff_width: int | None = None  # defaults to 4 * d_a * n_a

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value is None:
                continue
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.o != self.d:
            raise ConfigError(f"model.o ({self.o}) must equal model.d ({self.d}) for the residual connection")
        if self.d < 2:
            raise ConfigError("model.d must be at least 2 for layer norm")

    @property
    def ff(self) -> int:
        return self.ff_width if self.ff_width is not None else 4 * self.d_a * self.n_a

    @property
    def mask_token(self) -> int:
        """Extra embedding row reserved for masked-token pretraining."""
        return self.vocab


@dataclass
class Param:
    name: str
    layer: int
    tensor: Tensor
    maskable: bool


class ParamSet:
    """Named parameters partitioned into layers.

    Layer 0 holds the embeddings, layers ``1..L`` the encoder blocks and
    layer ``L + 1`` the classifier head. Only encoder-layer parameters are
    maskable.
    """

    def __init__(self, entries: list[Param], num_layers: int):
        names = [p.name for p in entries]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique")
        self._entries = list(entries)
        self._by_name = {p.name: p for p in entries}
        self.num_layers = num_layers

    def __iter__(self) -> Iterator[Param]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def entry(self, name: str) -> Param:
        return self._by_name[name]

    def names(self) -> list[str]:
        return [p.name for p in self._entries]

    def maskable(self) -> list[Param]:
        return [p for p in self._entries if p.maskable]

    def layer_of(self) -> dict[str, int]:
        return {p.name: p.layer for p in self._entries}

    def in_layer(self, layer: int) -> list[Param]:
        return [p for p in self._entries if p.layer == layer]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p.tensor) for p in self._entries]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.tensor.data.copy() for p in self._entries}

    def extend(self, extra: list[Param]) -> "ParamSet":
        return ParamSet(self._entries + list(extra), self.num_layers)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    """Seeded initialisation: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    d, L = cfg.d, cfg.L
    entries = [
        Param("embed.token", 0, _uniform(rng, d, (cfg.vocab + 1, d)), False),
        Param("embed.pos", 0, _uniform(rng, d, (cfg.max_len, d)), False),
    ]
    for j in range(1, L + 1):
        pre = f"layer{j}"
        for h in range(cfg.n_a):
            entries += [
                Param(f"{pre}.head{h}.K", j, _uniform(rng, d, (d, cfg.l)), True),
                Param(f"{pre}.head{h}.V", j, _uniform(rng, d, (d, cfg.l)), True),
                Param(f"{pre}.head{h}.U", j, _uniform(rng, d, (d, cfg.d_a)), True),
            ]
        cat = cfg.n_a * cfg.d_a
        entries += [
            Param(f"{pre}.proj.W", j, _uniform(rng, cat, (cat, d)), True),
            Param(f"{pre}.proj.b", j, _zeros((d,)), True),
            Param(f"{pre}.ln.gain", j, Tensor(np.ones(d), requires_grad=True), True),
            Param(f"{pre}.ln.bias", j, _zeros((d,)), True),
            Param(f"{pre}.ff1.W", j, _uniform(rng, d, (d, cfg.ff)), True),
            Param(f"{pre}.ff1.b", j, _zeros((cfg.ff,)), True),
            Param(f"{pre}.ff2.W", j, _uniform(rng, cfg.ff, (cfg.ff, d)), True),
            Param(f"{pre}.ff2.b", j, _zeros((d,)), True),
        ]
    entries += [
        Param("head.W", L + 1, _uniform(rng, d, (d, cfg.classes)), False),
        Param("head.b", L + 1, _zeros((cfg.classes,)), False),
    ]
    return ParamSet(entries, L)


def reset_head(params: ParamSet, cfg: ModelConfig, seed: int) -> None:
    """Re-draw the classifier head in place (used after pretraining)."""
    rng = np.random.default_rng(seed)
    params["head.W"].data[...] = _uniform(rng, cfg.d, (cfg.d, cfg.classes)).data
    params["head.b"].data[...] = 0.0


def attention_weights(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """Row-stochastic ``n x n`` attention matrix of one head."""
    d = Q.shape[-1]
    if K.shape[0] != d or V.shape[0] != d or K.shape != V.shape:
        raise DimensionError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape} are inconsistent")
    l = K.shape[1]
    scores = matmul(matmul(scale(matmul(Q, K), 1.0 / math.sqrt(d * l)), transpose(V)), transpose(Q))
    return softmax_rows(scores)


def self_attention_head(Q: Tensor, K: Tensor, V: Tensor, U: Tensor) -> Tensor:
    if U.shape[0] != Q.shape[-1]:
        raise DimensionError(f"attention: U {U.shape} does not match Q {Q.shape}")
    return matmul(attention_weights(Q, K, V), matmul(Q, U))


def encoder_block(Q: Tensor, params: ParamSet, layer: int, cfg: ModelConfig) -> Tensor:
    pre = f"layer{layer}"
    heads = [
        self_attention_head(Q, params[f"{pre}.head{h}.K"], params[f"{pre}.head{h}.V"], params[f"{pre}.head{h}.U"])
        for h in range(cfg.n_a)
    ]
    cat = heads[0] if len(heads) == 1 else concat_cols(*heads)
    W = params[f"{pre}.proj.W"]
    if cat.shape[-1] != W.shape[0] or W.shape[1] != Q.shape[-1]:
        raise ConfigError(f"{pre}: concat width {cat.shape[-1]} cannot be projected by {W.shape}")
    z = add(matmul(cat, W), params[f"{pre}.proj.b"])
    h = layer_norm(add(z, Q), params[f"{pre}.ln.gain"], params[f"{pre}.ln.bias"])
    h = relu(add(matmul(h, params[f"{pre}.ff1.W"]), params[f"{pre}.ff1.b"]))
    return add(matmul(h, params[f"{pre}.ff2.W"]), params[f"{pre}.ff2.b"])


def _check_tokens(tokens: np.ndarray, cfg: ModelConfig, allow_mask: bool) -> None:
    if tokens.dtype.kind not in "iu":
        raise InputError(f"token ids must be integers, got dtype {tokens.dtype}")
    n = tokens.shape[-1]
    if n < 1 or n > cfg.max_len:
        raise InputError(f"sequence length {n} outside [1, {cfg.max_len}]")
    top = cfg.vocab + 1 if allow_mask else cfg.vocab
    if tokens.min() < 0 or tokens.max() >= top:
        raise InputError(f"token ids must lie in [0, {top}); got range [{tokens.min()}, {tokens.max()}]")


def encode(params: ParamSet, tokens, cfg: ModelConfig, allow_mask: bool = False) -> Tensor:
    """Token + positional embeddings through all encoder blocks.

    ``tokens`` is ``(n,)`` or a batch ``(B, n)`` of equal-length sequences;
    batched sequences are processed independently.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise InputError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    _check_tokens(tokens, cfg, allow_mask)
    n = tokens.shape[-1]
    positions = np.broadcast_to(np.arange(n), tokens.shape)
    x = add(embedding_lookup(params["embed.token"], tokens), embedding_lookup(params["embed.pos"], positions))
    for j in range(1, cfg.L + 1):
        x = encoder_block(x, params, j, cfg)
    return x


def forward_classify(params: ParamSet, tokens, cfg: ModelConfig) -> Tensor:
    """Logits of shape ``(classes,)`` for one sequence or ``(B, classes)`` for a batch."""
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    h = mean_pool(encode(params, tokens[None, :] if single else tokens, cfg))
    logits = add(matmul(h, params["head.W"]), params["head.b"])
    return reshape(logits, (cfg.classes,)) if single else logits


def classification_loss(params: ParamSet, tokens, labels, cfg: ModelConfig) -> Tensor:
    tokens = np.asarray(tokens)
    logits = forward_classify(params, tokens if tokens.ndim == 2 else tokens[None, :], cfg)
    return cross_entropy(logits, np.asarray(labels).reshape(-1))


def predict(params: ParamSet, tokens, cfg: ModelConfig, batch_size: int = 256) -> np.ndarray:
    tokens = np.asarray(tokens)
    out = []
    for start in range(0, len(tokens), batch_size):
        out.append(forward_classify(params, tokens[start:start + batch_size], cfg).data.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def save_checkpoint(params: ParamSet, path) -> None:
    """Write ``(name, shape, values)`` triples.

    Layout: one ASCII header line ``graddrop-checkpoint 1``, one JSON line
    listing ``{"name", "shape", "layer", "maskable"}`` per tensor in order,
    then the concatenated little-endian float64 values of every tensor in
    the same order (row-major).
    """
    index = [
        {"name": p.name, "shape": list(p.tensor.shape), "layer": p.layer, "maskable": p.maskable}
        for p in params
    ]
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode("ascii"))
        fh.write((json.dumps(index) + "\n").encode("utf-8"))
        for p in params:
            fh.write(np.ascontiguousarray(p.tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamSet:
    path = Path(path)
    with path.open("rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a graddrop checkpoint")
        if int(header[1]) != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {header[1]}")
        index = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    entries, offset = [], 0
    for item in index:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise InputError(f"{path}: truncated data for {item['name']}")
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
        entries.append(Param(item["name"], int(item["layer"]), Tensor(values, requires_grad=True), bool(item["maskable"])))
    if offset != len(blob):
        raise InputError(f"{path}: {len(blob) - offset} trailing bytes")
    num_layers = max(p.layer for p in entries) - 1 if entries else 0
    return ParamSet(entries, num_layers)


def load_into(params: ParamSet, other: ParamSet, names=None) -> None:
    """Copy values of matching names from ``other`` into ``params`` in place."""
    for name in names or other.names():
        if name in params:
            src = other[name].data
            if src.shape != params[name].shape:
                raise DimensionError(f"{name}: checkpoint shape {src.shape} != model shape {params[name].shape}")
            params[name].data[...] = src
