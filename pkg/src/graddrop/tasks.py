"""Seeded synthetic corpora and classification tasks.

All sequences come from a first-order Markov chain over the vocabulary whose
transition matrix is drawn from the data seed, so a model pretrained on the
unlabeled corpus sees the same token statistics during fine-tuning.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .rng import keyed_rng

DATASET_SCHEMA = "graddrop-dataset"
DATASET_VERSION = 1
TASK_KINDS = ("majority-token", "first-last-match", "windowed-parity")

# designated tokens for majority-token: label 0 = "a-majority", 1 = "b-majority"
MAJORITY_A, MAJORITY_B = 0, 1
PARITY_WINDOW = 4
MAJORITY_RATE = 0.3


@dataclass
class Dataset:
    sequences: np.ndarray  # (count, n) int64
    labels: np.ndarray | None  # (count,) int64, None for unlabeled corpora
    split: str
    seed: int
    vocab: int
    kind: str = "language"

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n(self) -> int:
        return self.sequences.shape[1]


def markov_chain(vocab: int, seed: int, concentration: float = 0.2) -> np.ndarray:
    """Row-stochastic ``vocab x vocab`` transition matrix (sparse-ish Dirichlet rows)."""
    if vocab < 8:
        raise ConfigError(f"vocab must be at least 8, got {vocab}")
    rng = keyed_rng(seed, "markov-chain", vocab)
    return rng.dirichlet(np.full(vocab, concentration), size=vocab)


def sample_chain(P: np.ndarray, n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    vocab = P.shape[0]
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    seqs = np.empty((count, n), dtype=np.int64)
    seqs[:, 0] = rng.integers(0, vocab, size=count)
    for t in range(1, n):
        u = rng.random(count)
        rows = cum[seqs[:, t - 1]]
        seqs[:, t] = np.minimum((rows < u[:, None]).sum(axis=1), vocab - 1)
    return seqs


def gen_synthetic_language(vocab: int, n: int, count: int, seed: int, split: str = "train") -> Dataset:
    P = markov_chain(vocab, seed)
    seqs = sample_chain(P, n, count, keyed_rng(seed, "language", split))
    return Dataset(seqs, None, split, seed, vocab)


def label_sequences(kind: str, seqs: np.ndarray) -> np.ndarray:
    """Labels for ``kind``; majority-token ties map to -1 (invalid)."""
    seqs = np.asarray(seqs)
    if kind == "majority-token":
        diff = (seqs == MAJORITY_A).sum(axis=1) - (seqs == MAJORITY_B).sum(axis=1)
        return np.where(diff > 0, 0, np.where(diff < 0, 1, -1))
    if kind == "first-last-match":
        return (seqs[:, 0] == seqs[:, -1]).astype(np.int64)
    if kind == "windowed-parity":
        return ((seqs[:, :PARITY_WINDOW] % 2).sum(axis=1) % 2).astype(np.int64)
    raise ConfigError(f"unknown task kind {kind!r}; expected one of {', '.join(TASK_KINDS)}")


def _propose(kind: str, P: np.ndarray, n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    seqs = sample_chain(P, n, count, rng)
    if kind == "majority-token":
        hit = rng.random(seqs.shape) < MAJORITY_RATE
        seqs[hit] = rng.choice([MAJORITY_A, MAJORITY_B], size=int(hit.sum()))
    elif kind == "first-last-match":
        copy = rng.random(count) < 0.5
        seqs[copy, -1] = seqs[copy, 0]
    return seqs


def gen_classification_task(
    kind: str,
    n: int,
    count: int,
    seed: int,
    vocab: int = 32,
    split: str = "train",
    exclude: np.ndarray | None = None,
) -> Dataset:
    """Balanced binary task: exactly ``count // 2`` sequences of class 0.

    Candidates are drawn from the seed's Markov chain (with a kind-specific
    perturbation so both classes are common) and accepted while their class
    quota is open. Rows of ``exclude`` are never emitted, which keeps test
    splits disjoint from training splits.
    """
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {', '.join(TASK_KINDS)}")
    if kind == "windowed-parity" and n < PARITY_WINDOW:
        raise ConfigError(f"windowed-parity needs n >= {PARITY_WINDOW}")
    if n < 2:
        raise ConfigError("classification tasks need n >= 2")
    P = markov_chain(vocab, seed)
    rng = keyed_rng(seed, "task", kind, split)
    quota = [count // 2, count - count // 2]
    seen = set() if exclude is None else {row.tobytes() for row in np.asarray(exclude, dtype=np.int64)}
    chosen: list[np.ndarray] = []
    labels: list[int] = []
    while quota[0] or quota[1]:
        cand = _propose(kind, P, n, max(256, 2 * (quota[0] + quota[1])), rng)
        for seq, y in zip(cand, label_sequences(kind, cand)):
            if y < 0 or not quota[y]:
                continue
            key = seq.tobytes()
            if key in seen:
                continue
            seen.add(key)
            chosen.append(seq)
            labels.append(int(y))
            quota[y] -= 1
    order = rng.permutation(count)
    seqs = np.array(chosen, dtype=np.int64).reshape(count, n)[order]
    return Dataset(seqs, np.array(labels, dtype=np.int64)[order], split, seed, vocab, kind)


def make_splits(kind: str, n: int, train_size: int, test_size: int, seed: int, vocab: int = 32) -> tuple[Dataset, Dataset]:
    train = gen_classification_task(kind, n, train_size, seed, vocab, "train")
    test = gen_classification_task(kind, n, test_size, seed, vocab, "test", exclude=train.sequences)
    return train, test


def save_dataset(ds: Dataset, path) -> None:
    """Line-delimited JSON: a header object, then ``{"tokens": [...], "label": int}`` per row."""
    path = Path(path)
    header = {
        "schema": DATASET_SCHEMA, "version": DATASET_VERSION, "kind": ds.kind,
        "split": ds.split, "seed": ds.seed, "vocab": ds.vocab, "n": ds.n, "count": len(ds),
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, seq in enumerate(ds.sequences):
            label = None if ds.labels is None else int(ds.labels[i])
            fh.write(json.dumps({"tokens": seq.tolist(), "label": label}) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != DATASET_SCHEMA:
            raise InputError(f"{path}: not a graddrop dataset file")
        if header.get("version") != DATASET_VERSION:
            raise InputError(f"{path}: unsupported dataset version {header.get('version')}")
        rows = [json.loads(line) for line in fh if line.strip()]
    seqs = np.array([r["tokens"] for r in rows], dtype=np.int64).reshape(len(rows), header["n"])
    labels = [r["label"] for r in rows]
    if any(y is None for y in labels):
        y_arr = None
    else:
        y_arr = np.array(labels, dtype=np.int64)
    if seqs.size and (seqs.min() < 0 or seqs.max() >= header["vocab"]):
        raise InputError(f"{path}: token ids outside [0, {header['vocab']})")
    return Dataset(seqs, y_arr, header["split"], header["seed"], header["vocab"], header["kind"])
