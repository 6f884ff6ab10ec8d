"""Experiment driver: run configs, training loops, metrics files and comparisons.

A run directory contains

``config.json``
    the fully resolved run config;
``metrics.jsonl``
    one JSON object per finished epoch, appended and flushed as training
    goes (a numerical abort appends an ``{"event": "nan_abort"}`` line);
``summary.json``
    status, best/final accuracy and per-epoch wall-clock times;
``model.ckpt`` (and ``pretrained.ckpt``)
    checkpoints in the :mod:`graddrop.transformer` format.

Wall-clock times live only in ``summary.json`` so that ``metrics.jsonl`` is
byte-identical across repeated runs of one config.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import plotting
from .errors import ConfigError, InputError, NumericalAbort
from .gradmask import (
    PER_BATCH,
    GradMask,
    MaskPolicy,
    MaskState,
    PolicyKind,
    advance_epoch,
    layer_counts,
    sample_batch_mask,
)
from .optim import SGD, OptimConfig
from .rng import keyed_rng
from .stats import TTest, paired_ttest
from .tasks import TASK_KINDS, gen_synthetic_language, make_splits
from .tensor import Tensor, add, cross_entropy, embedding_lookup, matmul, reshape
from .transformer import (
    ModelConfig,
    Param,
    ParamSet,
    classification_loss,
    encode,
    init_params,
    predict,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    mask: int = 0


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "majority-token"
    n: int = 16
    train_size: int = 2000
    test_size: int = 1000

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {', '.join(TASK_KINDS)}, got {self.kind!r}")
        for name in ("n", "train_size", "test_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"task.{name} must be positive")


@dataclass(frozen=True)
class PretrainConfig:
    enabled: bool = False
    epochs: int = 2
    corpus_size: int = 2000
    mask_rate: float = 0.15
    lr: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.mask_rate < 1.0):
            raise ConfigError(f"pretrain.mask_rate must lie in (0, 1), got {self.mask_rate}")


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    epochs: int = 10
    batch_size: int = 32
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: MaskPolicy = field(default_factory=MaskPolicy)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seeds: Seeds = field(default_factory=Seeds)
    task: TaskConfig = field(default_factory=TaskConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    output_dir: str | None = None

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.policy.T != self.epochs:
            raise ConfigError(f"policy.T ({self.policy.T}) must equal epochs ({self.epochs})")
        if self.task.n > self.model.max_len:
            raise ConfigError(f"task.n ({self.task.n}) exceeds model.max_len ({self.model.max_len})")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["policy"]["kind"] = self.policy.kind.value
        return out

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "model": ModelConfig,
    "policy": MaskPolicy,
    "optim": OptimConfig,
    "seeds": Seeds,
    "task": TaskConfig,
    "pretrain": PretrainConfig,
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    """Build a :class:`RunConfig`; every key is optional, unknown keys are errors.

    ``policy.T`` defaults to ``epochs``.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {k: v for k, v in raw.items() if k not in _SECTIONS}
    epochs = kwargs.get("epochs", RunConfig.epochs)
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name, {}) or {})
        if name == "policy":
            section.setdefault("T", epochs)
        kwargs[name] = _build(cls, section, name)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


@dataclass
class RunRecord:
    config: dict
    entries: list[dict] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    status: str = "completed"

    @property
    def policy(self) -> str:
        return self.config["policy"]["kind"]

    @property
    def accuracies(self) -> list[float]:
        return [e["test_accuracy"] for e in self.entries]

    def summary(self) -> dict:
        acc = self.accuracies
        out = {"status": self.status, "policy": self.policy, "seeds": self.config["seeds"],
               "task": self.config["task"]["kind"], "epochs_completed": len(self.entries)}
        if acc:
            best = int(np.argmax(acc))
            out.update(best_accuracy=acc[best], best_epoch=self.entries[best]["epoch"], final_accuracy=acc[-1])
        out["wall_time"] = self.wall_time
        return out

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        run_dir = Path(run_dir)
        try:
            config = json.loads((run_dir / "config.json").read_text())
            entries, status = [], "completed"
            with (run_dir / "metrics.jsonl").open() as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    if obj.get("event") == "nan_abort":
                        status = "aborted"
                    else:
                        entries.append(obj)
            summary_path = run_dir / "summary.json"
            summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
        except FileNotFoundError as exc:
            raise InputError(f"{run_dir}: incomplete run directory ({exc.filename} missing)") from exc
        return cls(config, entries, summary.get("wall_time", []), [], summary.get("status", status))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


class MetricsWriter:
    """Append-only JSONL writer; every line is flushed as soon as it is written."""

    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, obj: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(_dump(obj) + "\n")
            fh.flush()


def _mlm_head(cfg: ModelConfig, seed: int) -> list[Param]:
    rng = keyed_rng(seed, "mlm-head")
    bound = 1.0 / math.sqrt(cfg.d)
    return [
        Param("mlm.W", cfg.L + 1, Tensor(rng.uniform(-bound, bound, (cfg.d, cfg.vocab)), requires_grad=True), False),
        Param("mlm.b", cfg.L + 1, Tensor(np.zeros(cfg.vocab), requires_grad=True), False),
    ]


def mlm_loss(params: ParamSet, tokens: np.ndarray, rng: np.random.Generator, cfg: ModelConfig, rate: float) -> Tensor:
    """Masked-token prediction: replace ~``rate`` of positions by the mask token and predict the originals."""
    B, n = tokens.shape
    hide = rng.random((B, n)) < rate
    # at least one prediction target per sequence
    force = rng.integers(0, n, size=B)
    hide[np.arange(B), force] = True
    inputs = np.where(hide, cfg.mask_token, tokens)
    h = reshape(encode(params, inputs, cfg, allow_mask=True), (B * n, cfg.d))
    rows = np.flatnonzero(hide.reshape(-1))
    logits = add(matmul(embedding_lookup(h, rows), params["mlm.W"]), params["mlm.b"])
    return cross_entropy(logits, tokens.reshape(-1)[rows])


def pretrain(params: ParamSet, cfg: RunConfig) -> list[float]:
    """Masked-token pretraining on the seed's Markov corpus; the prediction head is discarded afterwards."""
    pc = cfg.pretrain
    corpus = gen_synthetic_language(cfg.model.vocab, cfg.task.n, pc.corpus_size, cfg.seeds.data, split="pretrain")
    body = ParamSet([p for p in params if not p.name.startswith("head.")], num_layers=params.num_layers)
    full = body.extend(_mlm_head(cfg.model, cfg.seeds.init))
    opt = SGD(full, OptimConfig(lr=pc.lr, momentum=cfg.optim.momentum, weight_decay=cfg.optim.weight_decay))
    losses = []
    for epoch in range(1, pc.epochs + 1):
        order = keyed_rng(cfg.seeds.data, "pretrain-shuffle", epoch).permutation(len(corpus))
        mask_rng = keyed_rng(cfg.seeds.init, "pretrain-mask", epoch)
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = corpus.sequences[order[start:start + cfg.batch_size]]
            loss = mlm_loss(full, batch, mask_rng, cfg.model, pc.mask_rate)
            if not np.isfinite(loss.item()):
                raise NumericalAbort(f"non-finite pretraining loss at epoch {epoch}")
            loss.backward()
            opt.step(None)
            total += loss.item() * len(batch)
        losses.append(total / len(corpus))
        logger.info("pretrain epoch %d loss %.4f", epoch, losses[-1])
    return losses


def _accumulate(acc: dict[int, list[int]], mask: GradMask) -> None:
    for layer, (a, t) in layer_counts(mask).items():
        c = acc.setdefault(layer, [0, 0])
        c[0] += a
        c[1] += t


def _p_effective(policy: MaskPolicy, state: MaskState) -> float | None:
    if policy.kind is PolicyKind.SFT:
        return 0.0
    if policy.kind in PER_BATCH:
        return state.p
    return None


StepHook = Callable[[int, int, GradMask | None, ParamSet], None]


def run_experiment(
    cfg: RunConfig,
    out_dir=None,
    masking: bool = True,
    on_step: StepHook | None = None,
    params: ParamSet | None = None,
) -> RunRecord:
    """Pretrain (optionally), then fine-tune under ``cfg.policy`` and record per-epoch metrics.

    ``masking=False`` bypasses every mask and takes the plain SGD path.
    ``on_step(epoch, batch, mask, params)`` runs after each optimizer step.
    Output goes to ``out_dir`` (falling back to ``cfg.output_dir``); with
    neither, nothing is written.
    """
    out = Path(out_dir) if out_dir is not None else (Path(cfg.output_dir) if cfg.output_dir else None)
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        writer = MetricsWriter(out / "metrics.jsonl" if out else None)
    except OSError as exc:
        raise OSError(f"cannot write run directory {out}: {exc}") from exc

    record = RunRecord(cfg.to_dict())
    train, test = make_splits(cfg.task.kind, cfg.task.n, cfg.task.train_size, cfg.task.test_size,
                              cfg.seeds.data, cfg.model.vocab)
    if params is None:
        params = init_params(cfg.model, cfg.seeds.init)
    if cfg.pretrain.enabled:
        pretrain(params, cfg)
        if out is not None:
            save_checkpoint(params, out / "pretrained.ckpt")

    policy = cfg.policy
    state = MaskState(seed=cfg.seeds.mask)
    opt = SGD(params, cfg.optim)
    per_batch = policy.kind in PER_BATCH
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        epoch_mask = advance_epoch(state, policy, params)
        order = keyed_rng(cfg.seeds.data, "shuffle", epoch).permutation(len(train))
        counts: dict[int, list[int]] = {}
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss = classification_loss(params, train.sequences[idx], train.labels[idx], cfg.model)
            value = loss.item()
            if not np.isfinite(value):
                record.status = "aborted"
                writer.write({"event": "nan_abort", "epoch": epoch, "batch": b, "loss": str(value)})
                _finish(record, out)
                raise NumericalAbort(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            mask = sample_batch_mask(state, policy, params) if per_batch else epoch_mask
            if masking:
                opt.step(mask)
                _accumulate(counts, mask)
            else:
                opt.step(None)
            record.step_losses.append(value)
            total += value * len(idx)
            if on_step is not None:
                on_step(epoch, b, mask if masking else None, params)
        acc = float(np.mean(predict(params, test.sequences, cfg.model) == test.labels))
        fractions = {str(layer): float(Fraction(a, t)) for layer, (a, t) in sorted(counts.items())}
        if not masking:
            fractions = {str(layer): 1.0 for layer in range(cfg.model.L + 2)}
        entry = {
            "epoch": epoch,
            "policy": policy.kind.value,
            "p_effective": _p_effective(policy, state) if masking else 0.0,
            "train_loss": total / len(train),
            "test_accuracy": acc,
            "active_fraction": fractions,
        }
        record.entries.append(entry)
        record.wall_time.append(time.perf_counter() - t0)
        writer.write(entry)
        logger.info("epoch %d loss %.4f acc %.4f", epoch, entry["train_loss"], acc)
    if out is not None:
        save_checkpoint(params, out / "model.ckpt")
    _finish(record, out)
    return record


def _finish(record: RunRecord, out: Path | None) -> None:
    if out is not None:
        (out / "summary.json").write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")


def _pair_key(record: RunRecord) -> tuple:
    s = record.config["seeds"]
    return (s["data"], s["init"], record.config["task"]["kind"])


def compare_policies(pairs: list[tuple[RunRecord, RunRecord]], metric: str = "final_accuracy") -> TTest:
    """Paired t-test of ``treatment - baseline`` over ``(baseline, treatment)`` pairs."""
    if len(pairs) < 2:
        raise InputError(f"need at least 2 matched pairs, got {len(pairs)}")
    diffs = []
    for base, treat in pairs:
        if _pair_key(base) != _pair_key(treat):
            raise InputError(f"unmatched pair: {_pair_key(base)} vs {_pair_key(treat)}")
        if base.policy == treat.policy:
            raise InputError(f"pair compares {base.policy} with itself")
        diffs.append(treat.summary()[metric] - base.summary()[metric])
    return paired_ttest(diffs)


def compare_sweep(records: list[RunRecord], baseline: str = "SFT", metric: str = "final_accuracy") -> list[dict]:
    """One t-test row per non-baseline policy, pairing runs by (data seed, init seed, task)."""
    by_policy: dict[str, dict[tuple, RunRecord]] = {}
    for r in records:
        if r.status != "completed":
            continue
        by_policy.setdefault(r.policy, {})[_pair_key(r)] = r
    if baseline not in by_policy:
        raise InputError(f"no completed {baseline} runs to compare against")
    base = by_policy[baseline]
    rows = []
    for policy in sorted(by_policy):
        if policy == baseline:
            continue
        runs = by_policy[policy]
        keys = sorted(set(runs) & set(base))
        if set(runs) != set(keys):
            raise InputError(f"{policy}: runs without a matching {baseline} run: {sorted(set(runs) - set(base))}")
        res = compare_policies([(base[k], runs[k]) for k in keys], metric)
        rows.append({"policy": policy, "baseline": baseline, "metric": metric, "n": res.n,
                     "mean_diff": res.mean_diff, "sd_diff": res.sd_diff, "t": res.t,
                     "p_value": res.p_value, "degenerate": res.degenerate})
    return rows


def write_comparison(rows: list[dict], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "compare.csv"
    fields = ["policy", "baseline", "metric", "n", "mean_diff", "sd_diff", "t", "p_value", "degenerate"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    if rows:
        plotting.tstat_bars([r["policy"] for r in rows], [r["t"] for r in rows],
                            out_dir / "compare.png", baseline=rows[0]["baseline"])
    return path


def layer_matrix(record: RunRecord) -> tuple[list[int], np.ndarray]:
    """Epoch x layer matrix of active fractions."""
    layers = sorted({int(k) for e in record.entries for k in e["active_fraction"]})
    mat = np.array([[e["active_fraction"].get(str(layer), float("nan")) for layer in layers]
                    for e in record.entries])
    return layers, mat.reshape(len(record.entries), len(layers))


def export_timeline(record: RunRecord, out_dir, figures: bool = True) -> list[Path]:
    """Write ``timeline_layers.csv`` and ``timeline_metrics.csv`` (plus PNG figures).

    ``timeline_layers.csv``: header ``epoch,layer_0,...,layer_{L+1}``, one row
    per epoch with the active-gradient fraction of each layer.
    ``timeline_metrics.csv``: header ``epoch,train_loss,test_accuracy,p_effective``
    (``p_effective`` is empty for schedule-driven policies).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers, mat = layer_matrix(record)
    written = [out_dir / "timeline_layers.csv", out_dir / "timeline_metrics.csv"]
    with written[0].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"layer_{layer}" for layer in layers])
        for e, row in zip(record.entries, mat):
            w.writerow([e["epoch"]] + [repr(float(v)) for v in row])
    with written[1].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "test_accuracy", "p_effective"])
        for e in record.entries:
            p = e["p_effective"]
            w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["test_accuracy"]), "" if p is None else repr(p)])
    if figures and record.entries:
        epochs = [e["epoch"] for e in record.entries]
        plotting.layer_timeline(mat, layers, out_dir / "timeline_layers.png", title=record.policy)
        plotting.metric_curves(epochs, record.accuracies, [e["train_loss"] for e in record.entries],
                               out_dir / "timeline_metrics.png", title=record.policy)
        written += [out_dir / "timeline_layers.png", out_dir / "timeline_metrics.png"]
    return written


def grid_configs(base: RunConfig, policies: list[str], seeds: list[int], root) -> list[RunConfig]:
    """One config per (policy, seed); data, init and mask seeds all follow the cell seed."""
    root = Path(root)
    cells = []
    for kind in policies:
        policy = dataclasses.replace(base.policy, kind=PolicyKind(kind))
        for s in seeds:
            cells.append(base.replace(policy=policy, seeds=Seeds(s, s, s),
                                      output_dir=str(root / PolicyKind(kind).value / f"seed{s}")))
    return cells


def _run_cell(cfg: RunConfig) -> tuple[str, str]:
    try:
        run_experiment(cfg)
        return cfg.output_dir, "completed"
    except NumericalAbort:
        return cfg.output_dir, "aborted"


def run_grid(cells: list[RunConfig], workers: int = 1) -> list[tuple[str, str]]:
    if workers <= 1:
        return [_run_cell(c) for c in cells]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, cells))


def load_sweep(root) -> list[RunRecord]:
    root = Path(root)
    dirs = sorted(p.parent for p in root.rglob("metrics.jsonl"))
    if not dirs:
        raise InputError(f"no run directories under {root}")
    return [RunRecord.load(d) for d in dirs]


def sweep_overlay(records: list[RunRecord], path) -> None:
    curves = {}
    by_policy: dict[str, list[RunRecord]] = {}
    for r in records:
        if r.status == "completed" and r.entries:
            by_policy.setdefault(r.policy, []).append(r)
    for policy, runs in sorted(by_policy.items()):
        T = min(len(r.entries) for r in runs)
        curves[policy] = (list(range(1, T + 1)), np.mean([r.accuracies[:T] for r in runs], axis=0))
    if curves:
        plotting.accuracy_overlay(curves, path)

