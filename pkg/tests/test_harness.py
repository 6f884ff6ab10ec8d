import csv
import json
import math

import numpy as np
import pytest
from scipy import stats as sps

from graddrop.errors import ConfigError, InputError, NumericalAbort
from graddrop.gradmask import MaskPolicy, PolicyKind
from graddrop.harness import (
    PretrainConfig,
    RunConfig,
    RunRecord,
    Seeds,
    TaskConfig,
    compare_policies,
    compare_sweep,
    config_from_dict,
    export_timeline,
    grid_configs,
    load_config,
    run_experiment,
    run_grid,
)
from graddrop.optim import OptimConfig
from graddrop.stats import paired_ttest
from graddrop.transformer import ModelConfig

TINY_MODEL = ModelConfig(d=8, l=4, o=8, n_a=2, d_a=4, L=2, vocab=32, max_len=8)


def tiny(kind=PolicyKind.SFT, epochs=2, train=64, test=32, seed=0, **policy):
    return RunConfig(
        epochs=epochs,
        batch_size=16,
        model=TINY_MODEL,
        policy=MaskPolicy(kind, T=epochs, **policy),
        seeds=Seeds(seed, seed, seed),
        task=TaskConfig(n=8, train_size=train, test_size=test),
    )


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_single_sample_sft_run(tmp_path):
    cfg = tiny(epochs=1, train=1, test=4)
    rec = run_experiment(cfg, tmp_path)
    assert len(rec.entries) == 1
    e = rec.entries[0]
    assert e["p_effective"] == 0.0
    assert set(e["active_fraction"].values()) == {1.0}
    for name in ("config.json", "metrics.jsonl", "summary.json", "model.ckpt"):
        assert (tmp_path / name).exists()
    assert json.loads((tmp_path / "metrics.jsonl").read_text()) == e


def test_metrics_schema(tmp_path):
    rec = run_experiment(tiny(PolicyKind.GRADDROP, p=0.3), tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for line, e in zip(lines, rec.entries):
        obj = json.loads(line)
        assert set(obj) == {"epoch", "policy", "p_effective", "train_loss", "test_accuracy", "active_fraction"}
        assert obj["policy"] == "GradDrop" and obj["p_effective"] == 0.3
        assert set(obj["active_fraction"]) == {"0", "1", "2", "3"}
        assert "wall_time" not in obj
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["wall_time"]) == 2 and summary["status"] == "completed"


def test_extreme_dropout_masks_nearly_everything():
    seen = []

    def hook(epoch, batch, mask, params):
        for name in mask.maskable:
            seen.append(mask.support[name].mean())

    run_experiment(tiny(PolicyKind.GRADDROP, epochs=1, p=0.999), on_step=hook)
    assert np.mean(seen) < 0.01


def test_rerun_is_byte_identical(tmp_path):
    for kind in (PolicyKind.GRADDROP, PolicyKind.EPOCH_TOGGLE, PolicyKind.ANNEAL_LAYER_GRADDROP):
        cfg = tiny(kind, epochs=3)
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
        assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()


def test_config_from_dict_defaults_and_errors(tmp_path):
    cfg = config_from_dict({"epochs": 4, "policy": {"kind": "FreezeTopDown"}})
    assert cfg.policy.T == 4 and cfg.policy.kind is PolicyKind.FREEZE_TOPDOWN
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"epoch": 3})
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"model": {"depth": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"epochs": 4, "policy": {"T": 5}})
    with pytest.raises(ConfigError):
        config_from_dict({"version": 2})
    with pytest.raises(ConfigError):
        config_from_dict({"task": {"n": 40}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(tiny().to_dict()))
    assert load_config(path) == tiny()
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_nan_loss_aborts(tmp_path):
    cfg = tiny(epochs=2).replace(optim=OptimConfig(lr=1e30, momentum=0.0))
    with pytest.raises(NumericalAbort):
        run_experiment(cfg, tmp_path)
    last = json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[-1])
    assert last["event"] == "nan_abort"
    assert RunRecord.load(tmp_path).status == "aborted"


def test_grid_marks_aborted_cells(tmp_path):
    base = tiny(epochs=2).replace(optim=OptimConfig(lr=1e30, momentum=0.0))
    results = run_grid(grid_configs(base, ["SFT"], [0], tmp_path))
    assert results == [(str(tmp_path / "SFT" / "seed0"), "aborted")]


def test_ttest_matches_scipy():
    d = np.array([2.0, -1.0, 3.0, 0.0, 1.0])
    res = paired_ttest(d)
    ref = sps.ttest_rel(d, np.zeros_like(d))
    assert res.t == pytest.approx(ref.statistic, abs=1e-12)
    assert res.p_value == pytest.approx(ref.pvalue, abs=1e-12)
    assert res.t == pytest.approx(math.sqrt(2), abs=1e-12)


def test_ttest_degenerate_cases():
    zero = paired_ttest([0.0, 0.0, 0.0])
    assert zero.degenerate and zero.t == 0.0
    const = paired_ttest([0.1, 0.1, 0.1])
    assert const.degenerate and const.t == math.inf
    neg = paired_ttest([-0.1, -0.1])
    assert neg.t == -math.inf
    with pytest.raises(InputError):
        paired_ttest([1.0])


def _record(policy, seed, final, task="majority-token"):
    cfg = tiny(PolicyKind(policy), seed=seed).to_dict()
    cfg["task"]["kind"] = task
    return RunRecord(cfg, [{"epoch": 1, "test_accuracy": final}])


def test_compare_pairs_by_seed():
    recs = [_record("SFT", s, 0.8 + 0.01 * s) for s in range(4)]
    recs += [_record("GradDrop", s, 0.8 + 0.02 * s) for s in reversed(range(4))]
    rows = compare_sweep(recs)
    assert len(rows) == 1
    ref = paired_ttest([0.01 * s for s in range(4)])
    assert rows[0]["t"] == pytest.approx(ref.t, abs=1e-12)
    with pytest.raises(InputError, match="unmatched"):
        compare_policies([(recs[0], recs[5]), (recs[1], recs[6])])
    with pytest.raises(InputError):
        compare_sweep(recs + [_record("GradDrop", 9, 0.5)])
    with pytest.raises(InputError):
        compare_sweep([r for r in recs if r.policy != "SFT"])


def test_export_sft_all_active(tmp_path):
    rec = run_experiment(tiny(epochs=2))
    export_timeline(rec, tmp_path, figures=False)
    rows = read_csv(tmp_path / "timeline_layers.csv")
    assert rows[0] == ["epoch", "layer_0", "layer_1", "layer_2", "layer_3"]
    assert all(float(v) == 1.0 for r in rows[1:] for v in r[1:])
    metrics = read_csv(tmp_path / "timeline_metrics.csv")
    assert metrics[0] == ["epoch", "train_loss", "test_accuracy", "p_effective"]
    assert len(metrics) == 3


def test_export_freeze_topdown_is_triangular(tmp_path):
    model = ModelConfig(d=8, l=4, o=8, n_a=1, d_a=8, L=4, vocab=32, max_len=8)
    cfg = tiny(PolicyKind.FREEZE_TOPDOWN, epochs=4, k=1).replace(model=model)
    rec = run_experiment(cfg)
    written = export_timeline(rec, tmp_path)
    assert all(p.exists() for p in written) and len(written) == 4
    rows = read_csv(tmp_path / "timeline_layers.csv")
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    encoder = mat[:, 1:5]
    # epoch e activates the top e encoder layers
    expected = np.array([[1.0 if layer > 4 - e else 0.0 for layer in range(1, 5)] for e in range(1, 5)])
    np.testing.assert_array_equal(encoder, expected)
    assert np.all(mat[:, 0] == 1.0) and np.all(mat[:, 5] == 1.0)
    p_col = [r[3] for r in read_csv(tmp_path / "timeline_metrics.csv")[1:]]
    assert p_col == ["", "", "", ""]


def test_export_graddrop_epoch_fractions(tmp_path):
    rec = run_experiment(tiny(PolicyKind.GRADDROP_EPOCH, epochs=5, train=32))
    export_timeline(rec, tmp_path, figures=False)
    rows = read_csv(tmp_path / "timeline_layers.csv")[1:]
    for e, r in enumerate(rows, start=1):
        for v in r[2:-1]:
            assert float(v) == pytest.approx(e / 5, abs=0.01)


def test_record_roundtrip(tmp_path):
    rec = run_experiment(tiny(PolicyKind.ANNEAL_GRADDROP, epochs=3), tmp_path)
    back = RunRecord.load(tmp_path)
    assert back.entries == rec.entries
    assert [e["p_effective"] for e in back.entries] == pytest.approx([0.9 - 1 / 3, 0.9 - 2 / 3, 0.0])
    with pytest.raises(InputError):
        RunRecord.load(tmp_path / "missing")


def test_pretrain_writes_checkpoint(tmp_path):
    cfg = tiny(epochs=1).replace(pretrain=PretrainConfig(enabled=True, epochs=1, corpus_size=32))
    run_experiment(cfg, tmp_path)
    assert (tmp_path / "pretrained.ckpt").exists()
