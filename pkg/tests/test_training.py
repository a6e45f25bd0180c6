import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridlock import numerics as nx
from gridlock.data import DriveSequence, SyntheticSpec, generate_synthetic
from gridlock.errors import NumericError, ParameterError, ValidationError
from gridlock.model import ModelConfig, init_params
from gridlock.numerics import Tape, Tensor, finite_diff_grad, max_relative_error
from gridlock.training import (
    AdamState,
    TrainConfig,
    ablate_bottleneck,
    adam_step,
    bench_inference,
    binned_errors,
    distance_mask,
    evaluate,
    fit,
    multi_task_loss,
    parse_sizes,
    rmse_loss,
    scheduled_lr,
    split_dataset,
    write_log_csv,
)

TINY = dict(model_dim=8, n_heads=2, n_layers=1, ffn_dim=12, dropout_rate=0.0, window=4)


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(SyntheticSpec(n_sequences=20, frames=8, n_concepts=6, width=16, seed=11))


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.learning_rate) == (30, 8, 1e-3)
    assert c.distance_cap == 70.0
    for bad in (dict(learning_rate=0), dict(epochs=0), dict(task_weights=(0, 0)), dict(lr_schedule="step")):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


def test_rmse_examples_and_gradient():
    assert rmse_loss(np.array([1.0, 3.0]), np.array([0.0, 0.0])).item() == pytest.approx(math.sqrt(5))
    assert rmse_loss(np.array([2.0]), np.array([2.0])).item() == 0.0
    x0 = np.random.default_rng(0).standard_normal(6)
    y = np.random.default_rng(1).standard_normal(6)
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        loss = rmse_loss(leaf, y)
    g = tape.backward(loss)[leaf]
    fd = finite_diff_grad(lambda x: float(np.sqrt(np.mean((x - y) ** 2))), x0)
    assert max_relative_error(g, fd) < 1e-6
    assert np.allclose(g, (x0 - y) / (6 * loss.item()))


def test_multi_task_loss_weights():
    la, ld = nx.as_tensor(np.array(2.0)), nx.as_tensor(np.array(3.0))
    assert multi_task_loss({"angle": la, "distance": ld}).item() == 5.0
    assert multi_task_loss({"angle": la, "distance": ld}, (0.5, 2.0)).item() == 7.0
    assert multi_task_loss({"distance": ld}).item() == 3.0


@pytest.mark.parametrize("n,sizes", [(100, (85, 5, 10)), (20, (17, 1, 2))])
def test_split_sizes(n, sizes):
    seqs = list(range(n))
    train, val, test = split_dataset(seqs, seed=3)
    assert (len(train), len(val), len(test)) == sizes
    assert sorted(train + val + test) == seqs
    assert split_dataset(seqs, seed=3) == (train, val, test)


def test_split_errors():
    with pytest.raises(ParameterError):
        split_dataset(list(range(10)), ratios=(0.5, 0.5, 0.5))
    with pytest.raises(ParameterError):
        split_dataset([1, 2])


def test_distance_cap_filters_only_distance():
    def seq(d):
        return DriveSequence("s", np.ones((2, 2)), np.ones((2, 3)), [0.1, d])

    seqs = [seq(10.0), seq(70.0), seq(71.0)]
    assert distance_mask(seqs).tolist() == [True, True, False]


def test_first_adam_step_is_signed_lr():
    cfg = ModelConfig(input_dim=5, **TINY)
    p = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    grads = {n: rng.standard_normal(t.shape) for n, t in p.tensors.items()}
    q, state = adam_step(p, grads, AdamState(), TrainConfig())
    assert state.step == 1
    for n in p.tensors:
        delta = q[n].data - p[n].data
        assert np.allclose(delta, -1e-3 * np.sign(grads[n]), rtol=1e-4, atol=1e-9)


def test_adam_rejects_nan_and_clips():
    cfg = ModelConfig(input_dim=5, **TINY)
    p = init_params(cfg, 0)
    grads = {n: np.zeros(t.shape) for n, t in p.tensors.items()}
    grads["cls"] = np.full(8, np.nan)
    with pytest.raises(NumericError, match="cls"):
        adam_step(p, grads, AdamState(), TrainConfig())
    grads["cls"] = np.full(8, 100.0)
    clipped, _ = adam_step(p, grads, AdamState(), TrainConfig(grad_clip=1.0))
    assert np.allclose(clipped["cls"].data - p["cls"].data, -1e-3, rtol=1e-4)


def test_scheduled_lr():
    const = TrainConfig()
    assert scheduled_lr(const, 17, 100) == 1e-3
    cos = TrainConfig(lr_schedule="cosine")
    assert scheduled_lr(cos, 0, 100) == 1e-3
    assert scheduled_lr(cos, 50, 100) == pytest.approx(5e-4)
    assert scheduled_lr(cos, 99, 100) < 1e-6


def test_fit_single_epoch_logs_one_row(small_data, tmp_path):
    cs = small_data.concept_set
    cfg = ModelConfig(input_dim=cs.k + 3, **TINY)
    seqs = small_data.sequences
    res = fit(seqs[:14], seqs[14:16], cs, cfg, TrainConfig(epochs=1, seed=0))
    assert len(res.log) == 1 and res.best_epoch == 1
    assert set(res.log[0].val_mae) == {"angle", "distance"}
    write_log_csv(res.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,task,metric,value" and len(lines) == 4


def test_fit_is_deterministic(small_data):
    cs = small_data.concept_set
    cfg = ModelConfig(input_dim=cs.k + 3, tasks="angle", **{**TINY, "dropout_rate": 0.1})
    seqs = small_data.sequences
    a = fit(seqs[:12], seqs[12:14], cs, cfg, TrainConfig(epochs=2, seed=5))
    b = fit(seqs[:12], seqs[12:14], cs, cfg, TrainConfig(epochs=2, seed=5))
    for n in a.params.tensors:
        assert np.array_equal(a.params[n].data, b.params[n].data)
    assert [r.train_loss for r in a.log] == [r.train_loss for r in b.log]


def test_fit_reduces_training_loss(small_data):
    cs = small_data.concept_set
    cfg = ModelConfig(input_dim=cs.k + 3, **TINY)
    seqs = small_data.sequences
    res = fit(seqs[:16], [], cs, cfg, TrainConfig(epochs=12, seed=0, learning_rate=3e-3))
    assert res.log[-1].train_loss < res.log[0].train_loss
    assert res.best_epoch == 12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_target_statistics_raise(small_data):
    cs = small_data.concept_set
    cfg = ModelConfig(input_dim=cs.k + 3, **TINY)
    seqs = list(small_data.sequences[:8])
    bad = seqs[0]
    seqs[0] = DriveSequence(bad.id, bad.frame_embeddings, bad.sensors, [bad.targets[0], 1e308])
    with pytest.raises(NumericError, match="target statistics"):
        fit(seqs, [], cs, cfg, TrainConfig(epochs=1, distance_cap=math.inf))


def test_fit_nan_loss_raises(small_data, monkeypatch):
    import gridlock.training as tr

    real = tr.init_params

    def poisoned(cfg, seed):
        p = real(cfg, seed)
        return p.replace({"cls": np.full(p["cls"].shape, np.nan)})

    monkeypatch.setattr(tr, "init_params", poisoned)
    cs = small_data.concept_set
    cfg = ModelConfig(input_dim=cs.k + 3, **TINY)
    with pytest.raises(NumericError, match="diverged at epoch 1"):
        fit(small_data.sequences[:8], [], cs, cfg, TrainConfig(epochs=1))


def test_fit_rejects_wrong_concept_count(small_data):
    cfg = ModelConfig(input_dim=small_data.concept_set.k + 4, **TINY)
    with pytest.raises(nx.ShapeError):
        fit(small_data.sequences[:4], [], small_data.concept_set, cfg, TrainConfig(epochs=1))


def test_binned_errors_distance_bins():
    truth = np.array([5.0, 15.0, 15.5, 69.0, 70.0])
    err = np.array([1.0, 2.0, 4.0, 3.0, 5.0])
    rows = binned_errors(truth, err, "distance")
    assert len(rows) == 7
    assert rows[0]["count"] == 1 and rows[1]["mae"] == 3.0
    assert rows[6]["count"] == 2 and rows[6]["mae"] == 4.0
    assert rows[3]["mae"] is None


def test_binned_errors_angle_deciles():
    truth = np.linspace(-1, 1, 101)
    rows = binned_errors(truth, np.abs(truth), "angle")
    assert len(rows) == 10 and sum(r["count"] for r in rows) == 101


def test_evaluate_mae_matches_hand_computation(small_data):
    cs = small_data.concept_set
    cfg = ModelConfig(input_dim=cs.k + 3, **TINY)
    p = init_params(cfg, 0)
    seqs = small_data.sequences[:5]
    preds = {"angle": np.zeros(5), "distance": np.full(5, 30.0)}
    r = evaluate(seqs, cs, p, cfg, predictions=preds)
    t = np.array([s.targets for s in seqs])
    assert r.mae["angle"] == pytest.approx(np.abs(t[:, 0]).mean())
    assert r.mae["distance"] == pytest.approx(np.abs(t[:, 1] - 30).mean())
    assert r.pair == [r.mae["angle"], r.mae["distance"]]
    with pytest.raises(ParameterError):
        evaluate([], cs, p, cfg)


def test_parse_sizes():
    assert parse_sizes(["24", "full", 3], 40) == [24, 40, 3]
    with pytest.raises(ParameterError):
        parse_sizes(["41"], 40)


def test_ablation_rows_and_full_matches_plain_fit(small_data):
    cs = small_data.concept_set
    cfg = ModelConfig(input_dim=cs.k + 3, **TINY)
    tcfg = TrainConfig(epochs=1, seed=2)
    rows = ablate_bottleneck(cs, ["4", "full"], [0, 1], small_data.sequences, cfg, tcfg)
    assert [(r["size"], r["seed"]) for r in rows] == [(4, 0), (4, 1), ("full", 0), ("full", 1)]
    train, val, test = split_dataset(small_data.sequences, seed=2)
    plain = evaluate(test, cs, fit(train, val, cs, cfg, tcfg).params, cfg)
    assert rows[2]["d_mae"] == plain.mae["distance"] and rows[2]["a_mae"] == plain.mae["angle"]
    assert rows[3]["d_mae"] == rows[2]["d_mae"]


def test_bench_keys():
    cfg = ModelConfig(input_dim=5, **TINY)
    out = bench_inference(init_params(cfg, 0), cfg, frames=20, runs=3)
    assert set(out) == {"frames", "runs", "median_s", "mean_s", "throughput_per_s"}
    assert out["frames"] == 20 and out["median_s"] > 0
    with pytest.raises(ParameterError):
        bench_inference(init_params(cfg, 0), cfg, runs=0)


@given(st.integers(1, 60), st.integers(3, 200))
def test_split_partition_property(n_extra, seed):
    seqs = list(range(3 + n_extra))
    train, val, test = split_dataset(seqs, seed=seed)
    assert sorted(train + val + test) == seqs and len(train) >= len(seqs) * 0.85 - 1
