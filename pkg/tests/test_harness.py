"""Episode sampling, schedule, optimizer, training loop, evaluation and grids."""

import dataclasses
import math

import numpy as np
import pytest

import oracles
from uniprompt.autodiff import Parameter, no_grad
from uniprompt.data import SyntheticSpec, make_synthetic, shifted_split
from uniprompt.encoder import TextConfig, VisionConfig, init_backbone
from uniprompt.errors import ConfigurationError, ContractError, DataError, NonFiniteLossError
from uniprompt.harness import (
    SGD,
    EpisodeSpec,
    RunRecord,
    TrainConfig,
    cosine_lr,
    evaluate,
    evaluate_shifted,
    predict,
    run_cell,
    run_matrix,
    sample_few_shot,
    summarize,
    train,
)
from uniprompt.prompts import TRAINABLE_KINDS, StrategyKind, make_strategy


@pytest.fixture(scope="module")
def encoder():
    return init_backbone(VisionConfig(), TextConfig(), seed=0)


@pytest.fixture(scope="module")
def small():
    return make_synthetic(SyntheticSpec(k=3, train_per_class=16, test_per_class=4, seed=3))


FAST = TrainConfig(epochs=2)


# -- sampling --------------------------------------------------------------------

def test_sample_counts():
    data = make_synthetic(SyntheticSpec(k=5, train_per_class=10))
    idx = sample_few_shot(data.splits["train"], EpisodeSpec(4, 0))
    assert len(idx) == 20
    assert np.bincount(data.splits["train"].labels[idx]).tolist() == [4] * 5
    assert len(set(idx.tolist())) == 20


def test_sample_deterministic(small):
    a = sample_few_shot(small.splits["train"], EpisodeSpec(2, 7))
    b = sample_few_shot(small.splits["train"], EpisodeSpec(2, 7))
    c = sample_few_shot(small.splits["train"], EpisodeSpec(2, 8))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_sample_insufficient_names_class():
    data = make_synthetic(SyntheticSpec(k=2, train_per_class=10))
    with pytest.raises(DataError, match=data.class_names[0]):
        sample_few_shot(data.splits["train"], EpisodeSpec(16, 0, tuple(data.class_names)))


def test_bad_shots():
    with pytest.raises(ConfigurationError, match="1,2,4,8,16"):
        EpisodeSpec(3, 0).validate()


def test_sampling_leaves_test_split(small):
    before = small.splits["test"].images.copy()
    sample_few_shot(small.splits["train"], EpisodeSpec(4, 0))
    assert np.array_equal(before, small.splits["test"].images)


# -- schedule and optimizer ------------------------------------------------------

def test_cosine_lr_values():
    assert cosine_lr(0, 100, 0.002) == 0.002
    assert abs(cosine_lr(100, 100, 0.002)) < 1e-18
    assert math.isclose(cosine_lr(50, 100, 0.002), 0.001, rel_tol=1e-12)


@pytest.mark.parametrize("step,total", [(11, 10), (-1, 10), (0, 0)])
def test_cosine_lr_errors(step, total):
    with pytest.raises(ContractError):
        cosine_lr(step, total, 0.002)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(initial_lr=0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0).validate()


def test_sgd_quadratic_closed_form():
    """Two momentum steps on 0.5 * a * (p - c)^2 against the hand-written update."""
    a, c, p0, lr, mu = 3.0, np.array([1.0, -2.0]), np.array([0.5, 0.25]), 0.1, 0.9
    p = Parameter(p0, dtype=np.float64)
    opt = SGD([p], momentum=mu)
    v, expect = np.zeros(2), p0.copy()
    for _ in range(2):
        p.grad = a * (p.data - c)
        opt.step(lr)
        v = mu * v + a * (expect - c)
        expect = expect - lr * v
    assert np.max(np.abs(p.data - expect)) < 1e-12


def test_sgd_skips_frozen():
    frozen = Parameter(np.ones(3), trainable=False, dtype=np.float64)
    live = Parameter(np.ones(3), dtype=np.float64)
    opt = SGD([frozen, live])
    frozen.grad = np.ones(3)
    live.grad = np.ones(3)
    opt.step(0.5)
    assert np.array_equal(frozen.data, np.ones(3)) and np.allclose(live.data, 0.5)


# -- evaluation ------------------------------------------------------------------

def test_identical_columns_pick_lowest_index(encoder, small):
    zs = make_strategy("zero_shot", encoder)
    split = small.splits["test"]
    preds = predict(encoder, zs, split.images, ["owl", "owl", "owl"])
    assert np.all(preds == 0)
    acc = evaluate(zs, encoder, split, ["owl", "owl", "owl"])
    assert acc == np.mean(split.labels == 0)


def test_predict_matches_scalar_argmax(encoder):
    rng = np.random.default_rng(11)
    images = rng.normal(size=(20, 32, 32, 1)).astype(np.float32)
    names = ["owl", "harp", "lake", "granite bell"]
    zs = make_strategy("zero_shot", encoder)
    preds = predict(encoder, zs, images, names, batch_size=7)
    with no_grad():
        z = encoder.encode_image(images).data.astype(np.float64)
    W = encoder.build_zero_shot_classifier(names).W.astype(np.float64)
    ref = [oracles.eq1_argmax(z[i].tolist(), W.tolist(), 100.0) for i in range(20)]
    assert preds.tolist() == ref


def test_evaluate_empty_split(encoder, small):
    with pytest.raises(DataError):
        evaluate(make_strategy("zero_shot", encoder), encoder, small.splits["test"].subset([]), small.class_names)


# -- training --------------------------------------------------------------------

def test_zero_shot_train_is_noop(encoder, small):
    zs = make_strategy("zero_shot", encoder)
    direct = evaluate(zs, encoder, small.splits["test"], small.class_names)
    record, _ = run_cell(encoder, small, "zero_shot", 4, 1, FAST)
    assert record.epoch_loss == [] and record.parameter_count == 0
    assert record.test_accuracy == direct


def test_train_keeps_backbone(encoder, small):
    before = encoder.checksum()
    s = make_strategy("unified", encoder, seed=1)
    record = train(s, encoder, small.splits["train"], small.class_names, FAST)
    assert record.backbone_checksum == before == encoder.checksum()
    assert len(record.epoch_loss) == 2


def test_partial_last_batch_kept(encoder, small, monkeypatch):
    steps = []
    original = SGD.step
    monkeypatch.setattr(SGD, "step", lambda self, lr: (steps.append(lr), original(self, lr)))
    s = make_strategy("text", encoder, seed=1)
    train(s, encoder, small.splits["train"], small.class_names, TrainConfig(epochs=1, batch_size=20))
    assert len(steps) == 3  # 48 examples: 20 + 20 + 8
    assert steps[0] == 0.002


def test_nan_loss_dumps_batch(encoder, small, tmp_path):
    s = make_strategy("vpt_shallow", encoder, seed=1)
    s.V[0].data[...] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train(s, encoder, small.splits["train"], small.class_names, FAST, dump_dir=tmp_path)
    assert info.value.dump_path is not None and info.value.dump_path.exists()
    assert len(info.value.batch_indices) == 32


def test_run_cell_deterministic(encoder, small):
    a, _ = run_cell(encoder, small, "joint", 2, 5, FAST)
    b, _ = run_cell(encoder, small, "joint", 2, 5, FAST)
    assert a.epoch_loss == b.epoch_loss and a.test_accuracy == b.test_accuracy


def test_loss_decreases_for_every_strategy(encoder):
    data = make_synthetic(SyntheticSpec(k=5, train_per_class=8, test_per_class=2, seed=0))
    cfg = TrainConfig(epochs=15)
    for kind in TRAINABLE_KINDS:
        wins = 0
        for seed in (1, 2, 3):
            record, _ = run_cell(encoder, data, kind.value, 4, seed, cfg)
            wins += record.epoch_loss[-1] < record.epoch_loss[0]
        assert wins >= 2, kind


# -- shifted evaluation ----------------------------------------------------------

def test_zero_shift_equals_source(encoder, small):
    s = make_strategy("vpt_deep", encoder, seed=2)
    test = small.splits["test"]
    result = evaluate_shifted(s, encoder, small, {"same": (test, small.class_names)}, train_first=False)
    assert result["targets"]["same"] == evaluate(s, encoder, test, small.class_names) == result["source"]


def test_ood_average_is_mean(encoder, small):
    s = make_strategy("zero_shot", encoder)
    targets = {
        f"noise_{m}": (shifted_split(small.splits["test"], "noise", m, seed=1), small.class_names) for m in (0.5, 1.0, 2.0)
    }
    result = evaluate_shifted(s, encoder, small, targets, train_first=False)
    assert result["ood_average"] == float(np.mean(list(result["targets"].values())))


def test_accuracy_non_increasing_in_noise(encoder):
    data = make_synthetic(SyntheticSpec(k=5, train_per_class=8, test_per_class=10, seed=0))
    test = data.splits["test"]
    levels = (0.0, 0.5, 1.0)
    acc = np.zeros((3, len(levels)))
    for i, seed in enumerate((1, 2, 3)):
        s = make_strategy("vpt_deep", encoder, seed=seed)
        targets = {str(m): (shifted_split(test, "noise", m, seed=seed), data.class_names) for m in levels}
        result = evaluate_shifted(s, encoder, data, targets, TrainConfig(epochs=20), shots=8, seed=seed)
        acc[i] = [result["targets"][str(m)] for m in levels]
    mean = acc.mean(axis=0)
    assert mean[0] > 0.5
    assert mean[0] >= mean[1] >= mean[2]


def test_shift_class_mismatch(encoder, small):
    s = make_strategy("zero_shot", encoder)
    with pytest.raises(DataError):
        evaluate_shifted(s, encoder, small, {"x": (small.splits["test"], small.class_names[::-1])}, train_first=False)


# -- grids -----------------------------------------------------------------------

def test_full_grid_cell_count(encoder, small):
    records = run_matrix(encoder, small, [k.value for k in StrategyKind], cfg=TrainConfig(epochs=0))
    assert len(records) == 120
    assert [(r.strategy, r.shots, r.seed) for r in records[:6]] == [
        ("zero_shot", s, seed) for s in (1, 2) for seed in (1, 2, 3)
    ]


def test_failed_cell_marked(encoder, small):
    records = run_matrix(encoder, small, ["zero_shot", "text"], shots=(1,), cfg=FAST,
                         strategy_kwargs={"text": {"m": 0}})
    status = {(r.strategy, r.seed): r.status for r in records}
    assert all(status[("zero_shot", s)] == "ok" for s in (1, 2, 3))
    assert all(status[("text", s)] == "failed" for s in (1, 2, 3))
    rows = {r["strategy"]: r for r in summarize(records)}
    assert rows["text"]["failed"] == 3 and rows["text"]["accuracy"] is None


def test_threads_do_not_change_results(encoder, small):
    kinds = ["text", "vpt_shallow"]
    a = run_matrix(encoder, small, kinds, shots=(1, 2), cfg=FAST, threads=1)
    b = run_matrix(encoder, small, kinds, shots=(1, 2), cfg=FAST, threads=3)
    assert summarize(a) == summarize(b)


def test_summarize_mean_over_seeds():
    cfg = dataclasses.asdict(TrainConfig())
    records = [RunRecord("text", "d", 4, s, cfg, {}, test_accuracy=a) for s, a in zip((1, 2, 3), (0.5, 0.75, 0.25))]
    (row,) = summarize(records)
    assert row["accuracy"] == 0.5 and row["seeds"] == 3
