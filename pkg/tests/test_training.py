from __future__ import annotations

import numpy as np
import pytest

from epcl.backbone import TransformerConfig, synthetic_backbone
from epcl.errors import ArgumentError, ContractError, NumericalError
from epcl.models import ModelConfig, build_model
from epcl.nn import Parameter
from epcl.synthetic import sample_shape
from epcl.training import (
    AdamW,
    Dataset,
    TrainConfig,
    accuracy,
    backbone_hashes,
    cosine_lr,
    dataset_loss,
    evaluate,
    sample_16shot,
    sample_kway_nshot,
    segmentation_metrics,
    train,
)


def test_adamw_first_step_hand_value():
    p = Parameter(np.array([1.0]), dtype=np.float64)
    p.grad = np.array([1.0])
    AdamW([p], lr=0.0003, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.04).step()
    # m_hat = v_hat = 1, so the update is lr * (1 / (1 + eps) + wd * 1)
    assert p.data[0] == pytest.approx(1 - 0.0003 * (1 / (1 + 1e-8) + 0.04), abs=1e-12)
    assert p.data[0] == pytest.approx(0.999688, abs=1e-6)


def test_adamw_matches_reference_recurrence_over_steps():
    rng = np.random.default_rng(0)
    p = Parameter(rng.normal(size=5), dtype=np.float64)
    theta = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    opt = AdamW([p], lr=0.01, weight_decay=0.1)
    for t in range(1, 6):
        g = rng.normal(size=5)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        theta = theta - 0.01 * (mh / (np.sqrt(vh) + 1e-8) + 0.1 * theta)
    np.testing.assert_allclose(p.data, theta, rtol=1e-12)


def test_adamw_skips_frozen_and_requires_grads():
    frozen = Parameter(np.ones(3))
    frozen.requires_grad = False
    live = Parameter(np.ones(3))
    opt = AdamW([frozen, live])
    with pytest.raises(ContractError):
        opt.step()
    live.grad = np.ones(3, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(frozen.data, 1.0)
    assert id(frozen) not in opt.state.m and id(live) in opt.state.m


def test_cosine_schedule_endpoints():
    assert cosine_lr(1.0, 0, 10) == pytest.approx(1.0)
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


def test_few_shot_counts():
    labels = np.repeat(np.arange(40), 40)
    ep = sample_kway_nshot(labels, 5, 10, seed=7)
    assert (len(ep.train_indices), len(ep.test_indices)) == (50, 100)
    ep = sample_kway_nshot(labels, 30, 10, seed=7)
    assert (len(ep.train_indices), len(ep.test_indices)) == (300, 600)
    assert not set(ep.train_indices) & set(ep.test_indices)
    chosen = labels[ep.train_indices]
    assert sorted(set(chosen.tolist())) == ep.classes
    assert all((labels[ep.test_indices] == c).sum() == 20 for c in ep.classes)
    assert len(sample_16shot(labels, seed=0).train_indices) == 640


def test_few_shot_respects_split_and_seed():
    labels = np.repeat(np.arange(6), 40)
    split = np.tile(np.array(["train"] * 20 + ["test"] * 20), 6)
    ep = sample_kway_nshot(labels, 3, 5, seed=1, split=split)
    assert (split[ep.train_indices] == "train").all()
    assert (split[ep.test_indices] == "test").all()
    again = sample_kway_nshot(labels, 3, 5, seed=1, split=split)
    np.testing.assert_array_equal(ep.train_indices, again.train_indices)
    with pytest.raises(ArgumentError):
        sample_kway_nshot(labels, 7, 5, seed=1)
    with pytest.raises(ArgumentError):
        sample_kway_nshot(labels, 3, 25, seed=1, split=split)


def test_metric_hand_computations():
    assert accuracy([0, 1, 1, 2], [0, 1, 2, 2]) == 0.75
    preds = [np.array([0, 0, 1, 1]), np.array([1, 1])]
    trues = [np.array([0, 1, 1, 1]), np.array([1, 0])]
    m = segmentation_metrics(preds, trues, 2)
    assert m["accuracy"] == pytest.approx(4 / 6)
    # class 0: 1 of 2 points right; class 1: 3 of 4
    assert m["mAcc"] == pytest.approx((0.5 + 0.75) / 2)
    # sample 1: IoU0 = 1/2, IoU1 = 2/3; sample 2: IoU0 = 0, IoU1 = 1/2
    assert m["mIoU"] == pytest.approx(((0.5 + 2 / 3) / 2 + (0 + 0.5) / 2) / 2)
    with pytest.raises(ArgumentError):
        accuracy([], [])


def test_metrics_invariant_to_sample_order():
    rng = np.random.default_rng(2)
    preds = [rng.integers(0, 3, size=20) for _ in range(5)]
    trues = [rng.integers(0, 3, size=20) for _ in range(5)]
    perm = rng.permutation(5)
    a = segmentation_metrics(preds, trues, 3)
    b = segmentation_metrics([preds[i] for i in perm], [trues[i] for i in perm], 3)
    assert a == pytest.approx(b)


def _tiny_dataset(per_class=16, points=128, seed=0):
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for c, fam in enumerate(("sphere", "plane")):
        for _ in range(per_class):
            clouds.append(sample_shape(fam, 0, points, rng)[0])
            labels.append(c)
    return Dataset(clouds, np.array(labels), ["sphere", "plane"])


def _tiny_model(policy="frozen-backbone", seed=0):
    bb = synthetic_backbone(TransformerConfig(layers=2, width=32, heads=2, mlp_ratio=2, dropout=0.3,
                                              image_size=8, patch_size=4), seed=seed)
    cfg = ModelConfig(num_classes=2, patches=8, neighbors=8, head_hidden=32)
    return build_model(cfg, bb, seed=seed, policy=policy)


def test_frozen_backbone_hashes_unchanged_full_finetune_changes():
    data = _tiny_dataset()
    model = _tiny_model()
    before = backbone_hashes(model)
    report = train(model, data, TrainConfig(epochs=2, batch_size=8, lr=1e-3))
    assert all(h == before for h in report.backbone_hashes)
    model = _tiny_model(policy="full-finetune")
    before = backbone_hashes(model)
    train(model, data, TrainConfig(epochs=1, batch_size=8, lr=1e-3))
    assert backbone_hashes(model) != before


def test_episode_loss_non_increasing_over_first_ten_steps():
    data = _tiny_dataset(per_class=10)
    ok = 0
    for seed in range(10):
        model = _tiny_model(seed=seed)
        trace = [dataset_loss(model, data)]

        def on_step(step, m):
            trace.append(dataset_loss(m, data))
            return step >= 10

        train(model, data, TrainConfig(epochs=10, batch_size=len(data), seed=seed), on_step=on_step)
        assert len(trace) == 11
        ok += all(b <= a for a, b in zip(trace, trace[1:]))
    assert ok >= 9


def test_training_is_deterministic_and_evaluates():
    data = _tiny_dataset()

    def run():
        model = _tiny_model()
        rep = train(model, data, TrainConfig(epochs=1, batch_size=8), test_data=data)
        return rep.to_csv(), model.head.fc3.weight.data.tobytes()

    a, b = run(), run()
    assert a == b
    assert a[0].startswith("epoch,split,metric,value\n0,test,accuracy,")


def test_evaluation_permutation_invariant():
    data = _tiny_dataset()
    model = _tiny_model()
    perm = np.random.default_rng(0).permutation(len(data))
    assert evaluate(model, data) == evaluate(model, data.subset(perm))


def test_nonfinite_loss_aborts():
    data = _tiny_dataset()
    model = _tiny_model()
    model.head.fc3.bias.data[:] = np.nan
    with pytest.raises(NumericalError, match="non-finite"):
        train(model, data, TrainConfig(epochs=1, batch_size=8))
