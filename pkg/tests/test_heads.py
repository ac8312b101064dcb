from __future__ import annotations

import numpy as np
import pytest

from epcl import tensor as T
from epcl.backbone import TransformerConfig, synthetic_backbone
from epcl.errors import ConfigError, FormatError
from epcl.heads import (
    ClassificationHead,
    SegmentationPipeline,
    TextFeatureBank,
    classify,
    contrastive_loss,
    load_text_bank,
    save_text_bank,
    segment,
    segmentation_geometry,
    stack_geometry,
    stage_counts,
    total_classification_loss,
)
from epcl.tensor import Tensor


def _relu(x):
    return np.maximum(x, 0)


def test_zero_final_layer_gives_uniform_probabilities():
    head = ClassificationHead(16, 5, np.random.default_rng(0))
    head.fc3.weight.data[:] = 0
    head.fc3.bias.data[:] = 0
    head.eval()
    final = Tensor(np.random.default_rng(1).normal(size=(3, 7, 16)).astype(np.float32))
    probs = T.softmax(classify(final, head)).data
    np.testing.assert_allclose(probs, 0.2, atol=1e-7)


def test_single_class_argmax_is_zero():
    head = ClassificationHead(8, 1, np.random.default_rng(0))
    head.eval()
    logits = classify(Tensor(np.random.default_rng(2).normal(size=(4, 3, 8))), head)
    assert logits.shape == (4, 1)
    assert (logits.data.argmax(-1) == 0).all()


def test_head_matches_layer_by_layer_oracle():
    head = ClassificationHead(16, 4, np.random.default_rng(0), hidden=32)
    head.eval()
    final = np.random.default_rng(3).normal(size=(2, 5, 16)).astype(np.float32)
    x = final[:, 0]
    h = _relu(x @ head.fc1.weight.data + head.fc1.bias.data)
    h = _relu(h @ head.fc2.weight.data + head.fc2.bias.data)
    want = h @ head.fc3.weight.data + head.fc3.bias.data
    np.testing.assert_allclose(classify(Tensor(final), head).data, want, atol=1e-6)


def test_head_dropout_only_in_training():
    head = ClassificationHead(8, 3, np.random.default_rng(0), dropout=0.5)
    x = Tensor(np.ones((4, 2, 8), dtype=np.float32))
    a = classify(x, head, np.random.default_rng(0)).data
    b = classify(x, head, np.random.default_rng(1)).data
    assert not np.allclose(a, b)
    head.eval()
    np.testing.assert_array_equal(classify(x, head).data, classify(x, head).data)


def test_contrastive_orthogonal_is_log_c():
    bank = TextFeatureBank(["a", "b", "c"], np.eye(4)[:3])
    proj = Tensor(np.tile([0.0, 0.0, 0.0, 2.0], (5, 1)))
    loss = contrastive_loss(proj, [0, 1, 2, 0, 1], bank)
    assert loss.item() == pytest.approx(np.log(3), rel=1e-6)


def test_contrastive_is_invariant_to_rescaling():
    rng = np.random.default_rng(4)
    bank = TextFeatureBank(list("abcd"), rng.normal(size=(4, 6)))
    proj = rng.normal(size=(5, 6))
    labels = [0, 3, 1, 2, 2]
    a = contrastive_loss(Tensor(proj), labels, bank).item()
    b = contrastive_loss(Tensor(proj * 7.5), labels, bank).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_contrastive_matches_direct_formula():
    rng = np.random.default_rng(5)
    bank = TextFeatureBank(list("abc"), rng.normal(size=(3, 4)))
    proj = rng.normal(size=(2, 4))
    labels = [2, 0]
    z = proj / np.linalg.norm(proj, axis=1, keepdims=True)
    logits = z @ bank.vectors.T / 0.07
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    want = -np.mean([logp[i, c] for i, c in enumerate(labels)])
    assert contrastive_loss(Tensor(proj), labels, bank).item() == pytest.approx(want, rel=1e-8)


def test_contrastive_errors():
    bank = TextFeatureBank(["a", "b"], np.eye(2))
    with pytest.raises(ConfigError):
        contrastive_loss(Tensor(np.ones((1, 2))), [0], bank, temperature=0.0)
    with pytest.raises(IndexError):
        contrastive_loss(Tensor(np.ones((1, 2))), [2], bank)


def test_total_loss_weighting():
    logits = Tensor(np.random.default_rng(6).normal(size=(3, 4)))
    ce = T.cross_entropy(logits, [0, 1, 2]).item()
    assert total_classification_loss(logits, [0, 1, 2], None, 0.0).item() == ce
    extra = Tensor(np.array(0.5))
    assert total_classification_loss(logits, [0, 1, 2], extra, 2.0).item() == pytest.approx(ce + 1.0)
    with pytest.raises(ConfigError):
        total_classification_loss(logits, [0, 1, 2], None, 1.0)


def test_text_bank_round_trip(tmp_path):
    bank = TextFeatureBank(["chair", "table"], np.array([[3.0, 4.0], [0.0, 2.0]]))
    np.testing.assert_allclose(bank.vectors, [[0.6, 0.8], [0.0, 1.0]])
    save_text_bank(bank, tmp_path / "bank.txt")
    back = load_text_bank(tmp_path / "bank.txt")
    assert back.labels == bank.labels
    np.testing.assert_array_equal(back.vectors, bank.vectors)
    (tmp_path / "bad.txt").write_text("EPCL-TEXTBANK v1 3 2\nchair 1 0\n")
    with pytest.raises(FormatError):
        load_text_bank(tmp_path / "bad.txt")
    with pytest.raises(FormatError):
        TextFeatureBank(["a"], np.zeros((1, 3)))


def test_stage_counts():
    assert stage_counts(4096, None) == (2048, 1024, 512)
    assert stage_counts(4096, (2048, 1024, 1024)) == (2048, 1024, 1024)
    geo = segmentation_geometry(np.random.default_rng(0).normal(size=(64, 3)), k=8)
    assert geo.counts == (32, 16, 8)


def _small_backbone():
    return synthetic_backbone(TransformerConfig(layers=1, width=16, heads=2, mlp_ratio=2, dropout=0.0,
                                                image_size=8, patch_size=4), seed=0)


@pytest.mark.parametrize("A", [1024, 2048, 4096])
def test_segmentation_logits_per_point(A):
    rng = np.random.default_rng(A)
    bb = _small_backbone()
    bb.eval()
    pipe = SegmentationPipeline(16, 3, rng, stage_widths=(8, 8), num_points=A, k=8)
    pipe.eval()
    with T.no_grad():
        out = segment(rng.uniform(-1, 1, size=(A, 3)), pipe, bb)
    assert out.shape == (A, 3)
    assert np.isfinite(out.data).all()


def test_constant_coarse_field_decodes_to_constant_logits():
    rng = np.random.default_rng(7)
    pipe = SegmentationPipeline(16, 4, rng, stage_widths=(8, 12), num_points=128, k=8)
    geo = stack_geometry([pipe.geometry(rng.normal(size=(128, 3)))])
    # zero the weights reading skip features so only the coarse field matters
    for mlp, coarse_width in zip(pipe.up, (16, 12, 8)):
        mlp.layers[0].weight.data[coarse_width:] = 0
    feats = pipe.encode(geo)
    coarse = Tensor(np.tile(rng.normal(size=16).astype(np.float32), (1, 16, 1)))
    logits = pipe.decode(coarse, feats, geo).data[0]
    assert np.abs(logits - logits[0]).max() <= 1e-6


def test_segmentation_gradients_reach_pipeline_not_frozen_backbone():
    rng = np.random.default_rng(8)
    bb = _small_backbone()
    for p in bb.parameters():
        p.requires_grad = False
    pipe = SegmentationPipeline(16, 2, rng, stage_widths=(8, 8), num_points=64, k=4)
    logits = segment(rng.normal(size=(64, 3)), pipe, bb)
    T.backward(T.cross_entropy(logits, np.arange(64) % 2))
    assert all(p.grad is None for p in bb.parameters())
    assert pipe.down[0].layers[0].weight.grad is not None
    assert np.abs(pipe.down[0].layers[0].weight.grad).sum() > 0
