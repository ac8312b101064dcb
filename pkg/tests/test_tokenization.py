from __future__ import annotations

import numpy as np
import pytest

from epcl import geometry as G
from epcl.errors import ArgumentError, ConfigError
from epcl.tokenization import (
    ImageTokenizer,
    PointTokenizer,
    TaskToken,
    make_task_tokens,
    patchify,
    tokenize_image,
    tokenize_points,
)


@pytest.fixture(scope="module")
def tokenizer():
    return PointTokenizer(32, np.random.default_rng(0))


def _relu(x):
    return np.maximum(x, 0)


def test_single_patch_matches_layer_by_layer_oracle(tokenizer):
    rng = np.random.default_rng(1)
    patch = rng.normal(size=(1, 8, 3)).astype(np.float32)
    f, s = tokenizer.first.layers, tokenizer.second.layers
    h = _relu(patch[0] @ f[0].weight.data + f[0].bias.data) @ f[1].weight.data + f[1].bias.data
    g = np.concatenate([np.repeat(h.max(axis=0, keepdims=True), 8, axis=0), h], axis=1)
    out = (_relu(g @ s[0].weight.data + s[0].bias.data) @ s[1].weight.data + s[1].bias.data).max(axis=0)
    np.testing.assert_allclose(tokenizer.encode_patches(patch).data[0], out, atol=1e-4, rtol=1e-5)


def test_within_patch_permutation_invariance(tokenizer):
    rng = np.random.default_rng(2)
    patches = rng.normal(size=(6, 16, 3)).astype(np.float32)
    perm = patches[:, rng.permutation(16)]
    diff = np.abs(tokenizer.encode_patches(patches).data - tokenizer.encode_patches(perm).data).max()
    assert diff <= 1e-5


def test_translation_changes_positions_not_contents(tokenizer):
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(256, 3))
    a = tokenize_points(pts, 16, 8, tokenizer)
    b = tokenize_points(pts + np.array([5.0, -2.0, 1.0]), 16, 8, tokenizer)
    assert np.abs(a.content_tokens().data - b.content_tokens().data).max() <= 1e-5
    assert np.abs(a.content_positional().data - b.content_positional().data).max() > 1e-3


def test_disjoint_translated_copies_give_identical_tokens(tokenizer):
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(64, 3))
    p1 = G.patch_coordinates(pts, G.build_patches(pts, 8, 8))
    moved = pts + 100.0
    p2 = G.patch_coordinates(moved, G.build_patches(moved, 8, 8))
    np.testing.assert_allclose(tokenizer.encode_patches(p1).data, tokenizer.encode_patches(p2).data, atol=1e-5)


def test_sequence_layout(tokenizer):
    rng = np.random.default_rng(5)
    task = TaskToken(3, 32, rng)
    seq = tokenize_points(rng.normal(size=(100, 3)), 10, 4, tokenizer, task)
    assert seq.tokens.shape == (14, 32)
    assert seq.num_task == 3 and seq.num_content == 10
    np.testing.assert_allclose(seq.tokens.data[0], tokenizer.cls_token.data)
    np.testing.assert_allclose(seq.tokens.data[1:4], task().data)
    np.testing.assert_array_equal(seq.positional.data[:4], 0.0)


def test_zero_task_tokens():
    rng = np.random.default_rng(6)
    tok = PointTokenizer(16, rng)
    assert make_task_tokens(0, 16)().shape == (0, 16)
    seq = tokenize_points(rng.normal(size=(40, 3)), 5, 4, tok, make_task_tokens(0, 16))
    assert seq.tokens.shape == (6, 16)


def test_task_token_enumeration():
    task = TaskToken(4, 5, np.random.default_rng(0), identity=True)
    np.testing.assert_allclose(task().data[:, 0], [0, 1 / 3, 2 / 3, 1], atol=1e-7)
    single = TaskToken(1, 5, np.random.default_rng(0), identity=True)
    np.testing.assert_array_equal(single().data, 0.0)
    with pytest.raises(ConfigError):
        TaskToken(-1, 5, np.random.default_rng(0))


def test_image_patch_count():
    tok = ImageTokenizer(8, 32, 16, 3, np.random.default_rng(0))
    seq = tokenize_image(np.zeros((32, 32, 3)), tok)
    assert seq.num_content == 4
    assert seq.tokens.shape == (5, 8)
    np.testing.assert_allclose(seq.positional.data, tok.positional.data)


def test_patchify_row_major():
    img = np.arange(4 * 4 * 1).reshape(4, 4, 1)
    flat = patchify(img, 2)
    np.testing.assert_array_equal(flat[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(flat[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(flat[2], [8, 9, 12, 13])


def test_image_size_mismatch():
    tok = ImageTokenizer(8, 32, 16, 3, np.random.default_rng(0))
    with pytest.raises(ArgumentError):
        tokenize_image(np.zeros((48, 48, 3)), tok)
    with pytest.raises(ArgumentError):
        tokenize_image(np.zeros((30, 30, 3)), tok)
