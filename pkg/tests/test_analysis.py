from __future__ import annotations

import numpy as np
import pytest

import oracles
from epcl.analysis import (
    alignment_curve,
    cross_correlation,
    export_embeddings,
    format_matrix,
    model_alignment_curve,
)
from epcl.backbone import TransformerConfig, synthetic_backbone
from epcl.errors import ArgumentError, DimensionError
from epcl.models import ModelConfig, build_model
from epcl.synthetic import render_depth, sample_shape
from epcl.training import Dataset


def test_identical_and_negated_vectors():
    v = np.array([[1.0, 3.0, -2.0, 0.5]])
    assert cross_correlation(v, v).values[0, 0] == pytest.approx(1.0)
    assert cross_correlation(v, -v).values[0, 0] == pytest.approx(-1.0)


def test_pearson_matches_direct_formula():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    m = cross_correlation(a, b)
    want = np.array([[oracles.pearson(x, y) for y in b] for x in a])
    np.testing.assert_allclose(m.values, want, atol=1e-6)
    assert (np.abs(m.values) <= 1).all()


def test_cosine_estimator_skips_centring():
    a = np.array([[1.0, 1.0, 1.0]])
    b = np.array([[2.0, 2.0, 2.0]])
    assert cross_correlation(a, b, estimator="cosine").values[0, 0] == pytest.approx(1.0)


def test_zero_variance_flagged_with_sentinel():
    a = np.array([[2.0, 2.0, 2.0], [1.0, 2.0, 3.0]])
    b = np.array([[3.0, 1.0, 2.0]])
    with pytest.warns(RuntimeWarning, match="zero variance"):
        m = cross_correlation(a, b)
    assert m.values[0, 0] == 0.0
    assert m.flagged.tolist() == [[True], [False]]
    assert np.isfinite(m.values).all()


def test_cross_correlation_errors():
    with pytest.raises(DimensionError):
        cross_correlation(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ArgumentError):
        cross_correlation(np.ones((2, 3)), np.ones((2, 3)), estimator="spearman")


def test_duplicated_input_curve_is_all_ones():
    rng = np.random.default_rng(1)
    inputs = {c: [rng.normal(size=6) for _ in range(3)] for c in ("a", "b", "c")}
    w = rng.normal(size=(6, 6))

    def extract(items):
        x = np.stack(items)
        return [x, np.tanh(x @ w), np.sin(x)]

    curve = alignment_curve(inputs, inputs, extract, extract)
    np.testing.assert_allclose(curve.values, 1.0, atol=1e-12)
    assert curve.to_text().splitlines()[0] == "layer,mean_diagonal_correlation"


def test_curve_needs_shared_categories():
    with pytest.raises(ArgumentError):
        alignment_curve({"a": [1]}, {"b": [1]}, lambda x: [], lambda x: [])


def _model(layers=2):
    bb = synthetic_backbone(TransformerConfig(layers=layers, width=16, heads=2, mlp_ratio=2, dropout=0.0,
                                              image_size=32, patch_size=8), seed=0)
    return build_model(ModelConfig(num_classes=2, patches=8, neighbors=8, head_hidden=16), bb)


def _pairs(rng):
    clouds, images = {}, {}
    for fam in ("sphere", "cube"):
        pts = [sample_shape(fam, 0, 64, rng)[0] for _ in range(2)]
        clouds[fam] = pts
        images[fam] = [render_depth(p) for p in pts]
    return clouds, images


def test_model_curve_has_one_value_per_layer():
    rng = np.random.default_rng(2)
    clouds, images = _pairs(rng)
    curve = model_alignment_curve(_model(2), clouds, images)
    assert len(curve.values) == 3
    assert all(-1 <= v <= 1 for v in curve.values)
    assert format_matrix(curve.matrices[0]).startswith("# layer 0\ncategory,sphere,cube\n")
    degenerate = model_alignment_curve(_model(0), clouds, images)
    assert len(degenerate.values) == 1


def _dataset(n, rng):
    clouds = [sample_shape("sphere", 0, 64, rng)[0] for _ in range(n)]
    return Dataset(clouds, np.zeros(n, dtype=np.int64), ["sphere"], ids=[f"s{i}" for i in range(n)])


def test_export_rows_and_determinism(tmp_path):
    rng = np.random.default_rng(3)
    model = _model()
    ds = _dataset(3, rng)
    assert export_embeddings(model, ds, tmp_path / "a.csv") == 3
    export_embeddings(model, ds, tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "sample_id,label," + ",".join(f"f{i}" for i in range(16))
    assert len(lines) == 4
    assert {len(row.split(",")) for row in lines} == {18}
    assert lines[1].startswith("s0,sphere,")
    assert export_embeddings(model, ds, tmp_path / "l1.csv", layer=1, pool="mean") == 3
    with pytest.raises(ArgumentError):
        export_embeddings(model, ds, tmp_path / "bad.csv", layer=7)


def test_export_empty_dataset_writes_header_only(tmp_path):
    ds = Dataset([], np.zeros(0, dtype=np.int64), ["sphere"])
    assert export_embeddings(_model(), ds, tmp_path / "e.csv") == 0
    assert (tmp_path / "e.csv").read_text().count("\n") == 1
