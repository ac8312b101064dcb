from __future__ import annotations

import numpy as np
import pytest

from epcl.errors import ArgumentError, ConfigError, DataError, FormatError
from epcl.formats import (
    load_dataset,
    read_cloud,
    read_config,
    read_manifest,
    read_raster,
    write_cloud,
    write_raster,
)
from epcl.synthetic import JITTER, gen_synthetic, render_depth, sample_shape


def test_cloud_round_trip(tmp_path):
    pts = np.array([[0.5, -1.25, 2.0], [1e-6, 0.0, 3.0]])
    write_cloud(tmp_path / "c.txt", pts, np.array([1, 0]))
    back, labels = read_cloud(tmp_path / "c.txt")
    np.testing.assert_array_equal(back, pts)
    assert labels.tolist() == [1, 0]
    write_cloud(tmp_path / "n.txt", pts)
    assert read_cloud(tmp_path / "n.txt")[1] is None


@pytest.mark.parametrize("text", ["", "1 2\n", "1 2 3\n1 2 3 4\n", "1 2 x\n", "1 nan 3\n"])
def test_bad_clouds_rejected(tmp_path, text):
    (tmp_path / "c.txt").write_text(text)
    with pytest.raises(FormatError):
        read_cloud(tmp_path / "c.txt")


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path / "missing.txt")
    (tmp_path / "m.txt").write_text("a.txt cat train\n")
    with pytest.raises(FormatError, match="classes"):
        read_manifest(tmp_path / "m.txt")
    (tmp_path / "m.txt").write_text("classes cat\na.txt dog train\n")
    with pytest.raises(FormatError, match="undeclared"):
        read_manifest(tmp_path / "m.txt")
    (tmp_path / "m.txt").write_text("classes cat\na.txt cat val\n")
    with pytest.raises(FormatError, match="split"):
        read_manifest(tmp_path / "m.txt")


def test_raster_round_trip_and_errors(tmp_path):
    img = np.arange(4 * 2 * 3, dtype=np.uint8).reshape(4, 2, 3)
    write_raster(tmp_path / "r.raster", img)
    assert (tmp_path / "r.raster").read_bytes().startswith(b"EPCL-RASTER v1 4 2 3\n")
    np.testing.assert_array_equal(read_raster(tmp_path / "r.raster"), img)
    (tmp_path / "bad.raster").write_bytes(b"EPCL-RASTER v1 4 2 3\n" + bytes(5))
    with pytest.raises(FormatError, match="payload"):
        read_raster(tmp_path / "bad.raster")
    (tmp_path / "bad2.raster").write_bytes(b"PNG\n")
    with pytest.raises(FormatError):
        read_raster(tmp_path / "bad2.raster")


def test_config_parsing(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\nepochs = 3\nbatch-size=16  # trailing\n\n")
    assert read_config(tmp_path / "c.cfg") == {"epochs": "3", "batch_size": "16"}
    (tmp_path / "bad.cfg").write_text("epochs 3\n")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "bad.cfg")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "none.cfg")


def test_generator_is_byte_identical_for_a_seed(tmp_path):
    for name in ("a", "b"):
        gen_synthetic(tmp_path / name, classes=3, per_class=4, points=32, seed=5, images=True)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 3 * 4 * 2 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generator_dataset_contents(tmp_path):
    gen_synthetic(tmp_path, classes=4, per_class=10, points=64, seed=0)
    ds = load_dataset(tmp_path)
    assert len(ds) == 40
    assert ds.class_names == ["sphere", "cube", "cylinder", "plane"]
    assert (ds.split == "test").sum() == 8
    assert ds.point_labels is not None
    with pytest.raises(DataError):
        load_dataset(tmp_path, with_images=True)
    with pytest.raises(ArgumentError):
        gen_synthetic(tmp_path / "x", classes=1)


def test_sphere_radius_within_jitter():
    pts, _ = sample_shape("sphere", 0, 500, np.random.default_rng(0))
    r = np.linalg.norm(pts, axis=1)
    bound = np.sqrt(3) * JITTER + 1e-6
    assert np.all(np.abs(r - 1.0) <= bound)


def test_plane_labels_split_exactly_at_zero():
    pts, labels = sample_shape("plane", 0, 2000, np.random.default_rng(1))
    np.testing.assert_array_equal(labels, (pts[:, 0] >= 0).astype(int))
    assert 0 < labels.mean() < 1


def test_render_depth_shape():
    img = render_depth(sample_shape("cube", 0, 300, np.random.default_rng(2))[0])
    assert img.shape == (32, 32, 3) and img.dtype == np.uint8
    assert img.max() == 255
