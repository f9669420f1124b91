import struct

import numpy as np
import pytest

from psdebnn.data import (
    Dataset,
    annulus_label,
    data_dir,
    gen_annulus,
    gen_ood,
    gen_two_moons,
    load_csv,
    load_mnist_idx,
    read_idx_images,
    read_idx_labels,
    save_csv,
    split_dataset,
    write_idx,
)
from psdebnn.errors import ConfigError, FormatError


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), 500).astype(np.uint8)
    rng.shuffle(labels)
    images = rng.integers(0, 255, size=(len(labels), 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    img, lab = tmp_path / "images.idx", tmp_path / "labels.idx"
    write_idx(img, images)
    write_idx(lab, labels)
    return img, lab, images, labels


def test_annulus_labels():
    assert annulus_label(np.zeros(2), 1, 2, 3)[0] == 0
    assert annulus_label(np.array([2.5, 0.0]), 1, 2, 3)[0] == 1
    assert annulus_label(np.array([1.5, 0.0]), 1, 2, 3)[0] == -1


def test_annulus_radii_respect_bounds():
    ds = gen_annulus(5000, 1.0, 2.0, 3.0, seed=0)
    r = np.linalg.norm(ds.features, axis=1)
    assert r[ds.labels == 0].max() <= 1.0
    assert r[ds.labels == 1].min() >= 2.0 and r[ds.labels == 1].max() <= 3.0
    assert np.bincount(ds.labels).tolist() == [5000, 5000]
    assert gen_annulus(10, seed=3).features.tobytes() == gen_annulus(10, seed=3).features.tobytes()


def test_annulus_invalid_radii():
    with pytest.raises(ConfigError):
        gen_annulus(10, 2.0, 1.0, 3.0)


def test_two_moons_exact_arcs():
    ds = gen_two_moons(200, noise_std=0.0, seed=1)
    upper = ds.features[ds.labels == 0]
    lower = ds.features[ds.labels == 1]
    np.testing.assert_allclose(np.linalg.norm(upper, axis=1), 1.0, atol=1e-12)
    assert np.all(upper[:, 1] >= 0)
    centred = lower - np.array([1.0, 0.5])
    np.testing.assert_allclose(np.linalg.norm(centred, axis=1), 1.0, atol=1e-12)
    assert np.all(centred[:, 1] <= 1e-12)
    assert np.bincount(ds.labels).tolist() == [100, 100]


def test_two_moons_deterministic_and_even():
    a, b = gen_two_moons(50 * 2, 0.1, seed=4), gen_two_moons(100, 0.1, seed=4)
    assert a.features.tobytes() == b.features.tobytes()
    with pytest.raises(ConfigError):
        gen_two_moons(11)


def test_ood_generators():
    u = gen_ood(1000, 3, "uniform_noise", seed=0)
    assert u.labels is None and u.source == "OOD"
    assert u.features.min() >= 0.0 and u.features.max() <= 1.0
    g = gen_ood(4000, 2, "gaussian_noise", seed=1)
    assert np.all(np.abs(g.features.mean(axis=0)) < 3 / np.sqrt(4000))
    s = gen_ood(4000, 2, "shifted", seed=1, shift=3.0)
    np.testing.assert_allclose(s.features.mean(axis=0), 3.0, atol=0.1)
    assert gen_ood(5, 2, seed=9).features.tobytes() == gen_ood(5, 2, seed=9).features.tobytes()
    with pytest.raises(ConfigError):
        gen_ood(5, 2, "adversarial")


def test_split_disjoint_exhaustive_and_normalisation():
    ds = split_dataset(gen_two_moons(100, seed=0), (0.6, 0.2, 0.2), seed=2)
    counts = {k: int(np.sum(ds.split == k)) for k in ("train", "val", "test")}
    assert counts == {"train": 60, "val": 20, "test": 20}
    norm = ds.normalized()
    train = ds.features[ds.split == "train"]
    np.testing.assert_allclose(norm.mean, train.mean(axis=0))
    np.testing.assert_allclose(norm.part("train").features.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(norm.part("train").features.std(axis=0), 1.0, atol=1e-12)
    assert abs(norm.part("test").features.mean()) > 0  # test set uses train statistics
    with pytest.raises(ConfigError):
        split_dataset(ds, (0.5, 0.5, 0.5))


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset(np.array([[np.nan, 0.0]]), np.array([0]))
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), num_classes=2)


def test_idx_header_and_scaling(idx_files):
    img, lab, images, labels = idx_files
    raw = open(img, "rb").read(4)
    assert struct.unpack(">I", raw)[0] == 0x00000803
    parsed = read_idx_images(img)
    assert parsed.ndim == 3 and parsed.tobytes() == images.tobytes()
    assert read_idx_labels(lab).tobytes() == labels.tobytes()
    ds = load_mnist_idx(img, lab)
    assert ds.d_x == 784 and ds.features.max() <= 1.0 and ds.features[0, 0] == 1.0


def test_idx_stratified_subset(idx_files):
    img, lab, _, _ = idx_files
    ds = load_mnist_idx(img, lab, subset=1000, seed=0)
    counts = np.bincount(ds.labels, minlength=10)
    assert len(ds) == 1000 and counts.min() >= 90 and counts.max() <= 110


def test_idx_bad_magic(idx_files, tmp_path):
    img, lab, _, _ = idx_files
    with pytest.raises(FormatError, match="byte offset 0"):
        read_idx_images(lab)
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x09\x03" + open(img, "rb").read()[4:])
    with pytest.raises(FormatError):
        read_idx_images(bad)


def test_idx_truncation(idx_files, tmp_path):
    img, _, _, _ = idx_files
    data = open(img, "rb").read()
    cut = tmp_path / "cut.idx"
    cut.write_bytes(data[:1000])
    with pytest.raises(FormatError, match="byte offset 1000"):
        read_idx_images(cut)
    cut.write_bytes(data[:9])
    with pytest.raises(FormatError, match="truncated header"):
        read_idx_images(cut)
    cut.write_bytes(data[:2])
    with pytest.raises(FormatError):
        read_idx_images(cut)


def test_csv_cache_round_trip(tmp_path):
    ds = gen_two_moons(20, seed=0)
    path = tmp_path / "moons.csv"
    save_csv(ds, path)
    assert open(path).readline().strip() == "label,x_1,x_2"
    back = load_csv(path)
    assert back.features.tobytes() == ds.features.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    ood = gen_ood(5, 3, seed=0)
    save_csv(ood, tmp_path / "ood.csv")
    assert load_csv(tmp_path / "ood.csv").labels is None


def test_data_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("PSDEBNN_DATA_DIR", str(tmp_path))
    assert data_dir() == str(tmp_path)
