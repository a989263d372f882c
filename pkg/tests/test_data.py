import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedent.data import (
    IDXFormatError,
    LabeledDataset,
    PartitionSpec,
    label_histograms,
    load_idx,
    make_synthetic,
    partition,
    total_variation,
    train_test_split,
    write_idx,
)
from fedent.models import Batch, ModelSpec, gradient, predict_proba

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist5k"


def idx_fixture(tmp_path, images_magic=0x803, n_labels=2, truncate=0, gz=False):
    pixels = bytes([0, 255, 128, 64, 1, 2, 3, 4, 250, 251, 252, 253])  # two 2x3 images
    img = struct.pack(">IIII", images_magic, 2, 2, 3) + pixels
    lab = struct.pack(">II", 0x801, n_labels) + bytes([7, 3][:n_labels])
    if truncate:
        img = img[:-truncate]
    opener = gzip.compress if gz else (lambda b: b)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(opener(img))
    lp.write_bytes(opener(lab))
    return ip, lp, pixels


@pytest.mark.parametrize("gz", [False, True])
def test_idx_fixture_round_trip(tmp_path, gz):
    ip, lp, pixels = idx_fixture(tmp_path, gz=gz)
    ds = load_idx(ip, lp)
    assert ds.X.shape == (2, 6) and ds.num_classes == 10
    np.testing.assert_array_equal(ds.X.ravel(), np.frombuffer(pixels, np.uint8) / 255.0)
    np.testing.assert_array_equal(ds.y, [7, 3])


def test_idx_errors(tmp_path):
    ip, lp, _ = idx_fixture(tmp_path, images_magic=0x801)
    with pytest.raises(IDXFormatError, match="bad magic 0x00000801 at offset 0"):
        load_idx(ip, lp)
    ip, lp, _ = idx_fixture(tmp_path, truncate=3)
    with pytest.raises(IDXFormatError, match="truncated"):
        load_idx(ip, lp)
    ip, lp, _ = idx_fixture(tmp_path, n_labels=1)
    with pytest.raises(IDXFormatError, match="count mismatch"):
        load_idx(ip, lp)


def test_write_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 4, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, 5).astype(np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", images, labels)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(np.rint(ds.X * 255).astype(np.uint8), images.reshape(5, 16))
    np.testing.assert_array_equal(ds.y, labels)


def test_bundled_mnist_subset():
    ds = load_idx(MNIST_DIR / "images-idx3-ubyte.gz", MNIST_DIR / "labels-idx1-ubyte.gz")
    assert ds.X.shape == (5000, 784) and ds.num_classes == 10
    assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0
    np.testing.assert_array_equal(np.bincount(ds.y), [500] * 10)


@pytest.mark.skipif("FEDENT_MNIST_DIR" not in os.environ, reason="full MNIST training files not available")
def test_full_mnist_training_files():
    root = Path(os.environ["FEDENT_MNIST_DIR"])
    ds = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    assert len(ds) == 60000 and ds.X.shape[1] == 784 and ds.num_classes == 10


def gd_train_accuracy(ds, steps=500, lr=0.5):
    spec = ModelSpec("softmax_regression", ds.X.shape[1], ds.num_classes)
    w = np.zeros(spec.n_params)
    for _ in range(steps):
        w -= lr * gradient(spec, w, ds.examples)
    return float(np.mean(predict_proba(spec, w, ds.X).argmax(1) == ds.y))


def test_synthetic_separable_and_signal_free():
    sep = make_synthetic(2, 200, 2, 10.0, np.random.default_rng(0))
    assert gd_train_accuracy(sep) >= 0.99
    full = make_synthetic(4, 500, 3, 0.0, np.random.default_rng(1))
    train, test = train_test_split(full, 1000, 1000, np.random.default_rng(2))
    spec = ModelSpec("softmax_regression", 3, 4)
    w = np.zeros(spec.n_params)
    for _ in range(300):
        w -= 0.5 * gradient(spec, w, train.examples)
    acc = float(np.mean(predict_proba(spec, w, test.X).argmax(1) == test.y))
    assert abs(acc - 0.25) <= 0.05


def test_synthetic_is_deterministic():
    a = make_synthetic(3, 10, 4, 2.0, np.random.default_rng(5))
    b = make_synthetic(3, 10, 4, 2.0, np.random.default_rng(5))
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)


def test_train_test_split_is_stratified_and_disjoint():
    ds = make_synthetic(3, 100, 2, 1.0, np.random.default_rng(0))
    ds.X[:, 1] = np.arange(300)  # unique tag per example
    train, test = train_test_split(ds, 150, 60, np.random.default_rng(1))
    np.testing.assert_array_equal(np.bincount(train.y), [50, 50, 50])
    np.testing.assert_array_equal(np.bincount(test.y), [20, 20, 20])
    assert not set(train.X[:, 1]) & set(test.X[:, 1])


def test_partition_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec("dirichlet", 3)
    with pytest.raises(ValueError):
        PartitionSpec("iid", 3, alpha_d=1.0)
    with pytest.raises(ValueError):
        PartitionSpec("pathological", 3)
    with pytest.raises(ValueError):
        PartitionSpec("shuffle", 3)


def small_dataset(n_per_class=40, classes=5, seed=0):
    return make_synthetic(classes, n_per_class, 2, 1.0, np.random.default_rng(seed))


scheme_specs = st.one_of(
    st.builds(lambda n, s: PartitionSpec("iid", n, s), st.integers(1, 20), st.integers(0, 1000)),
    st.builds(lambda n, s, a: PartitionSpec("dirichlet", n, s, alpha_d=a),
              st.integers(1, 10), st.integers(0, 1000), st.sampled_from([0.1, 0.5, 1.0, 10.0])),
    st.builds(lambda n, s, k: PartitionSpec("pathological", n, s, shards_per_client=k),
              st.integers(1, 20), st.integers(0, 1000), st.integers(1, 3)),
)


@settings(max_examples=50, deadline=None)
@given(scheme_specs)
def test_partitions_cover_disjointly_with_exact_weights(spec):
    ds = small_dataset()
    parts = partition(ds, spec)
    allidx = np.concatenate([p.indices for p in parts])
    np.testing.assert_array_equal(np.sort(allidx), np.arange(len(ds)))
    assert abs(sum(p.theta for p in parts) - 1.0) <= 1e-12
    for p in parts:
        assert p.theta == p.size / len(ds)
    again = partition(ds, spec)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(parts, again))


def test_dirichlet_large_alpha_matches_global():
    ds = make_synthetic(10, 5000, 2, 1.0, np.random.default_rng(0))
    parts = partition(ds, PartitionSpec("dirichlet", 10, 0, alpha_d=1e6))
    glob = np.bincount(ds.y, minlength=10)
    assert max(total_variation(h, glob) for h in label_histograms(ds, parts)) <= 0.05


def test_dirichlet_tiny_alpha_gives_single_class_clients():
    ds = make_synthetic(10, 100, 2, 1.0, np.random.default_rng(0))
    parts = partition(ds, PartitionSpec("dirichlet", 100, 0, alpha_d=1e-3))
    hist = label_histograms(ds, parts)
    assert np.mean((hist > 0).sum(axis=1) == 1) >= 0.9


def test_pathological_limits_labels_per_client():
    ds = load_idx(MNIST_DIR / "images-idx3-ubyte.gz", MNIST_DIR / "labels-idx1-ubyte.gz")
    parts = partition(ds, PartitionSpec("pathological", 100, 0, shards_per_client=2))
    hist = label_histograms(ds, parts)
    assert (hist > 0).sum(axis=1).max() <= 2


def test_iid_histograms_close_to_global():
    ds = make_synthetic(10, 1000, 2, 1.0, np.random.default_rng(0))
    parts = partition(ds, PartitionSpec("iid", 10, 3))
    glob = np.bincount(ds.y)
    assert max(total_variation(h, glob) for h in label_histograms(ds, parts)) <= 0.1


def test_empty_client_is_reported():
    ds = make_synthetic(2, 6, 2, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError, match="larger dataset or fewer clients"):
        partition(ds, PartitionSpec("dirichlet", 12, 0, alpha_d=1e-3))
    with pytest.raises(ValueError, match="exceeds dataset size"):
        partition(ds, PartitionSpec("iid", 13, 0))
