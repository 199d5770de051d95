import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel_hpo.data import (
    BadMagicError,
    CountMismatchError,
    Dataset,
    SplitSpec,
    TruncatedFileError,
    inject_label_noise,
    load_idx,
    split,
    synth_blobs,
    write_idx,
)
from bilevel_hpo.errors import ContractViolation


def test_load_idx_scales_pixels(tmp_path):
    images = np.array([[[0, 255], [128, 64]], [[1, 2], [3, 4]]], dtype=np.uint8)
    write_idx(images, [3, 7], tmp_path / "img", tmp_path / "lab")
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.x.dtype == np.float64
    assert ds.x[0].tolist() == [0.0, 1.0, 128 / 255, 64 / 255]
    assert ds.x[0, 2] == pytest.approx(0.50196, abs=1e-5)
    assert ds.y.tolist() == [3, 7]
    assert ds.num_classes == 8


def test_idx_header_layout(tmp_path):
    write_idx(np.zeros((2, 3, 4), dtype=np.uint8), [0, 1], tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 3, 4)
    assert len(raw) == 16 + 24
    assert struct.unpack(">II", (tmp_path / "l").read_bytes()[:8]) == (0x801, 2)


def test_count_mismatch(tmp_path):
    write_idx(np.zeros((2, 2, 2), dtype=np.uint8), [0, 1], tmp_path / "i", tmp_path / "l")
    write_idx(np.zeros((3, 2, 2), dtype=np.uint8), [0, 1, 2], tmp_path / "i3", tmp_path / "l3")
    with pytest.raises(CountMismatchError):
        load_idx(tmp_path / "i", tmp_path / "l3")


def test_empty_file_is_truncated(tmp_path):
    (tmp_path / "i").write_bytes(b"")
    (tmp_path / "l").write_bytes(b"")
    with pytest.raises(TruncatedFileError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_short_body_is_truncated(tmp_path):
    write_idx(np.zeros((2, 2, 2), dtype=np.uint8), [0, 1], tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(raw[:-1])
    with pytest.raises(TruncatedFileError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_bad_magic(tmp_path):
    write_idx(np.zeros((1, 2, 2), dtype=np.uint8), [0], tmp_path / "i", tmp_path / "l")
    # swapped roles: label file where images are expected
    with pytest.raises(BadMagicError):
        load_idx(tmp_path / "l", tmp_path / "i")


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(0, 5),
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_idx_round_trip(tmp_path_factory, n, rows, cols, seed):
    d = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    write_idx(images, labels, d / "i", d / "l")
    ds = load_idx(d / "i", d / "l", num_classes=10)
    assert np.array_equal(np.rint(ds.x * 255).astype(np.uint8), images.reshape(n, rows * cols))
    assert np.array_equal(ds.y, labels)


def test_synth_blobs_empty():
    assert len(synth_blobs(3, 2, 0, 1.0, 0)) == 0


def test_synth_blobs_nearest_centroid_separable():
    # centre directions are random, so in 2-D an unlucky seed can put them
    # close together; seed 0 is a typical draw
    ds = synth_blobs(2, 2, 100, 10.0, seed=0)
    centroids = np.stack([ds.x[ds.y == k].mean(axis=0) for k in range(2)])
    pred = np.argmin(((ds.x[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == ds.y).mean() >= 0.99


def test_synth_blobs_deterministic():
    a, b = synth_blobs(3, 4, 10, 2.0, 5), synth_blobs(3, 4, 10, 2.0, 5)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.x, synth_blobs(3, 4, 10, 2.0, 6).x)


def test_noise_zero_is_identity():
    ds = synth_blobs(4, 2, 25, 1.0, 0)
    noisy = inject_label_noise(ds, 0.0, 1)
    assert np.array_equal(noisy.y, ds.y) and not noisy.noise_mask.any()


def test_noise_one_flips_everything():
    ds = synth_blobs(4, 2, 250, 1.0, 0)
    noisy = inject_label_noise(ds, 1.0, 1)
    assert (noisy.y != ds.y).all() and noisy.noise_mask.all()


@pytest.mark.parametrize("k", [2, 3, 5])
def test_flipped_labels_are_wrong_and_uniform(k):
    ds = Dataset(np.zeros((3000, 1)), np.arange(3000) % k, k)
    noisy = inject_label_noise(ds, 1.0, seed=k)
    assert (noisy.y != ds.y).all()
    # every wrong label appears, roughly equally often
    for c in range(k):
        wrong = noisy.y[ds.y == c]
        counts = np.bincount(wrong, minlength=k)
        assert counts[c] == 0
        assert counts[np.arange(k) != c].min() > 0.8 * len(wrong) / (k - 1)


def test_noise_fraction_concentrates():
    ds = Dataset(np.zeros((10000, 1)), np.zeros(10000, dtype=int), 3)
    frac = inject_label_noise(ds, 0.5, 11).noise_mask.mean()
    assert 0.47 <= frac <= 0.53


def test_noise_leaves_source_unchanged():
    ds = synth_blobs(3, 2, 10, 1.0, 0)
    before = ds.y.copy()
    inject_label_noise(ds, 0.7, 2)
    assert np.array_equal(ds.y, before) and ds.noise_mask is None


def test_noise_needs_two_classes():
    ds = Dataset(np.zeros((4, 1)), np.zeros(4, dtype=int), 1)
    with pytest.raises(ContractViolation):
        inject_label_noise(ds, 0.1, 0)
    assert len(inject_label_noise(ds, 0.0, 0)) == 4


def test_split_sizes_and_disjointness():
    ds = Dataset(np.arange(20.0).reshape(20, 1), np.zeros(20, dtype=int), 1)
    tr, va, te = split(ds, SplitSpec(10, 5, 3, seed=4))
    assert (len(tr), len(va), len(te)) == (10, 5, 3)
    ids = np.concatenate([tr.x[:, 0], va.x[:, 0], te.x[:, 0]])
    assert len(set(ids)) == 18


def test_split_empty_and_full():
    ds = Dataset(np.arange(6.0).reshape(6, 1), np.zeros(6, dtype=int), 1)
    assert [len(s) for s in split(ds, SplitSpec(0, 0, 0))] == [0, 0, 0]
    parts = split(ds, SplitSpec(3, 2, 1, seed=9))
    assert sorted(np.concatenate([p.x[:, 0] for p in parts])) == list(range(6))


def test_split_deterministic_and_oversized():
    ds = synth_blobs(2, 2, 10, 1.0, 0)
    a = split(ds, SplitSpec(5, 5, 5, seed=1))
    b = split(ds, SplitSpec(5, 5, 5, seed=1))
    assert all(np.array_equal(x.x, y.x) for x, y in zip(a, b))
    with pytest.raises(ContractViolation):
        split(ds, SplitSpec(10, 10, 1))


def test_dataset_validation():
    with pytest.raises(ContractViolation):
        Dataset(np.zeros((2, 1)), [0, 3], 3)
    with pytest.raises(ContractViolation):
        Dataset(np.zeros((2, 1)), [0], 2)
    with pytest.raises(ContractViolation):
        Dataset(np.array([[np.nan], [0.0]]), [0, 1], 2)
    ex = synth_blobs(2, 3, 1, 1.0, 0).examples
    assert len(ex) == 2 and ex[0].x.shape == (3,) and isinstance(ex[0].y, int)
