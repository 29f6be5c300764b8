import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasl.data import (
    DataError, Dataset, ParseError, SyntheticTask, augment, class_templates, generate_synthetic, load_idx,
    load_image_dir, nearest_template_predict, normalize_split, read_idx, split_dataset, write_idx, write_image_dir,
)


def test_synthetic_is_deterministic_and_balanced():
    task = SyntheticTask(class_count=4, image_size=8, samples_per_class=10, test_per_class=3, seed=7)
    a, b = generate_synthetic(task), generate_synthetic(task)
    assert np.array_equal(a.train.x, b.train.x) and np.array_equal(a.test.y, b.test.y)
    assert np.bincount(a.train.y).tolist() == [10] * 4
    assert a.train.x.shape == (40, 1, 8, 8) and len(a.test) == 12
    other = generate_synthetic(SyntheticTask(class_count=4, image_size=8, samples_per_class=10, seed=8))
    assert not np.array_equal(a.train.x, other.train.x)


def test_noise_free_samples_are_their_templates():
    task = SyntheticTask(class_count=6, image_size=12, samples_per_class=5, test_per_class=5, noise=0.0)
    split = generate_synthetic(task)
    pred = nearest_template_predict(split.test.x, class_templates(task))
    assert np.array_equal(pred, split.test.y)


def test_bad_task_raises():
    with pytest.raises(DataError):
        generate_synthetic(SyntheticTask(class_count=0))
    with pytest.raises(DataError):
        generate_synthetic(SyntheticTask(noise=-1.0))


def test_normalization_uses_train_statistics():
    split = normalize_split(generate_synthetic(SyntheticTask(class_count=3, image_size=6, samples_per_class=20,
                                                             noise=0.7)))
    assert abs(split.train.x.mean()) < 1e-12
    assert split.train.x.std() == pytest.approx(1.0)


def test_augment_shapes_and_determinism():
    x = np.random.default_rng(0).standard_normal((5, 2, 6, 6))
    a = augment(x, np.random.default_rng(3))
    assert a.shape == x.shape
    assert np.array_equal(a, augment(x, np.random.default_rng(3)))
    assert np.array_equal(augment(x, np.random.default_rng(3), max_shift=0, mirror=False), x)


def test_batches_cover_every_sample_once():
    d = Dataset(np.zeros((10, 1, 2, 2)), np.arange(10) % 2, 2)
    seen = np.concatenate([i for i, _, _ in d.batches(3, np.random.default_rng(0))])
    assert sorted(seen.tolist()) == list(range(10))


def test_inconsistent_dataset_raises():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 1, 2, 2)), np.zeros(2), 2)


# ---------------------------------------------------------------------------
# IDX


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([np.uint8, np.int16, np.int32, np.float32, np.float64]),
       st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 1000))
def test_idx_round_trip(tmp_path_factory, dtype, shape, seed):
    arr = (np.random.default_rng(seed).random(shape) * 100).astype(dtype)
    p = tmp_path_factory.mktemp("idx") / "a.idx"
    write_idx(p, arr)
    back = read_idx(p)
    assert back.dtype == np.dtype(dtype) and np.array_equal(back, arr)


def test_idx_parse_errors_report_offsets(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x00\x00")
    with pytest.raises(ParseError):
        read_idx(p)
    p.write_bytes(b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(ParseError) as e:
        read_idx(p)
    assert e.value.offset == 0
    p.write_bytes(b"\x00\x00\x07\x01" + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(ParseError) as e:
        read_idx(p)
    assert e.value.offset == 2
    p.write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 5) + b"\x00\x00")
    with pytest.raises(ParseError):
        read_idx(p)


def test_load_idx_dataset(tmp_path):
    x = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    write_idx(tmp_path / "x", x)
    write_idx(tmp_path / "y", np.array([1, 0], dtype=np.uint8))
    d = load_idx(tmp_path / "x", tmp_path / "y")
    assert d.x.shape == (2, 1, 3, 3) and d.class_count == 2
    write_idx(tmp_path / "y3", np.array([1, 0, 1], dtype=np.uint8))
    with pytest.raises(ParseError):
        load_idx(tmp_path / "x", tmp_path / "y3")


# ---------------------------------------------------------------------------
# image folders


@pytest.mark.parametrize("channels", [1, 3])
def test_image_dir_round_trip(tmp_path, channels):
    rng = np.random.default_rng(channels)
    d = Dataset(rng.integers(0, 256, (6, channels, 5, 4)).astype(float), np.array([0, 1, 2, 0, 1, 2]), 3)
    write_image_dir(tmp_path, d)
    back = load_image_dir(tmp_path)
    assert back.class_count == 3
    order = np.lexsort((np.arange(6), d.y))
    assert np.array_equal(back.x, d.x[order]) and np.array_equal(back.y, d.y[order])


def test_image_dir_errors(tmp_path):
    with pytest.raises(DataError):
        load_image_dir(tmp_path)
    with pytest.raises(DataError):
        load_image_dir(tmp_path / "missing")
    with pytest.raises(DataError):
        write_image_dir(tmp_path, Dataset(np.full((1, 1, 2, 2), 0.5), np.zeros(1), 1))


def test_split_dataset_partitions():
    d = Dataset(np.arange(20, dtype=float).reshape(20, 1, 1, 1), np.zeros(20), 1)
    s = split_dataset(d, 0.25, seed=1)
    assert len(s.test) == 5 and len(s.train) == 15
    assert sorted(np.concatenate([s.train.x.ravel(), s.test.x.ravel()]).tolist()) == list(range(20))
