import numpy as np
import pytest

from hcl.data import (
    CorpusFormatError,
    Dataset,
    epoch_permutation,
    generate_synthetic,
    iterate_batches,
    load_corpus,
    record_length,
    save_corpus,
)


def test_synthetic_is_deterministic_and_in_range():
    a = generate_synthetic(3, 8, 16)
    b = generate_synthetic(3, 8, 16)
    assert np.array_equal(a.images, b.images)
    assert a.images.shape == (8, 3, 16, 16)
    assert a.images.min() >= 0 and a.images.max() <= 1
    # image i depends only on (seed, i)
    assert np.array_equal(generate_synthetic(3, 4, 16).images, a.images[:4])
    assert not np.array_equal(generate_synthetic(4, 8, 16).images, a.images)


def test_synthetic_images_are_distinct():
    ds = generate_synthetic(0, 32, 16)
    flat = ds.images.reshape(32, -1)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    assert d[~np.eye(32, dtype=bool)].min() > 0.5


def test_dataset_is_read_only_and_validated():
    ds = generate_synthetic(0, 4, 8)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        Dataset([0, 0], np.zeros((2, 3, 4, 4)))
    with pytest.raises(ValueError):
        Dataset([0], np.zeros((1, 4, 4, 4)))
    rec = ds[2]
    assert rec.id == 2 and rec.pixels.shape == (3, 8, 8)


def test_split_partitions_ids():
    train, hold = generate_synthetic(0, 10, 8).split(0.2)
    assert len(train) == 8 and len(hold) == 2
    assert set(train.ids) | set(hold.ids) == set(range(10))


def test_corpus_round_trip(tmp_path):
    ds = generate_synthetic(1, 5, 8)
    path = tmp_path / "c.bin"
    save_corpus(ds, path, labels=[1, 2, 3, 4, 5])
    raw = path.read_bytes()
    assert len(raw) == 5 * record_length(8)
    assert raw[0] == 1 and raw[record_length(8)] == 2
    back = load_corpus(path, 8)
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-6
    # quantised data survives a second round trip exactly
    save_corpus(back, tmp_path / "d.bin", labels=[1, 2, 3, 4, 5])
    assert (tmp_path / "d.bin").read_bytes() == raw


def test_corpus_length_error_names_the_problem(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * (record_length(8) + 7))
    with pytest.raises(CorpusFormatError, match="7 trailing bytes"):
        load_corpus(path, 8)
    path.write_bytes(b"")
    with pytest.raises(CorpusFormatError):
        load_corpus(path, 8)


def test_batches_cover_every_record_once():
    ds = generate_synthetic(0, 10, 8)
    batches = list(iterate_batches(ds, 4, seed=5, epoch=1))
    assert [len(b[0]) for b in batches] == [4, 4, 2]
    ids = np.concatenate([b[0] for b in batches])
    assert sorted(ids.tolist()) == list(range(10))
    assert np.array_equal(ids, epoch_permutation(10, 5, 1))
    assert not np.array_equal(epoch_permutation(10, 5, 1), epoch_permutation(10, 5, 2))
