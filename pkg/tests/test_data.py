import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mistlab.data import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    DatasetHandle,
    load_mnist,
    parse_idx,
    parse_idx_bytes,
    write_idx,
)
from mistlab.exceptions import IDXFormatError, IDXMagicError, IDXOverflowError, IDXTruncatedError

# two 2x2 images, written out byte by byte
FIXTURE_IMAGES = bytes(
    [0x00, 0x00, 0x08, 0x03,
     0x00, 0x00, 0x00, 0x02,
     0x00, 0x00, 0x00, 0x02,
     0x00, 0x00, 0x00, 0x02,
     0, 255, 128, 7,
     1, 2, 254, 64]
)
FIXTURE_LABELS = bytes([0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 3, 9])


def test_magic_constants():
    assert IDX_LABELS_MAGIC == 0x00000801 and IDX_IMAGES_MAGIC == 0x00000803
    assert struct.unpack(">I", FIXTURE_LABELS[:4])[0] == IDX_LABELS_MAGIC


def test_fixture_images():
    data, shape = parse_idx_bytes(FIXTURE_IMAGES)
    assert shape == (2, 2, 2) and data.dtype == np.uint8
    np.testing.assert_array_equal(data, [[[0, 255], [128, 7]], [[1, 2], [254, 64]]])


def test_fixture_labels():
    data, shape = parse_idx_bytes(FIXTURE_LABELS)
    assert shape == (2,) and data.tolist() == [3, 9]


def test_fixture_files_and_gzip(tmp_path):
    (tmp_path / "a.idx").write_bytes(FIXTURE_IMAGES)
    (tmp_path / "a.idx.gz").write_bytes(gzip.compress(FIXTURE_IMAGES))
    plain, _ = parse_idx(tmp_path / "a.idx")
    packed, _ = parse_idx(tmp_path / "a.idx.gz")
    np.testing.assert_array_equal(plain, packed)


def test_write_idx_reproduces_fixture(tmp_path):
    data, _ = parse_idx_bytes(FIXTURE_IMAGES)
    write_idx(tmp_path / "out", data)
    assert (tmp_path / "out").read_bytes() == FIXTURE_IMAGES


@given(st.lists(st.integers(1, 5), min_size=1, max_size=3), st.integers(0, 1000))
@settings(max_examples=40)
def test_idx_roundtrip(tmp_path_factory, shape, seed):
    arr = np.random.default_rng(seed).integers(0, 256, size=shape).astype(np.uint8)
    path = tmp_path_factory.mktemp("idx") / "x"
    write_idx(path, arr)
    back, got = parse_idx(path)
    assert got == tuple(shape)
    np.testing.assert_array_equal(back, arr)


def test_truncated_payload_names_counts():
    with pytest.raises(IDXTruncatedError, match="expected 8 bytes, got 5") as info:
        parse_idx_bytes(FIXTURE_IMAGES[:-3])
    assert info.value.offset == len(FIXTURE_IMAGES) - 3


@pytest.mark.parametrize("cut", [0, 2, 7, 13])
def test_truncated_header(cut):
    with pytest.raises(IDXTruncatedError, match="byte offset"):
        parse_idx_bytes(FIXTURE_IMAGES[:cut])


def test_bad_magic():
    bad = b"\x00\x00\x0d\x03" + FIXTURE_IMAGES[4:]
    with pytest.raises(IDXMagicError, match="0x00000d03") as info:
        parse_idx_bytes(bad)
    assert info.value.offset == 0
    with pytest.raises(IDXMagicError):
        parse_idx_bytes(b"\x01\x00\x08\x01" + FIXTURE_LABELS[4:])


def test_trailing_bytes():
    with pytest.raises(IDXFormatError, match="trailing") as info:
        parse_idx_bytes(FIXTURE_LABELS + b"\x00")
    assert info.value.offset == len(FIXTURE_LABELS)


def test_extent_overflow():
    raw = b"\x00\x00\x08\x03" + struct.pack(">3I", 0xFFFFFFFF, 0xFFFFFFFF, 2)
    with pytest.raises(IDXOverflowError) as info:
        parse_idx_bytes(raw)
    assert info.value.offset == 8


def test_errors_are_distinct():
    kinds = {IDXMagicError, IDXOverflowError, IDXTruncatedError}
    assert len(kinds) == 3 and all(issubclass(k, IDXFormatError) for k in kinds)


def test_handle_rejects_out_of_range():
    with pytest.raises(ValueError):
        DatasetHandle(np.full((1, 1, 2, 2), 1.5), np.array([0]))
    with pytest.raises(ValueError):
        DatasetHandle(np.zeros((2, 1, 2, 2)), np.array([0]))


def test_load_mnist_from_fixture_rejects_swapped_files(tmp_path):
    (tmp_path / "t10k-images-idx3-ubyte").write_bytes(FIXTURE_LABELS)
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(FIXTURE_LABELS)
    with pytest.raises(IDXMagicError):
        load_mnist(tmp_path, "test")


def test_load_mnist_fixture(tmp_path):
    (tmp_path / "t10k-images-idx3-ubyte").write_bytes(FIXTURE_IMAGES)
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(FIXTURE_LABELS)
    ds = load_mnist(tmp_path, "test")
    assert ds.images.shape == (2, 1, 2, 2)
    assert ds.images[0, 0, 0, 1] == 1.0 and ds.images[1, 0, 1, 0] == 254 / 255
    assert ds.labels.tolist() == [3, 9] and len(ds.provenance) == 2


def test_real_mnist(mnist_dir):
    test = load_mnist(mnist_dir, "test")
    assert test.images.shape == (10000, 1, 28, 28)
    assert test.labels[:10].tolist() == [7, 2, 1, 0, 4, 1, 4, 9, 5, 9]
    assert np.bincount(test.labels).tolist() == [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]
    train = load_mnist(mnist_dir, "train", limit=100)
    assert train.labels[:5].tolist() == [5, 0, 4, 1, 9] and len(train) == 100
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0
