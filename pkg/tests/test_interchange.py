import io
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from despur.interchange import (
    CorruptionError,
    FeatureSet,
    FormatError,
    ShapeMismatchError,
    ValidationError,
    VocabularyError,
    container_size,
    merge_feature_sets,
    read_feature_set,
    write_feature_set,
)


def small_set(n=3, dim=2, tag="original_train", prefix="row"):
    rng = np.random.default_rng(n * 31 + dim)
    return FeatureSet(
        dim=dim,
        ids=[f"{prefix}{i}" for i in range(n)],
        labels=rng.integers(0, 2, size=n),
        features=rng.normal(size=(n, dim)).astype(np.float32),
        class_names=["cat", "dog"],
        source_tag=tag,
    )


def test_round_trip_is_bit_exact():
    fs = small_set(5, 7)
    buf = io.BytesIO()
    write_feature_set(fs, buf)
    back = read_feature_set(buf.getvalue())
    assert back == fs
    assert back.features.dtype == np.float32
    assert np.array_equal(back.features.view(np.uint32), fs.features.view(np.uint32))


def test_write_twice_identical_bytes():
    fs = small_set(4, 3)
    a, b = io.BytesIO(), io.BytesIO()
    write_feature_set(fs, a)
    write_feature_set(fs, b)
    assert a.getvalue() == b.getvalue()


def test_container_size_formula():
    # Hand arithmetic: 5 magic + 4 count + 4 dim + 4*count*dim floats
    # + trailer + 8 length word.
    fs = small_set(1, 2)
    buf = io.BytesIO()
    n = write_feature_set(fs, buf)
    raw = buf.getvalue()
    trailer_len = struct.unpack("<Q", raw[-8:])[0]
    assert n == len(raw)
    assert n == 5 + 4 + 4 + 4 * 1 * 2 + trailer_len + 8
    assert n == container_size(1, 2, trailer_len)


def test_single_zero_row_float_region_zero_bytes():
    fs = FeatureSet(
        dim=2,
        ids=["only"],
        labels=np.array([0]),
        features=np.zeros((1, 2), dtype=np.float32),
        class_names=["a"],
        source_tag="t",
    )
    raw = io.BytesIO()
    write_feature_set(fs, raw)
    assert raw.getvalue()[13 : 13 + 8] == b"\x00" * 8


def test_special_float_values_survive():
    # Denormals and negative zero must round trip bit-for-bit.
    vals = np.array([[np.float32(1e-42), np.float32(-0.0)]], dtype=np.float32)
    fs = FeatureSet(
        dim=2, ids=["r"], labels=np.array([0]), features=vals,
        class_names=["a"], source_tag="t",
    )
    buf = io.BytesIO()
    write_feature_set(fs, buf)
    back = read_feature_set(buf.getvalue())
    assert np.array_equal(back.features.view(np.uint32), vals.view(np.uint32))


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(min_value=0, max_value=9),
    dim=st.integers(min_value=1, max_value=6),
    n_classes=st.integers(min_value=1, max_value=4),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_round_trip_property(n, dim, n_classes, seed):
    rng = np.random.default_rng(seed)
    fs = FeatureSet(
        dim=dim,
        ids=[f"id{i}" for i in range(n)],
        labels=rng.integers(0, n_classes, size=n),
        features=(rng.normal(size=(n, dim)) * 10).astype(np.float32),
        class_names=[f"c{j}" for j in range(n_classes)],
        source_tag="prop",
    )
    buf = io.BytesIO()
    written = write_feature_set(fs, buf)
    raw = buf.getvalue()
    trailer_len = struct.unpack("<Q", raw[-8:])[0]
    assert written == container_size(n, dim, trailer_len)
    assert read_feature_set(raw) == fs


def test_bad_magic_rejected():
    fs = small_set()
    buf = io.BytesIO()
    write_feature_set(fs, buf)
    raw = bytearray(buf.getvalue())
    raw[:5] = b"NOPE!"
    with pytest.raises(FormatError):
        read_feature_set(bytes(raw))


def test_truncated_float_block_rejected():
    fs = small_set(3, 4)
    buf = io.BytesIO()
    write_feature_set(fs, buf)
    raw = buf.getvalue()
    with pytest.raises(CorruptionError):
        read_feature_set(raw[: 13 + 5])


def test_trailer_row_count_mismatch_rejected():
    fs = small_set(2, 2)
    buf = io.BytesIO()
    write_feature_set(fs, buf)
    raw = bytearray(buf.getvalue())
    # Bump the header row count without touching the trailer.
    raw[5:9] = struct.pack("<I", 3)
    extra = b"\x00" * 8  # keep the float block long enough for 3 rows
    corrupted = bytes(raw[:13]) + bytes(raw[13 : 13 + 16]) + extra + bytes(raw[13 + 16 :])
    with pytest.raises(CorruptionError):
        read_feature_set(corrupted)


def test_nan_in_float_block_names_row_id():
    fs = small_set(3, 2)
    buf = io.BytesIO()
    write_feature_set(fs, buf)
    raw = bytearray(buf.getvalue())
    nan = struct.pack("<f", float("nan"))
    # Second row, first feature.
    raw[13 + 8 : 13 + 12] = nan
    with pytest.raises(ValidationError, match="row1"):
        read_feature_set(bytes(raw))


def test_label_out_of_vocabulary_rejected():
    with pytest.raises(ValidationError):
        FeatureSet(
            dim=1,
            ids=["a"],
            labels=np.array([5]),
            features=np.zeros((1, 1), dtype=np.float32),
            class_names=["only"],
            source_tag="t",
        )


def test_duplicate_ids_rejected():
    with pytest.raises(ValidationError):
        FeatureSet(
            dim=1,
            ids=["same", "same"],
            labels=np.array([0, 0]),
            features=np.zeros((2, 1), dtype=np.float32),
            class_names=["c"],
            source_tag="t",
        )


def test_merge_disjoint_ids_concatenates():
    a = small_set(3, 2, tag="ta", prefix="a")
    b = small_set(2, 2, tag="tb", prefix="b")
    merged = merge_feature_sets(a, b)
    assert merged.ids == a.ids + b.ids
    assert len(merged) == 5
    assert merged.source_tag == "ta+tb"
    np.testing.assert_array_equal(merged.labels, np.concatenate([a.labels, b.labels]))


def test_merge_colliding_ids_prefixed_by_source_tag():
    a = small_set(2, 2, tag="left", prefix="img")
    b = small_set(2, 2, tag="right", prefix="img")
    merged = merge_feature_sets(a, b)
    assert merged.ids == ["left:img0", "left:img1", "right:img0", "right:img1"]


def test_merge_with_empty_returns_other_side():
    a = small_set(3, 2)
    empty = FeatureSet(
        dim=2,
        ids=[],
        labels=np.zeros(0, dtype=np.int64),
        features=np.zeros((0, 2), dtype=np.float32),
        class_names=["cat", "dog"],
        source_tag="empty",
    )
    assert merge_feature_sets(a, empty) == a
    assert merge_feature_sets(empty, a) == a


def test_merge_dim_mismatch_and_vocabulary_mismatch():
    a = small_set(2, 2)
    b = small_set(2, 3)
    with pytest.raises(ShapeMismatchError):
        merge_feature_sets(a, b)
    c = FeatureSet(
        dim=2,
        ids=["x"],
        labels=np.array([0]),
        features=np.zeros((1, 2), dtype=np.float32),
        class_names=["bird", "dog"],
        source_tag="t",
    )
    with pytest.raises(VocabularyError):
        merge_feature_sets(a, c)


def test_select_ids_preserves_order_and_rejects_unknown():
    fs = small_set(4, 2)
    sub = fs.select_ids(["row2", "row0"])
    assert sub.ids == ["row2", "row0"]
    np.testing.assert_array_equal(sub.features[0], fs.features[2])
    with pytest.raises(KeyError):
        fs.select_ids(["missing"])


def test_trailer_is_utf8_json_with_expected_keys():
    fs = small_set(2, 2)
    buf = io.BytesIO()
    write_feature_set(fs, buf)
    raw = buf.getvalue()
    trailer_len = struct.unpack("<Q", raw[-8:])[0]
    trailer = json.loads(raw[-8 - trailer_len : -8].decode("utf-8"))
    assert set(trailer) == {"ids", "labels", "class_names", "source_tag"}


def test_constructor_does_not_freeze_caller_array():
    arr = np.zeros((1, 2), dtype=np.float32)
    FeatureSet(
        dim=2, ids=["a"], labels=np.array([0]), features=arr,
        class_names=["c"], source_tag="t",
    )
    arr[0, 0] = 1.0  # caller's array must stay writable
