import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterseg import tensorio
from clusterseg.tensorio import (
    ManifestError, TensorFormatError, load_manifest, read_tensor, write_tensor,
)

DTYPES = [np.float32, np.uint8, np.int32]


@st.composite
def tensors(draw):
    dtype = draw(st.sampled_from(DTYPES))
    ndim = draw(st.integers(1, 4))
    shape = tuple(draw(st.integers(1, 5)) for _ in range(ndim))
    n = int(np.prod(shape))
    if dtype == np.float32:
        vals = draw(st.lists(
            st.floats(-1e6, 1e6, width=32), min_size=n, max_size=n))
        return np.array(vals, dtype=np.float32).reshape(shape)
    if dtype == np.uint8:
        vals = draw(st.lists(st.integers(0, 255), min_size=n, max_size=n))
        return np.array(vals, dtype=np.uint8).reshape(shape)
    vals = draw(st.lists(st.integers(-2**31, 2**31 - 1), min_size=n, max_size=n))
    return np.array(vals, dtype=np.int32).reshape(shape)


@settings(max_examples=60, deadline=None)
@given(tensors())
def test_roundtrip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rt") / "t.lct"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_minimal_tensor_is_14_bytes(tmp_path):
    path = tmp_path / "one.lct"
    write_tensor(path, np.array([1.0], dtype=np.float32))
    assert path.stat().st_size == 14
    raw = path.read_bytes()
    assert raw[:4] == b"LCT1"
    assert raw[4] == 1  # f32
    assert raw[5] == 1  # ndim


def test_feature_grid_size_arithmetic(tmp_path):
    arr = np.random.default_rng(0).standard_normal((28, 28, 384)).astype(np.float32)
    path = tmp_path / "grid.lct"
    write_tensor(path, arr)
    # header: magic 4 + dtype 1 + ndim 1 + 3 dims x 4
    assert path.stat().st_size == 18 + 1_204_224
    assert np.array_equal(read_tensor(path), arr)


def test_zero_dimension_rejected(tmp_path):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "z.lct", np.zeros((0,), dtype=np.float32))


def test_ndim_out_of_range(tmp_path):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "z.lct", np.zeros((2, 2, 2, 2, 2), dtype=np.float32))


def test_unsupported_dtype(tmp_path):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "z.lct", np.zeros(3, dtype=np.float64))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.lct"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.lct"
    write_tensor(path, np.arange(10, dtype=np.int32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(TensorFormatError, match="payload"):
        read_tensor(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.lct"
    write_tensor(path, np.arange(4, dtype=np.uint8))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(TensorFormatError):
        read_tensor(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "t.lct"
    write_tensor(path, np.array([1.0], dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(TensorFormatError, match="dtype"):
        read_tensor(path)


def test_strict_finite(tmp_path):
    path = tmp_path / "nan.lct"
    write_tensor(path, np.array([np.nan], dtype=np.float32))
    read_tensor(path)  # lenient by default
    with pytest.raises(TensorFormatError, match="non-finite"):
        read_tensor(path, strict_finite=True)


def test_feature_kind_label_is_irrelevant(tmp_path):
    arr = np.random.default_rng(1).standard_normal((4, 4, 8)).astype(np.float32)
    for name in ("key.lct", "query.lct", "value.lct"):
        write_tensor(tmp_path / name, arr)
    grids = [tensorio.load_feature_grid(tmp_path / n).values
             for n in ("key.lct", "query.lct", "value.lct")]
    assert all(np.array_equal(g, grids[0]) for g in grids)


def _entry(image_id="0001", **overrides):
    obj = {
        "image_id": image_id,
        "split": "val",
        "image_path": f"images/{image_id}.png",
        "feature_paths": {"key": f"feats/{image_id}_key.lct"},
        "cls_path": f"cls/{image_id}.lct",
        "gt_path": None,
        "width": 224,
        "height": 224,
    }
    obj.update(overrides)
    return obj


def test_manifest_two_entries(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(
        json.dumps(_entry("0001")) + "\n" + json.dumps(_entry("0002")) + "\n"
    )
    mf = load_manifest(path)
    assert len(mf) == 2
    assert mf.by_id("0002").cls_path == "cls/0002.lct"
    assert mf.resolve("cls/0002.lct") == tmp_path / "cls/0002.lct"


def test_manifest_duplicate_id(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(_entry("0001")) + "\n" + json.dumps(_entry("0001")) + "\n")
    with pytest.raises(ManifestError, match="0001"):
        load_manifest(path)


def test_manifest_missing_field(tmp_path):
    entry = _entry("0001")
    del entry["cls_path"]
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(entry) + "\n")
    with pytest.raises(ManifestError, match="cls_path"):
        load_manifest(path)


def test_manifest_parse_error_names_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(_entry("0001")) + "\n{broken\n")
    with pytest.raises(ManifestError, match=":2"):
        load_manifest(path)
