import io
import math

import pytest
from hypothesis import given, settings, strategies as st

from mrm.errors import BadMagic, ChecksumMismatch, CorruptManifest, LengthMismatch, UnsupportedVersion
from mrm.format import (
    ALIGN,
    DType,
    ModelKey,
    ModelManifest,
    deserialize_manifest,
    deserialize_model,
    estimate_footprint,
    read_model,
    serialize_model,
    write_model,
)

KEY = ModelKey("mxnet", "alexnet", "1.0.0")

# Layer dims of the classic two-tower AlexNet (grouped conv2/4/5).
ALEXNET = [
    ("conv1_weight", (96, 3, 11, 11)), ("conv1_bias", (96,)),
    ("conv2_weight", (256, 48, 5, 5)), ("conv2_bias", (256,)),
    ("conv3_weight", (384, 256, 3, 3)), ("conv3_bias", (384,)),
    ("conv4_weight", (384, 192, 3, 3)), ("conv4_bias", (384,)),
    ("conv5_weight", (256, 192, 3, 3)), ("conv5_bias", (256,)),
    ("fc6_weight", (4096, 9216)), ("fc6_bias", (4096,)),
    ("fc7_weight", (4096, 4096)), ("fc7_bias", (4096,)),
    ("fc8_weight", (1000, 4096)), ("fc8_bias", (1000,)),
]


def alexnet_manifest():
    return ModelManifest.build(KEY, [(n, d, DType.F64) for n, d in ALEXNET])


def test_model_key_validation():
    assert KEY.filename == "mxnet__alexnet__1.0.0.trms"
    assert ModelKey.from_filename(KEY.filename) == KEY
    for bad in [("", "a", "1"), ("a/b", "a", "1"), ("a", "b\0", "1"), ("a", "b", "1.x"), ("a", "b", "")]:
        with pytest.raises(ValueError):
            ModelKey(*bad)


def test_dtype_sizes():
    assert [d.itemsize for d in (DType.F64, DType.F32, DType.F16, DType.I8)] == [8, 4, 2, 1]


def test_single_tensor_round_trip_pads_to_64():
    m = ModelManifest.build(KEY, [("w", (2,), DType.F64)])
    data = bytes(range(16))
    blob = serialize_model(m, [data])
    got, blocks = deserialize_model(blob)
    assert got.blob_bytes == 64
    assert got.tensors == m.tensors and got.key == KEY
    assert blocks == [data]


def test_empty_manifest_is_valid():
    m = ModelManifest.build(KEY, [])
    got, blocks = deserialize_model(serialize_model(m, []))
    assert got.blob_bytes == 0 and blocks == []
    fp = estimate_footprint(got)
    assert (fp.weights_bytes, fp.workspace_bytes, fp.total_bytes) == (0, 0, 0)


def test_alexnet_blob_and_layer_footprints():
    m = alexnet_manifest()
    by_name = {t.name: t.nbytes for t in m.tensors}
    assert by_name["fc6_weight"] == 301_989_888
    assert by_name["fc7_weight"] == 134_217_728
    assert by_name["fc8_weight"] == 32_768_000
    assert by_name["conv2_weight"] == 2_457_600
    assert by_name["conv3_weight"] == 7_077_888
    # Independent sum: every tensor is already a multiple of 64 bytes.
    total = sum(math.prod(d) * 8 for _, d in ALEXNET)
    assert total == 487_721_792
    assert m.blob_bytes == total
    assert len(m.tensors) == 16


def test_alexnet_deserializes_losslessly():
    m = alexnet_manifest()
    blob = bytearray(m.blob_bytes)
    blob[::4099] = b"\x5a" * len(blob[::4099])
    buf = io.BytesIO()
    written = write_model(buf, m, blob)
    buf.seek(0)
    got, body = read_model(buf)
    assert got.tensors == m.tensors and got.checksum == written.checksum
    assert body == blob


def test_bad_magic_and_version():
    raw = bytearray(serialize_model(ModelManifest.build(KEY, [("w", (2,), DType.F64)]), [bytes(16)]))
    with pytest.raises(BadMagic):
        deserialize_manifest(b"XXXX" + bytes(raw[4:]))
    raw[4] = 9
    with pytest.raises(UnsupportedVersion):
        deserialize_manifest(bytes(raw))


def test_truncated_manifest():
    raw = serialize_model(ModelManifest.build(KEY, [("w", (2,), DType.F64)]), [bytes(16)])
    with pytest.raises(CorruptManifest):
        deserialize_manifest(raw[:30])


def test_length_mismatch():
    m = ModelManifest.build(KEY, [("w", (2,), DType.F64)])
    with pytest.raises(LengthMismatch):
        serialize_model(m, [bytes(15)])
    with pytest.raises(LengthMismatch):
        serialize_model(m, [])


def test_checksum_only_checked_on_verify():
    m = ModelManifest.build(KEY, [("w", (4,), DType.F64)])
    raw = bytearray(serialize_model(m, [bytes(range(32))]))
    raw[-40] ^= 0xFF  # inside the blob
    deserialize_manifest(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        deserialize_manifest(bytes(raw), verify=True)
    with pytest.raises(ChecksumMismatch):
        read_model(bytes(raw))


def test_structural_violations_rejected():
    from dataclasses import replace
    from mrm.format import TensorSpec, validate_manifest
    m = ModelManifest.build(KEY, [("a", (2,), DType.F64), ("b", (2,), DType.F64)])
    bad = [
        replace(m, tensors=(m.tensors[0], replace(m.tensors[1], name="a"))),
        replace(m, tensors=(m.tensors[0], replace(m.tensors[1], offset=8))),
        replace(m, tensors=(replace(m.tensors[0], nbytes=8), m.tensors[1])),
        replace(m, blob_bytes=m.blob_bytes + 64),
        replace(m, workspace_bytes=-1),
        replace(m, tensors=(TensorSpec("z", (0,), DType.F64, 0, 0),)),
    ]
    for b in bad:
        with pytest.raises(CorruptManifest):
            validate_manifest(b)


shapes = st.lists(st.tuples(st.lists(st.integers(1, 5), min_size=1, max_size=3),
                            st.sampled_from(list(DType))), max_size=6)


@settings(max_examples=100, deadline=None)
@given(shapes, st.integers(0, 10**6), st.randoms(use_true_random=False))
def test_round_trip_property(specs, workspace, rnd):
    m = ModelManifest.build(KEY, [(f"t{i}", d, dt) for i, (d, dt) in enumerate(specs)], workspace)
    data = [rnd.randbytes(t.nbytes) for t in m.tensors]
    got, blocks = deserialize_model(serialize_model(m, data))
    assert (got.key, got.tensors, got.workspace_bytes, got.blob_bytes) == \
        (m.key, m.tensors, m.workspace_bytes, m.blob_bytes)
    assert blocks == data
    assert all(t.offset % ALIGN == 0 for t in got.tensors)


@settings(max_examples=100, deadline=None)
@given(shapes, st.integers(0, 1000))
def test_footprint_additivity(specs, workspace):
    m = ModelManifest.build(KEY, [(f"t{i}", d, dt) for i, (d, dt) in enumerate(specs)], workspace)
    parts = [estimate_footprint(ModelManifest.build(KEY, [(t.name, t.dims, t.dtype)])).weights_bytes
             for t in m.tensors]
    fp = estimate_footprint(m)
    assert fp.weights_bytes == sum(parts)
    assert fp.total_bytes == fp.weights_bytes + workspace


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.data())
def test_any_single_byte_flip_detected(n, data):
    m = ModelManifest.build(KEY, [("w", (n,), DType.F64)])
    raw = bytearray(serialize_model(m, [bytes(i % 251 for i in range(n * 8))]))
    blob_start = len(raw) - 32 - m.blob_bytes
    i = data.draw(st.integers(blob_start, blob_start + m.blob_bytes - 1))
    raw[i] ^= 1 << data.draw(st.integers(0, 7))
    with pytest.raises(ChecksumMismatch):
        deserialize_manifest(bytes(raw), verify=True)
