import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcae.errors import CorruptContainerError, IntegrityError, UnsupportedFormatError
from dcae.formats import (
    DcaeHeader,
    load_model,
    read_archive,
    read_container,
    read_pgm,
    read_ppm,
    save_model,
    write_archive,
    write_container,
    write_pgm,
    write_ppm,
)
from dcae.model import DcaeModel, profile_config


@st.composite
def containers(draw):
    count = draw(st.integers(1, 6))
    z = draw(st.binary(max_size=40))
    slices = [draw(st.binary(max_size=40)) for _ in range(count)]
    header = DcaeHeader(
        profile_id=draw(st.integers(0, 255)),
        lambda_index=draw(st.integers(0, 255)),
        width=draw(st.integers(1, 2**32 - 1)),
        height=draw(st.integers(1, 2**32 - 1)),
        slice_count=count,
        z_stream_len=len(z),
        slice_stream_lens=tuple(len(s) for s in slices),
    )
    return header, z, slices


@given(containers())
def test_container_roundtrip(case):
    header, z, slices = case
    data = write_container(header, z, slices)
    assert len(data) == header.size + len(z) + sum(map(len, slices))
    h2, z2, s2 = read_container(data)
    assert (h2, z2, s2) == (header, z, slices)
    assert write_container(h2, z2, s2) == data


def test_header_stores_original_dims():
    header = DcaeHeader(0, 3, 100, 75, 1, 0, (0,))
    h, _, _ = read_container(write_container(header, b"", [b""]))
    assert (h.width, h.height) == (100, 75)


def test_truncation_and_trailing_bytes_are_rejected():
    header = DcaeHeader(0, 3, 10, 10, 2, 4, (2, 3))
    data = write_container(header, b"zzzz", [b"aa", b"bbb"])
    with pytest.raises(CorruptContainerError):
        read_container(data[:-1])
    with pytest.raises(CorruptContainerError):
        read_container(data + b"\0")
    with pytest.raises(CorruptContainerError):
        read_container(data[:10])


def test_bad_magic_and_version():
    data = bytearray(write_container(DcaeHeader(0, 3, 1, 1, 1, 0, (0,)), b"", [b""]))
    bad = bytes(b"XXXX" + data[4:])
    with pytest.raises(CorruptContainerError):
        read_container(bad)
    data[4] = 9
    with pytest.raises(UnsupportedFormatError):
        read_container(bytes(data))


def test_ppm_literal_black_pixel():
    img = read_ppm(b"P6\n1 1\n255\n\x00\x00\x00")
    assert img.shape == (1, 1, 3) and img.dtype == np.uint8 and not img.any()


def test_ppm_roundtrip_and_comments(rng):
    img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    np.testing.assert_array_equal(read_ppm(write_ppm(img)), img)
    commented = b"P6\n# made by hand\n8 8\n# another\n255\n" + img.tobytes()
    np.testing.assert_array_equal(read_ppm(commented), img)


def test_pgm_roundtrip(rng):
    img = rng.integers(0, 256, (5, 9), dtype=np.uint8)
    np.testing.assert_array_equal(read_pgm(write_pgm(img)), img)


@pytest.mark.parametrize(
    "data",
    [b"P3\n1 1\n255\n0 0 0", b"P6\n1 1\n65535\n\0\0\0\0\0\0", b"P6\n2 2\n255\n\0\0\0", b"GIF89a", b"P6\n1"],
)
def test_unsupported_pixmaps(data):
    with pytest.raises(UnsupportedFormatError):
        read_ppm(data)


def small_model_bytes(seed=0):
    return save_model(DcaeModel(profile_config("tiny", n_entries=4, dict_channels=8, head_dim=4), seed=seed))


def test_archive_save_load_save_is_identical():
    data = small_model_bytes()
    assert save_model(load_model(data)) == data


def test_archive_contains_dictionary():
    cfg, tensors = read_archive(small_model_bytes())
    assert tensors["entropy.dictionary"].shape == (4, 8)
    assert cfg["entropy"]["n_entries"] == 4


def test_archive_tensor_length_tamper_is_detected():
    cfg, tensors = read_archive(small_model_bytes())
    data = bytearray(write_archive(cfg, tensors))
    with pytest.raises(IntegrityError):
        read_archive(bytes(data[:-2]))
    with pytest.raises(IntegrityError):
        read_archive(bytes(data) + b"\0\0\0\0")
    # grow the first dimension of the first tensor so it runs past the data
    cfg_len = struct.unpack_from("<I", data, 8)[0]
    pos = 12 + cfg_len + 4
    name_len = struct.unpack_from("<H", data, pos)[0]
    dim_pos = pos + 2 + name_len + 1
    struct.pack_into("<I", data, dim_pos, 10**6)
    with pytest.raises(IntegrityError):
        read_archive(bytes(data))


def test_archive_shape_mismatch_is_detected():
    cfg, tensors = read_archive(small_model_bytes())
    tensors["entropy.dictionary"] = np.zeros((5, 8), dtype=np.float32)
    with pytest.raises(IntegrityError):
        load_model(write_archive(cfg, tensors))
    del tensors["entropy.dictionary"]
    with pytest.raises(IntegrityError):
        load_model(write_archive(cfg, tensors))


def test_archive_config_is_canonical_json():
    data = small_model_bytes()
    cfg_len = struct.unpack_from("<I", data, 8)[0]
    text = data[12 : 12 + cfg_len].decode()
    assert text == json.dumps(json.loads(text), sort_keys=True, separators=(",", ":"))


def test_archive_bad_magic():
    with pytest.raises(CorruptContainerError):
        read_archive(b"NOTMODEL" + b"\0" * 8)
