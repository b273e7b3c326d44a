"""Byte formats: compressed container, model archive and binary PPM/PGM.

Container (all little-endian)::

    magic        4s   b"DCAE"
    version      u8   1
    profile_id   u8
    lambda_index u8   index into LAMBDAS, 255 = custom
    width        u32  original (pre-padding) width
    height       u32  original (pre-padding) height
    slice_count  u8
    z_stream_len u32
    slice_lens   u32 * slice_count
    z stream, then each slice stream, back to back

Model archive::

    magic        8s   b"DCAEMODL"
    config_len   u32
    config       JSON, UTF-8, sorted keys, compact separators
    tensor_count u32
    per tensor, sorted by name:
        name_len u16, name UTF-8, rank u8, dims u32 * rank,
        values f32 * prod(dims)
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, CorruptContainerError, IntegrityError, UnsupportedFormatError

MAGIC = b"DCAE"
VERSION = 1
ARCHIVE_MAGIC = b"DCAEMODL"

_FIXED = struct.Struct("<4sBBBIIB")


@dataclass(frozen=True)
class DcaeHeader:
    profile_id: int
    lambda_index: int
    width: int
    height: int
    slice_count: int
    z_stream_len: int
    slice_stream_lens: tuple
    version: int = VERSION

    @property
    def size(self):
        return _FIXED.size + 4 + 4 * self.slice_count


def write_container(header, z_stream, slice_streams):
    if len(z_stream) != header.z_stream_len or len(slice_streams) != header.slice_count:
        raise ValueError("header lengths disagree with the streams")
    if tuple(len(s) for s in slice_streams) != tuple(header.slice_stream_lens):
        raise ValueError("header slice lengths disagree with the streams")
    head = _FIXED.pack(
        MAGIC, header.version, header.profile_id, header.lambda_index,
        header.width, header.height, header.slice_count,
    )
    lens = struct.pack(f"<I{header.slice_count}I", header.z_stream_len, *header.slice_stream_lens)
    return head + lens + bytes(z_stream) + b"".join(bytes(s) for s in slice_streams)


def read_container(data):
    """Return ``(header, z_stream, slice_streams)``; validates magic, version and every length."""
    data = bytes(data)
    if len(data) < _FIXED.size:
        raise CorruptContainerError("container shorter than its fixed header")
    magic, version, profile_id, lam, width, height, count = _FIXED.unpack_from(data)
    if magic != MAGIC:
        raise CorruptContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported container version {version}")
    if width < 1 or height < 1 or count < 1:
        raise CorruptContainerError("zero width, height or slice count")
    end = _FIXED.size + 4 + 4 * count
    if len(data) < end:
        raise CorruptContainerError("truncated stream length table")
    z_len, *slice_lens = struct.unpack_from(f"<I{count}I", data, _FIXED.size)
    if end + z_len + sum(slice_lens) != len(data):
        raise CorruptContainerError(
            f"stream lengths sum to {end + z_len + sum(slice_lens)} bytes, file has {len(data)}"
        )
    header = DcaeHeader(profile_id, lam, width, height, count, z_len, tuple(slice_lens), version)
    z_stream = data[end : end + z_len]
    pos = end + z_len
    streams = []
    for n in slice_lens:
        streams.append(data[pos : pos + n])
        pos += n
    return header, z_stream, streams


# --------------------------------------------------------------------------
# portable pixmaps

_TOKEN = re.compile(rb"(?:\s|#[^\n\r]*[\n\r])*(\S+)")


def _read_netpbm(data, magic, channels):
    data = bytes(data)
    if data[:2] != magic:
        if data[:2] in (b"P1", b"P2", b"P3", b"P4", b"P5", b"P6"):
            raise UnsupportedFormatError(f"{data[:2].decode()} images are not supported, need {magic.decode()}")
        raise UnsupportedFormatError("not a portable pixmap")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise UnsupportedFormatError("truncated pixmap header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise UnsupportedFormatError(f"bad header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormatError(f"maxval {maxval} not supported, need 255")
    if width < 1 or height < 1:
        raise UnsupportedFormatError("zero-sized image")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise UnsupportedFormatError("missing whitespace before raster")
    pos += 1
    n = width * height * channels
    raster = data[pos : pos + n]
    if len(raster) != n:
        raise UnsupportedFormatError(f"raster has {len(raster)} bytes, expected {n}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels).copy()


def read_ppm(data):
    """Binary P6, maxval 255 -> (H, W, 3) uint8."""
    return _read_netpbm(data, b"P6", 3)


def write_ppm(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"write_ppm needs (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + image.tobytes()


def read_pgm(data):
    return _read_netpbm(data, b"P5", 1)[..., 0]


def write_pgm(image):
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"write_pgm needs (H, W) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode() + image.tobytes()


# --------------------------------------------------------------------------
# model archive


def write_archive(config, tensors):
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    out = [ARCHIVE_MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        encoded = name.encode()
        out.append(struct.pack(f"<H{len(encoded)}sB", len(encoded), encoded, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def read_archive(data):
    """Return ``(config_dict, {name: float32 array})``."""
    data = bytes(data)
    try:
        if data[:8] != ARCHIVE_MAGIC:
            raise CorruptContainerError("not a model archive (bad magic)")
        pos = 8
        (cfg_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        config = json.loads(data[pos : pos + cfg_len].decode())
        pos += cfg_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode()
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(data):
                raise IntegrityError(f"tensor {name!r} runs past the end of the archive")
            if name in tensors:
                raise IntegrityError(f"tensor {name!r} appears twice")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"malformed model archive: {exc}") from None
    if pos != len(data):
        raise IntegrityError(f"{len(data) - pos} trailing bytes after the last tensor")
    return config, tensors


def save_model(model):
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    return write_archive(model.config.to_dict(), tensors)


def load_model(data):
    from .model import DcaeModel, ModelConfig

    config, tensors = read_archive(data)
    try:
        cfg = ModelConfig.from_dict(config)
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"archive config is incomplete: {exc}") from None
    model = DcaeModel(cfg)
    params = model.named_parameters()
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise IntegrityError(f"archive tensors do not match the model: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise IntegrityError(f"tensor {name!r} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].astype(np.float32)
    return model
