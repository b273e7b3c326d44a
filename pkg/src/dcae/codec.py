"""Image <-> container coding with a trained ``DcaeModel``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .entropy import LIKELIHOOD_BOUND, discretized_gaussian_pmf, factorized_pmf
from .errors import CorruptContainerError
from .formats import DcaeHeader, read_container, write_container
from .model import lambda_index
from .rans import default_scale_table, ideal_bits, logistic_table, rans_decode, rans_encode
from .transforms import crop_image, image_to_tensor, pad_image, quantize_round, tensor_to_image


@dataclass
class StreamReport:
    """Rates of one coded stream, in bits."""

    name: str
    count: int
    ideal_true: float  # -log2 of the model pmf at the modelled scale
    ideal_table: float  # -log2 of the continuous pmf at the table scale actually used
    ideal_q: float  # -log2 of quantized table probabilities, plus escape bits
    actual: int  # 8 * stream bytes


@dataclass
class CodingResult:
    container: bytes
    header: DcaeHeader
    z_symbols: np.ndarray
    slice_symbols: list
    y_hat: np.ndarray
    mus: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    image: np.ndarray | None = None


def _z_tables(model, z_shape):
    em = model.entropy
    loc = em.z_loc.data.reshape(-1).astype(np.float64)
    scale = np.exp(em.z_log_scale.data.reshape(-1).astype(np.float64))
    per_channel = [logistic_table(l, s) for l, s in zip(loc, scale)]
    _, c, h, w = z_shape
    return [per_channel[ch] for ch in range(c) for _ in range(h * w)], loc, scale


def _bits(p, floor=1e-300):
    return float(-np.log2(np.maximum(p, floor)).sum())


def _z_report(symbols, tables, loc, scale, z_shape, stream):
    c = z_shape[1]
    per = z_shape[2] * z_shape[3]
    ch = np.repeat(np.arange(c), per)
    p = factorized_pmf(symbols, loc[ch], scale[ch])
    true = _bits(p)
    return StreamReport("z", len(symbols), true, true, ideal_bits(symbols, tables), 8 * len(stream))


def _slice_tables(sigma):
    table = default_scale_table()
    idx = table.index(sigma.reshape(-1))
    return [table.tables[i] for i in idx], table.scales[idx]


def _slice_report(i, symbols, sigma, tables, table_sigma, stream):
    true = _bits(discretized_gaussian_pmf(symbols, sigma.reshape(-1)))
    tab = _bits(discretized_gaussian_pmf(symbols, table_sigma))
    return StreamReport(f"slice{i}", len(symbols), true, tab, ideal_bits(symbols, tables), 8 * len(stream))


def _hyper(model, z_hat):
    return model.h_s(T.Tensor(z_hat.astype(np.float32)))


def compress(model, pixels):
    """Encode an (H, W, 3) uint8 image into a container."""
    pixels = np.asarray(pixels)
    padded, (h, w) = pad_image(pixels, model.s_total)
    with T.no_grad():
        y = model.g_a(image_to_tensor(padded)).data
        z = model.h_a(T.Tensor(y)).data
        z_hat = quantize_round(z)
        f_z = _hyper(model, z_hat)
        passes = model.entropy.slice_pass(f_z, y=y)

    z_symbols = z_hat.astype(np.int64).reshape(-1)
    z_tables, loc, scale = _z_tables(model, z.shape)
    z_stream = rans_encode(z_symbols, z_tables)
    reports = [_z_report(z_symbols, z_tables, loc, scale, z.shape, z_stream)]

    streams = []
    for i, s in enumerate(passes.slices):
        symbols = s.symbols.reshape(-1)
        tables, table_sigma = _slice_tables(s.sigma)
        stream = rans_encode(symbols, tables)
        streams.append(stream)
        reports.append(_slice_report(i, symbols, s.sigma, tables, table_sigma, stream))

    cfg = model.config
    header = DcaeHeader(
        profile_id=cfg.profile_id,
        lambda_index=lambda_index(cfg.lmbda),
        width=w,
        height=h,
        slice_count=cfg.entropy.slice_count,
        z_stream_len=len(z_stream),
        slice_stream_lens=tuple(len(s) for s in streams),
    )
    container = write_container(header, z_stream, streams)
    return CodingResult(
        container,
        header,
        z_symbols,
        [s.symbols for s in passes.slices],
        passes.y_hat,
        [s.mu for s in passes.slices],
        [s.sigma for s in passes.slices],
        reports,
    )


def decompress(model, data):
    """Decode a container; ``result.image`` holds the (H, W, 3) uint8 reconstruction."""
    header, z_stream, streams = read_container(data)
    cfg = model.config
    if header.profile_id != cfg.profile_id or header.slice_count != cfg.entropy.slice_count:
        raise CorruptContainerError(
            f"container (profile {header.profile_id}, {header.slice_count} slices) does not match the model "
            f"(profile {cfg.profile_id}, {cfg.entropy.slice_count} slices)"
        )
    if header.lambda_index != lambda_index(cfg.lmbda):
        raise CorruptContainerError(
            f"container was coded at lambda index {header.lambda_index}, model is index {lambda_index(cfg.lmbda)}"
        )
    ae = cfg.autoencoder
    ph = -(-header.height // ae.s_total) * ae.s_total
    pw = -(-header.width // ae.s_total) * ae.s_total
    z_shape = (1, ae.z_channels, ph // ae.s_total, pw // ae.s_total)
    z_tables, _, _ = _z_tables(model, z_shape)
    z_symbols = rans_decode(z_stream, z_tables)
    z_hat = z_symbols.reshape(z_shape).astype(np.float64)

    def read_symbols(i, mu, sigma):
        tables, _ = _slice_tables(sigma)
        return rans_decode(streams[i], tables)

    with T.no_grad():
        f_z = _hyper(model, z_hat)
        passes = model.entropy.slice_pass(f_z, read_symbols=read_symbols)
        x_hat = model.g_s(T.Tensor(passes.y_bar))
    image = crop_image(tensor_to_image(x_hat), (header.height, header.width))
    return CodingResult(
        bytes(data),
        header,
        z_symbols,
        [s.symbols for s in passes.slices],
        passes.y_hat,
        [s.mu for s in passes.slices],
        [s.sigma for s in passes.slices],
        image=image,
    )


def ideal_rate(model, pixels):
    """Model rate in bits of the quantized symbols (no coding), y and z together."""
    padded, _ = pad_image(np.asarray(pixels), model.s_total)
    with T.no_grad():
        y = model.g_a(image_to_tensor(padded)).data
        z = model.h_a(T.Tensor(y)).data
        z_hat = quantize_round(z)
        passes = model.entropy.slice_pass(_hyper(model, z_hat), y=y)
    em = model.entropy
    loc = em.z_loc.data.astype(np.float64)
    scale = np.exp(em.z_log_scale.data.astype(np.float64))
    rate_z = _bits(factorized_pmf(z_hat, loc, scale), LIKELIHOOD_BOUND)
    rate_y = sum(_bits(discretized_gaussian_pmf(s.symbols, s.sigma), LIKELIHOOD_BOUND) for s in passes.slices)
    return rate_y, rate_z


def attention_maps(model, pixels, slice_index):
    """Attention weights of one slice, averaged over heads: (H_latent, W_latent, N)."""
    if not model.config.entropy.use_dca:
        raise ValueError("model has no dictionary attention")
    if not 0 <= slice_index < model.config.entropy.slice_count:
        raise IndexError(f"slice {slice_index} out of range")
    padded, _ = pad_image(np.asarray(pixels), model.s_total)
    with T.no_grad():
        y = model.g_a(image_to_tensor(padded)).data
        z_hat = quantize_round(model.h_a(T.Tensor(y)).data)
        passes = model.entropy.slice_pass(_hyper(model, z_hat), y=y, keep_attention=True)
    weights = passes.slices[slice_index].attention  # (1, heads, P, N)
    hh, ww = y.shape[2:]
    return weights[0].mean(axis=0).reshape(hh, ww, -1)


def export_attention_map(model, pixels, slice_index, entry):
    """Attention to one dictionary entry as an 8-bit map; constant maps become mid-gray 128."""
    maps = attention_maps(model, pixels, slice_index)
    if not 0 <= entry < maps.shape[-1]:
        raise IndexError(f"dictionary entry {entry} out of range (N={maps.shape[-1]})")
    return normalize_map(maps[..., entry])


def normalize_map(a):
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.full(a.shape, 128, dtype=np.uint8)
    return T.round_half_away((a - lo) / (hi - lo) * 255.0).astype(np.uint8)

