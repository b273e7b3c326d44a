"""Analysis/synthesis transforms, hyper transforms, quantizers and image padding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import HE_GAIN, Conv2d, ConvTranspose2d, Module
from .tensor import Tensor, round_half_away


def _log2_exact(n, what):
    if n < 1 or n & (n - 1):
        raise ConfigurationError(f"{what} must be a power of two, got {n}")
    return n.bit_length() - 1


@dataclass(frozen=True)
class AutoencoderConfig:
    y_channels: int = 32
    z_channels: int = 16
    stage_channels: tuple = (16, 24, 32)
    downsample_factor_y: int = 16
    downsample_factor_z: int = 4
    profile_name: str = "tiny"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        n_y = _log2_exact(self.downsample_factor_y, "downsample_factor_y")
        _log2_exact(self.downsample_factor_z, "downsample_factor_z")
        if n_y < 1 or len(self.stage_channels) != n_y - 1:
            raise ConfigurationError(
                f"{n_y} down-sampling stages need {n_y - 1} stage channels, got {self.stage_channels}"
            )

    @property
    def s_total(self):
        return self.downsample_factor_y * self.downsample_factor_z


PROFILES = {
    "tiny": AutoencoderConfig(),
    "paper": AutoencoderConfig(
        y_channels=320,
        z_channels=192,
        stage_channels=(96, 144, 256),
        downsample_factor_y=16,
        downsample_factor_z=4,
        profile_name="paper",
    ),
}


class AnalysisTransform(Module):
    """g_a: strided 4x4 convolutions with GELU between stages."""

    def __init__(self, rng, cfg):
        super().__init__()
        widths = (3,) + cfg.stage_channels + (cfg.y_channels,)
        self.convs = [
            self.add_child(f"conv{i}", Conv2d(rng, a, b, 4, stride=2, padding=1, gain=HE_GAIN))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.cfg = cfg

    def forward(self, x):
        s = self.cfg.downsample_factor_y
        if x.shape[2] % s or x.shape[3] % s:
            raise DimensionError(f"analyze: image dims {x.shape[2:]} must be multiples of {s}; pad first")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = T.gelu(x)
        return x


class SynthesisTransform(Module):
    """g_s: transposed convolutions mirroring g_a."""

    def __init__(self, rng, cfg):
        super().__init__()
        widths = (cfg.y_channels,) + cfg.stage_channels[::-1] + (3,)
        last = len(widths) - 2
        self.convs = [
            self.add_child(
                f"deconv{i}",
                ConvTranspose2d(rng, a, b, 4, stride=2, padding=1, gain=1.0 if i == last else HE_GAIN),
            )
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.cfg = cfg

    def forward(self, y, clamp=True):
        if y.shape[1] != self.cfg.y_channels:
            raise DimensionError(f"synthesize: expected {self.cfg.y_channels} channels, got {y.shape}")
        x = y
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = T.gelu(x)
        x = T.add(x, 0.5)  # outputs start around mid-gray
        return T.clamp(x, 0.0, 1.0) if clamp else x


class HyperAnalysis(Module):
    """h_a: y -> z, down-sampling by ``downsample_factor_z``."""

    def __init__(self, rng, cfg):
        super().__init__()
        c = cfg.y_channels
        n = _log2_exact(cfg.downsample_factor_z, "downsample_factor_z")
        self.head = self.add_child("conv_in", Conv2d(rng, c, c, 3, padding=1, gain=HE_GAIN))
        widths = [c] * n + [cfg.z_channels]
        self.down = [
            self.add_child(f"down{i}", Conv2d(rng, a, b, 4, stride=2, padding=1, gain=HE_GAIN))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.cfg = cfg

    def forward(self, y):
        if y.shape[1] != self.cfg.y_channels:
            raise DimensionError(f"hyper_analyze: expected {self.cfg.y_channels} channels, got {y.shape}")
        x = T.gelu(self.head(y))
        for i, conv in enumerate(self.down):
            x = conv(x)
            if i < len(self.down) - 1:
                x = T.gelu(x)
        return x


class HyperSynthesis(Module):
    """h_s: z_hat -> F_z with 2 * y_channels channels at latent resolution."""

    def __init__(self, rng, cfg):
        super().__init__()
        c = cfg.y_channels
        n = _log2_exact(cfg.downsample_factor_z, "downsample_factor_z")
        widths = [cfg.z_channels] + [c] * n
        self.up = [
            self.add_child(f"up{i}", ConvTranspose2d(rng, a, b, 4, stride=2, padding=1, gain=HE_GAIN))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.tail = self.add_child("conv_out", Conv2d(rng, c, 2 * c, 3, padding=1, gain=HE_GAIN))
        self.cfg = cfg

    def forward(self, z_hat):
        if z_hat.shape[1] != self.cfg.z_channels:
            raise DimensionError(f"hyper_synthesize: expected {self.cfg.z_channels} channels, got {z_hat.shape}")
        x = z_hat
        for conv in self.up:
            x = T.gelu(conv(x))
        return self.tail(x)


MEAN_GRID = 2.0**-16


def snap_mean(mu):
    """Round means to a dyadic grid so ``symbols + mu`` is exact in float64."""
    return round_half_away(np.asarray(mu, dtype=np.float64) / MEAN_GRID) * MEAN_GRID


def quantize_latent(y, mu):
    """Return ``(y_hat, symbols)`` with ``symbols = round(y - mu')``, ``y_hat = symbols + mu'``.

    ``mu'`` is ``mu`` snapped to ``MEAN_GRID``; with that, ``y_hat - mu'``
    recovers the integer symbol exactly for any ``|y_hat| < 2**36``.
    """
    y, mu = np.asarray(y, dtype=np.float64), np.asarray(mu)
    if y.shape != mu.shape:
        raise DimensionError(f"quantize_latent: y {y.shape} vs mu {mu.shape}")
    mu = snap_mean(mu)
    symbols = round_half_away(y - mu)
    return symbols + mu, symbols.astype(np.int64)


def quantize_round(z):
    return round_half_away(np.asarray(z))


def pad_image(pixels, s_total):
    """Replicate-pad an (H, W, C) image on the right/bottom to multiples of ``s_total``."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise ValueError(f"pad_image: expected a non-empty (H, W, C) image, got {pixels.shape}")
    h, w = pixels.shape[:2]
    ph = -h % s_total
    pw = -w % s_total
    padded = np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode="edge") if ph or pw else pixels
    return padded, (h, w)


def crop_image(padded, original_dims):
    h, w = original_dims
    return padded[:h, :w]


def image_to_tensor(pixels, dtype=np.float32):
    """(H, W, 3) uint8 -> (1, 3, H, W) tensor in [0, 1]."""
    arr = np.asarray(pixels, dtype=dtype) / dtype(255.0)
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)[None]))


def tensor_to_image(x):
    """(1, 3, H, W) values in [0, 1] -> (H, W, 3) uint8."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    v = np.clip(data[0].transpose(1, 2, 0), 0.0, 1.0) * 255.0
    return round_half_away(v).astype(np.uint8)
