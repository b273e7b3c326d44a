"""Channel-autoregressive entropy model with a shared learnable dictionary.

Each latent slice ``y_i`` is coded with a discretized Gaussian whose mean and
scale come from the hyper-prior feature ``F_z``, the already-decoded slices
``y_bar_{<i}`` and a dictionary feature obtained by cross-attending from a
multi-scale view of that context into a learnable ``[N, C_d]`` dictionary.
The dictionary lives in the model weights only; nothing about it is ever
written to a bitstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

from . import tensor as T
from .errors import ConfigurationError, DimensionError, IntegrityError
from .layers import Conv2d, DWConv3x3, Linear, Module
from .transforms import quantize_latent, snap_mean

SIGMA_MIN = 0.11
LIKELIHOOD_BOUND = 1e-9


@dataclass(frozen=True)
class EntropyConfig:
    slice_count: int = 4
    n_entries: int = 32
    dict_channels: int = 64
    msfa_layers: int = 3
    heads: int = 2
    head_dim: int = 32
    ffn_expansion: int = 2
    hidden_channels: int = 64
    use_dca: bool = True

    def __post_init__(self):
        if not 1 <= self.slice_count <= 10:
            raise ConfigurationError(f"slice_count must be in 1..10, got {self.slice_count}")
        if self.n_entries < 1:
            raise ConfigurationError("dictionary needs at least one entry")
        if self.heads < 1 or self.dict_channels % self.heads:
            raise ConfigurationError(
                f"dict_channels {self.dict_channels} not divisible by {self.heads} heads"
            )
        if self.msfa_layers < 0:
            raise ConfigurationError("msfa_layers must be >= 0")

    @property
    def qk_channels(self):
        return self.heads * self.head_dim

    @property
    def ms_channels(self):
        return self.qk_channels


# --------------------------------------------------------------------------
# probability models (numpy; used by the coder and rate reports)


def discretized_gaussian_pmf(k, sigma):
    """P(symbol = k) for a zero-mean Gaussian of scale ``sigma`` convolved with U(-1/2, 1/2)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    # the floor is applied in float32, which rounds 0.11 down by ~6e-9
    if np.any(sigma < SIGMA_MIN - 1e-7):
        raise ValueError(f"sigma below the {SIGMA_MIN} floor")
    a = np.abs(np.asarray(k, dtype=np.float64))
    # evaluate on the lower tail so both terms stay accurate far from the mode
    return ndtr((0.5 - a) / sigma) - ndtr((-0.5 - a) / sigma)


def factorized_pmf(k, loc, scale):
    """P(symbol = k) under a logistic density with the given location/scale, binned to integers."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise IntegrityError("factorized prior scale must be positive")
    v = np.asarray(k, dtype=np.float64) - np.asarray(loc, dtype=np.float64)
    # mirror to the lower side: sigmoid differences there do not cancel
    v = -np.abs(v)
    return expit((v + 0.5) / scale) - expit((v - 0.5) / scale)


def gaussian_likelihood(residual, sigma):
    """Differentiable discretized-Gaussian likelihood of ``residual = y - mu``."""
    a = T.absolute(residual)
    upper = T.normal_cdf(T.div(T.sub(0.5, a), sigma))
    lower = T.normal_cdf(T.div(T.sub(-0.5, a), sigma))
    return T.clamp_min(T.sub(upper, lower), LIKELIHOOD_BOUND)


def logistic_likelihood(z, loc, scale):
    v = T.sub(z, loc)
    upper = T.sigmoid(T.div(T.add(v, 0.5), scale))
    lower = T.sigmoid(T.div(T.sub(v, 0.5), scale))
    return T.clamp_min(T.sub(upper, lower), LIKELIHOOD_BOUND)


def bits(likelihood):
    return T.mul(T.sum_all(T.log(likelihood)), -1.0 / np.log(2.0))


# --------------------------------------------------------------------------
# network pieces


class SpatialAttention(Module):
    """sigmoid(conv7x7([mean_c(X), max_c(X)])) -> (B, 1, H, W).

    The pooled maps are edge-padded, so a spatially constant input gives a
    constant map.
    """

    def __init__(self, rng):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(rng, 2, 1, 7))

    def forward(self, x):
        pooled = T.concat([T.channel_mean(x), T.channel_max(x)], axis=1)
        return T.sigmoid(self.conv(T.pad_edge(pooled, 3)))


class EConv(Module):
    """Pointwise -> depthwise 3x3 -> pointwise."""

    def __init__(self, rng, channels):
        super().__init__()
        self.w_in = self.add_child("w_in", Linear(rng, channels, channels))
        self.dw = self.add_child("dw", DWConv3x3(rng, channels))
        self.w_out = self.add_child("w_out", Linear(rng, channels, channels))

    def forward(self, x):
        return self.w_out(self.dw(self.w_in(x)))


class MultiScaleAggregation(Module):
    """Project the context, stack ``m`` EConv layers, merge them and gate by spatial attention.

    With ``m = 0`` this is just the input projection.
    """

    def __init__(self, rng, c_in, c_ms, m):
        super().__init__()
        self.proj = self.add_child("proj", Linear(rng, c_in, c_ms))
        self.layers = [self.add_child(f"econv{j}", EConv(rng, c_ms)) for j in range(m)]
        if m:
            self.merge = self.add_child("merge", Linear(rng, m * c_ms, c_ms))
            self.sa = self.add_child("sa", SpatialAttention(rng))

    def forward(self, x):
        h = self.proj(x)
        if not self.layers:
            return h
        feats = []
        for layer in self.layers:
            h = layer(h)
            feats.append(h)
        merged = self.merge(T.concat(feats, axis=1))
        return T.mul(merged, self.sa(merged))


@dataclass
class AttentionOutput:
    features: T.Tensor  # F_dict, (B, C_d, H, W)
    weights: np.ndarray  # (B, heads, H*W, N)
    pre_ffn: T.Tensor  # (B*H*W, C_d)


class DictionaryCrossAttention(Module):
    """Query the dictionary with multi-scale features; keys are projected entries, values the entries."""

    def __init__(self, rng, c_ms, c_d, heads, head_dim, expansion):
        super().__init__()
        self.heads, self.head_dim, self.c_d = heads, head_dim, c_d
        qk = heads * head_dim
        self.wq = self.add_child("wq", Linear(rng, c_ms, qk, bias=False))
        self.wk = self.add_child("wk", Linear(rng, c_d, qk, bias=False))
        self.tau = self.add_param("tau", np.full(heads, np.sqrt(head_dim)))
        self.ffn1 = self.add_child("ffn1", Linear(rng, c_d, expansion * c_d))
        self.ffn2 = self.add_child("ffn2", Linear(rng, expansion * c_d, c_d))

    def forward(self, x_ms, dictionary):
        b, _, h, w = x_ms.shape
        n = dictionary.shape[0]
        if n == 0:
            raise ConfigurationError("dictionary has no entries")
        nh, hd, dv = self.heads, self.head_dim, self.c_d // self.heads
        q = self.wq.rows(T.to_rows(x_ms))
        q = T.transpose(T.reshape(q, (b, h * w, nh, hd)), (0, 2, 1, 3))
        k = self.wk.rows(dictionary)
        k_t = T.transpose(T.reshape(k, (n, nh, hd)), (1, 2, 0))
        tau = T.reshape(T.clamp_min(self.tau, 1e-3), (1, nh, 1, 1))
        attn = T.softmax_lastdim(T.div(T.matmul(q, k_t), tau))
        v = T.transpose(T.reshape(dictionary, (n, nh, dv)), (1, 0, 2))
        out = T.matmul(attn, v)
        pre = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b * h * w, self.c_d))
        hidden = T.gelu(self.ffn1.rows(pre))
        feats = T.add(pre, self.ffn2.rows(hidden))
        return AttentionOutput(T.from_rows(feats, b, h, w), attn.data, pre)


class PointwiseStack(Module):
    """Three 1x1 convolutions with GELU between them."""

    def __init__(self, rng, c_in, hidden, c_out):
        super().__init__()
        self.l0 = self.add_child("l0", Linear(rng, c_in, hidden))
        self.l1 = self.add_child("l1", Linear(rng, hidden, hidden))
        self.l2 = self.add_child("l2", Linear(rng, hidden, c_out))

    def forward(self, x):
        return self.l2(T.gelu(self.l1(T.gelu(self.l0(x)))))


class SliceNetwork(Module):
    def __init__(self, rng, cfg, y_channels, index):
        super().__init__()
        sc = y_channels // cfg.slice_count
        self.slice_channels = sc
        c_ctx = 2 * y_channels + index * sc
        self.context_channels = c_ctx
        c_dict = cfg.dict_channels if cfg.use_dca else 0
        self.use_dca = cfg.use_dca
        if cfg.use_dca:
            self.msfa = self.add_child("msfa", MultiScaleAggregation(rng, c_ctx, cfg.ms_channels, cfg.msfa_layers))
            self.dca = self.add_child(
                "dca",
                DictionaryCrossAttention(
                    rng, cfg.ms_channels, cfg.dict_channels, cfg.heads, cfg.head_dim, cfg.ffn_expansion
                ),
            )
        self.param_head = self.add_child("f_e", PointwiseStack(rng, c_ctx + c_dict, cfg.hidden_channels, 2 * sc))
        self.lrp_head = self.add_child("f_lrp", PointwiseStack(rng, c_ctx + c_dict + sc, cfg.hidden_channels, sc))


@dataclass
class SliceParams:
    mu: T.Tensor
    sigma: T.Tensor
    dict_features: T.Tensor | None = None
    attention: AttentionOutput | None = None


@dataclass
class SliceResult:
    symbols: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    y_hat: np.ndarray
    y_bar: np.ndarray
    attention: np.ndarray | None = None


@dataclass
class SlicePass:
    slices: list = field(default_factory=list)

    @property
    def y_bar(self):
        return np.concatenate([s.y_bar for s in self.slices], axis=1)

    @property
    def y_hat(self):
        return np.concatenate([s.y_hat for s in self.slices], axis=1)


class DcaeEntropyModel(Module):
    def __init__(self, rng, cfg, y_channels, z_channels):
        super().__init__()
        if y_channels % cfg.slice_count:
            raise ConfigurationError(f"{cfg.slice_count} slices do not divide {y_channels} latent channels")
        self.cfg = cfg
        self.y_channels = y_channels
        self.slice_channels = y_channels // cfg.slice_count
        self.dictionary = self.add_param("dictionary", rng.standard_normal((cfg.n_entries, cfg.dict_channels)))
        self.slices = [self.add_child(f"slice{i}", SliceNetwork(rng, cfg, y_channels, i)) for i in range(cfg.slice_count)]
        self.z_loc = self.add_param("z_loc", np.zeros((1, z_channels, 1, 1)))
        self.z_log_scale = self.add_param("z_log_scale", np.zeros((1, z_channels, 1, 1)))

    def z_scale(self):
        return T.exp(self.z_log_scale)

    def slice_params(self, i, f_z, context):
        """(mu_i, sigma_i) from F_z and the decoded slices ``context = [y_bar_0 .. y_bar_{i-1}]``."""
        net = self.slices[i]
        x = T.concat([f_z] + list(context), axis=1)
        if x.shape[1] != net.context_channels:
            raise DimensionError(f"slice {i}: context has {x.shape[1]} channels, expected {net.context_channels}")
        attn = None
        head_in = x
        if net.use_dca:
            attn = net.dca(net.msfa(x), self.dictionary)
            head_in = T.concat([x, attn.features], axis=1)
        out = net.param_head(head_in)
        sc = self.slice_channels
        mu = T.channel_slice(out, 0, sc)
        sigma = T.clamp_min(T.softplus(T.channel_slice(out, sc, 2 * sc)), SIGMA_MIN)
        return SliceParams(mu, sigma, attn.features if attn else None, attn)

    def refine(self, i, f_z, context, params, y_hat):
        """y_bar_i = y_hat_i + 0.5 * tanh(f_LRP(...)), a bounded residual correction."""
        parts = [f_z] + list(context)
        if params.dict_features is not None:
            parts.append(params.dict_features)
        parts.append(y_hat)
        r = self.slices[i].lrp_head(T.concat(parts, axis=1))
        return T.add(y_hat, T.mul(T.tanh(r), 0.5))

    def slice_pass(self, f_z, y=None, read_symbols=None, keep_attention=False):
        """Run the slices in order, either quantizing ``y`` or pulling symbols from ``read_symbols``.

        ``read_symbols(i, mu, sigma)`` returns the integer symbols of slice i;
        it sees exactly the parameters the encoder used, so both sides agree.
        """
        if (y is None) == (read_symbols is None):
            raise ValueError("pass exactly one of y (encode) or read_symbols (decode)")
        f_z = T.as_tensor(f_z)
        sc = self.slice_channels
        result = SlicePass()
        context = []
        with T.no_grad():
            for i in range(self.cfg.slice_count):
                params = self.slice_params(i, f_z, context)
                mu, sigma = params.mu.data, params.sigma.data
                if y is not None:
                    y_hat, symbols = quantize_latent(y[:, i * sc : (i + 1) * sc], mu)
                else:
                    symbols = np.asarray(read_symbols(i, mu, sigma), dtype=np.int64).reshape(mu.shape)
                    y_hat = symbols + snap_mean(mu)
                y_bar = self.refine(i, f_z, context, params, T.Tensor(y_hat.astype(mu.dtype)))
                context.append(y_bar)
                attn = params.attention.weights if (keep_attention and params.attention) else None
                result.slices.append(SliceResult(symbols, mu, sigma, y_hat, y_bar.data, attn))
        return result
