"""Rate-distortion training at toy scale, plus synthetic corpora."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .errors import IntegrityError

PIXEL_SCALE = 255.0 ** 2


@dataclass(frozen=True)
class RdLossBreakdown:
    """Per-image averages. Rates in bits, distortion as MSE on [0, 1] pixels.

    ``total = rate_y + rate_z + lmbda * n_pixels * 255**2 * distortion``.
    """

    rate_y: float
    rate_z: float
    distortion: float
    lmbda: float
    n_pixels: int
    total: float

    @classmethod
    def compose(cls, rate_y, rate_z, distortion, lmbda, n_pixels):
        terms = {"rate_y": rate_y, "rate_z": rate_z, "distortion": distortion}
        for name, v in terms.items():
            if not math.isfinite(v):
                raise IntegrityError(f"non-finite loss term {name}")
        total = rate_y + rate_z + lmbda * n_pixels * PIXEL_SCALE * distortion
        return cls(float(rate_y), float(rate_z), float(distortion), float(lmbda), int(n_pixels), float(total))

    def log_line(self, step):
        return (
            f"step={step} rate_y={self.rate_y:.6f} rate_z={self.rate_z:.6f} "
            f"mse={self.distortion:.8f} total={self.total:.6f}"
        )


@dataclass(frozen=True)
class TrainingConfig:
    lmbda: float = 0.0130
    lr: float = 1e-4
    lr_final: float = 1e-5
    decay_at: float = 0.8
    batch: int = 8
    steps: int = 500
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    mode: str = "ste"
    # parameter-name prefixes held fixed during training
    freeze: tuple = ()

    def __post_init__(self):
        if self.lmbda <= 0:
            raise ValueError("lambda must be positive")

    def lr_at(self, step):
        return self.lr if step < int(self.decay_at * self.steps) else self.lr_final


def noisy_quantize(t, seed):
    """``t + u`` with ``u ~ U(-1/2, 1/2)`` i.i.d.; ``seed`` is an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arr = t.data if isinstance(t, T.Tensor) else np.asarray(t)
    noise = rng.uniform(-0.5, 0.5, size=arr.shape).astype(arr.dtype, copy=False)
    if isinstance(t, T.Tensor):
        return T.add(t, noise)
    return arr + noise


def rd_loss(x, model, lmbda, mode="ste", rng=None):
    """Return ``(loss, breakdown)``; ``loss`` is the per-pixel total as a differentiable scalar.

    ``x`` is an NCHW tensor in [0, 1] (or a uint8 (B, H, W, 3) array).
    """
    if not isinstance(x, T.Tensor):
        x = images_to_tensor(x)
    rng = rng if rng is not None else np.random.default_rng(0)
    b, _, h, w = x.shape
    n_pixels = h * w
    out = model.forward_train(x, rng, mode)
    mse = T.mean_all(T.square(T.sub(out.x_hat, x)))
    rate = T.mul(T.add(out.rate_y, out.rate_z), 1.0 / (b * n_pixels))
    loss = T.add(rate, T.mul(mse, lmbda * PIXEL_SCALE))
    breakdown = RdLossBreakdown.compose(
        float(out.rate_y.data) / b, float(out.rate_z.data) / b, float(mse.data), lmbda, n_pixels
    )
    return loss, breakdown


def images_to_tensor(images, dtype=np.float32):
    images = np.asarray(images)
    return T.Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)).astype(dtype) / dtype(255.0))


class Adam:
    """First-order adaptive-moment optimizer over named parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(sorted(params.items()))
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before."""
    sq = 0.0
    for name, p in sorted(params.items()):
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise IntegrityError(f"non-finite gradient for {name}")
        sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


def train_step(images, model, optimizer, cfg, rng, step=0):
    """One clipped Adam step on the RD loss; returns the loss breakdown before the update."""
    model.zero_grad()
    loss, breakdown = rd_loss(images, model, cfg.lmbda, cfg.mode, rng)
    loss.backward()
    clip_grad_norm(optimizer.params, cfg.clip)
    optimizer.step(cfg.lr_at(step))
    return breakdown


def train(model, images, cfg, log=None):
    """Train ``model`` on a uint8 (n, H, W, 3) corpus; returns the per-step breakdowns."""
    images = np.asarray(images)
    rng = np.random.default_rng(cfg.seed)
    params = {
        name: p
        for name, p in model.named_parameters().items()
        if not any(name == f or name.startswith(f + ".") for f in cfg.freeze)
    }
    optimizer = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    for step in range(cfg.steps):
        idx = rng.choice(len(images), size=min(cfg.batch, len(images)), replace=False)
        breakdown = train_step(images[np.sort(idx)], model, optimizer, cfg, rng, step)
        history.append(breakdown)
        if log is not None:
            log(breakdown.log_line(step))
    return history


# --------------------------------------------------------------------------
# synthetic corpora


def synth_dataset(kind, n, dims=(64, 64), seed=0, motif=8, n_motifs=8, blur=0.0):
    """Deterministic uint8 (n, H, W, 3) corpora.

    ``periodic-texture`` tiles one motif from a seeded bank of ``n_motifs``
    random ``motif x motif`` patches with a random phase, so the same few
    structures recur across the corpus. ``blur`` > 0 smooths each motif with
    a wrap-around Gaussian of that width, which keeps the period exact. ``noise`` is i.i.d. uniform pixels;
    ``gradient`` is a random linear colour ramp.
    """
    rng = np.random.default_rng(seed)
    h, w = dims
    if kind == "periodic-texture":
        bank = rng.integers(0, 256, size=(n_motifs, motif, motif, 3), dtype=np.uint8)
        if blur > 0:
            soft = gaussian_filter(bank.astype(np.float64), sigma=(0, blur, blur, 0), mode="wrap")
            # restore the original contrast around the mean
            mean = soft.mean(axis=(1, 2), keepdims=True)
            gain = bank.std(axis=(1, 2), keepdims=True) / np.maximum(soft.std(axis=(1, 2), keepdims=True), 1e-9)
            bank = np.clip(np.rint(mean + (soft - mean) * gain), 0, 255).astype(np.uint8)
        reps = (-(-h // motif) + 1, -(-w // motif) + 1, 1)
        out = np.empty((n, h, w, 3), dtype=np.uint8)
        for i in range(n):
            tile = np.tile(bank[rng.integers(n_motifs)], reps)
            dy, dx = rng.integers(0, motif, size=2)
            out[i] = tile[dy : dy + h, dx : dx + w]
        return out
    if kind == "noise":
        return rng.integers(0, 256, size=(n, h, w, 3), dtype=np.uint8)
    if kind == "gradient":
        yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
        out = np.empty((n, h, w, 3), dtype=np.uint8)
        for i in range(n):
            angle = rng.uniform(0, 2 * np.pi)
            ramp = np.cos(angle) * xx + np.sin(angle) * yy
            ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
            lo, hi = rng.uniform(0, 255, size=(2, 3))
            out[i] = np.rint(lo + ramp[..., None] * (hi - lo)).astype(np.uint8)
        return out
    raise ValueError(f"unknown dataset kind {kind!r}")

