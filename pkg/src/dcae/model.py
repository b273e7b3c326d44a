"""The full codec network: transforms plus the dictionary entropy model."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .entropy import DcaeEntropyModel, EntropyConfig, bits, gaussian_likelihood, logistic_likelihood
from .errors import ConfigurationError
from .layers import Module
from .transforms import (
    PROFILES,
    AnalysisTransform,
    AutoencoderConfig,
    HyperAnalysis,
    HyperSynthesis,
    SynthesisTransform,
)

LAMBDAS = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0500)
CUSTOM_LAMBDA_INDEX = 255

PROFILE_IDS = {"tiny": 0, "paper": 1}
# free-form autoencoder shapes for experiments and tests; never written to containers
CUSTOM_PROFILE = "custom"

ENTROPY_PROFILES = {
    "tiny": EntropyConfig(),
    "paper": EntropyConfig(
        slice_count=5, n_entries=128, dict_channels=640, heads=4, hidden_channels=320
    ),
}


def lambda_index(lmbda):
    for i, v in enumerate(LAMBDAS):
        if abs(v - lmbda) <= 1e-12:
            return i
    return CUSTOM_LAMBDA_INDEX


@dataclass(frozen=True)
class ModelConfig:
    autoencoder: AutoencoderConfig
    entropy: EntropyConfig
    lmbda: float = 0.0130

    @property
    def profile_id(self):
        name = self.autoencoder.profile_name
        if name not in PROFILE_IDS:
            raise ConfigurationError(f"profile {name!r} has no container id; only compiled profiles can be coded")
        return PROFILE_IDS[name]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        ae = dict(d["autoencoder"])
        ae["stage_channels"] = tuple(ae["stage_channels"])
        cfg = cls(AutoencoderConfig(**ae), EntropyConfig(**d["entropy"]), float(d["lmbda"]))
        cfg.validate()
        return cfg

    def validate(self):
        name = self.autoencoder.profile_name
        if name != CUSTOM_PROFILE and name not in PROFILES:
            raise ConfigurationError(f"unknown profile {name!r}")
        if name != CUSTOM_PROFILE and self.autoencoder != PROFILES[name]:
            raise ConfigurationError(f"autoencoder config does not match the compiled {name!r} profile")
        if self.autoencoder.y_channels % self.entropy.slice_count:
            raise ConfigurationError("slice count must divide y_channels")
        if self.lmbda <= 0:
            raise ConfigurationError("lambda must be positive")


def profile_config(profile="tiny", lmbda=0.0130, **entropy_overrides):
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; known: {sorted(PROFILES)}")
    entropy = dataclasses.replace(ENTROPY_PROFILES[profile], **entropy_overrides)
    cfg = ModelConfig(PROFILES[profile], entropy, float(lmbda))
    cfg.validate()
    return cfg


@dataclass
class TrainForward:
    x_hat: T.Tensor
    rate_y: T.Tensor  # bits, summed over the batch
    rate_z: T.Tensor


class DcaeModel(Module):
    """g_a, g_s, h_a, h_s and the entropy model, initialized from one seed."""

    def __init__(self, config, seed=0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        ae = config.autoencoder
        self.g_a = self.add_child("g_a", AnalysisTransform(rng, ae))
        self.g_s = self.add_child("g_s", SynthesisTransform(rng, ae))
        self.h_a = self.add_child("h_a", HyperAnalysis(rng, ae))
        self.h_s = self.add_child("h_s", HyperSynthesis(rng, ae))
        self.entropy = self.add_child(
            "entropy", DcaeEntropyModel(rng, config.entropy, ae.y_channels, ae.z_channels)
        )

    @property
    def s_total(self):
        return self.config.autoencoder.s_total

    def forward_train(self, x, rng, mode="ste"):
        """Differentiable forward for the rate-distortion loss.

        Rates use additive-uniform-noise latents. In ``ste`` mode the
        reconstruction path sees straight-through rounded latents (``round(y -
        mu) + mu`` and ``round(z)``); in ``noisy`` mode it sees the noisy ones,
        which keeps the whole loss smooth for finite-difference checks.
        """
        if mode not in ("ste", "noisy"):
            raise ValueError(f"mode must be 'ste' or 'noisy', got {mode!r}")
        em = self.entropy
        y = self.g_a(x)
        z = self.h_a(y)
        z_noisy = T.add(z, _uniform_noise(rng, z))
        rate_z = bits(logistic_likelihood(z_noisy, em.z_loc, em.z_scale()))
        z_hat = T.ste_round(z) if mode == "ste" else z_noisy
        f_z = self.h_s(z_hat)
        sc = em.slice_channels
        rate_y = None
        context = []
        for i in range(em.cfg.slice_count):
            y_i = T.channel_slice(y, i * sc, (i + 1) * sc)
            params = em.slice_params(i, f_z, context)
            y_noisy = T.add(y_i, _uniform_noise(rng, y_i))
            r = bits(gaussian_likelihood(T.sub(y_noisy, params.mu), params.sigma))
            rate_y = r if rate_y is None else T.add(rate_y, r)
            if mode == "ste":
                y_hat = T.add(T.ste_round(T.sub(y_i, params.mu)), params.mu)
            else:
                y_hat = y_noisy
            context.append(em.refine(i, f_z, context, params, y_hat))
        x_hat = self.g_s(T.concat(context, axis=1), clamp=False)
        return TrainForward(x_hat, rate_y, rate_z)


def _uniform_noise(rng, like):
    return rng.uniform(-0.5, 0.5, size=like.shape).astype(like.dtype)
