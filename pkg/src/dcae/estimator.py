"""scikit-learn style front end: ``fit`` trains, ``transform`` compresses, ``inverse_transform`` decodes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import codec
from .formats import load_model, save_model
from .metrics import psnr
from .model import DcaeModel, profile_config
from .training import TrainingConfig, rd_loss, train


def check_images(X, *, same_size=False):
    """Validate a batch of 8-bit RGB images.

    Accepts a (n, H, W, 3) uint8 array or a sequence of (H, W, 3) uint8
    arrays (sizes may differ unless ``same_size``). Returns a list of arrays.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        raise ValueError("expected a batch of images; wrap a single image as X[None]")
    images = list(X)
    if not images:
        raise ValueError("empty image batch")
    out = []
    for i, im in enumerate(images):
        im = np.asarray(im)
        if im.ndim != 3 or im.shape[2] != 3:
            raise ValueError(f"image {i} has shape {im.shape}, expected (H, W, 3)")
        if im.dtype != np.uint8:
            raise ValueError(f"image {i} has dtype {im.dtype}, expected uint8")
        if im.shape[0] < 1 or im.shape[1] < 1:
            raise ValueError(f"image {i} is empty")
        out.append(im)
    if same_size and len({im.shape for im in out}) != 1:
        raise ValueError("all training images must share one size")
    return out


def check_streams(streams):
    if isinstance(streams, (bytes, bytearray)):
        raise ValueError("expected a sequence of containers; wrap a single one in a list")
    return [bytes(s) for s in streams]


class DcaeCodec(TransformerMixin, BaseEstimator):
    """Learned image codec with a dictionary cross-attention entropy model.

    Parameters mirror the model and training configuration. After ``fit``,
    ``model_`` holds the trained network and ``history_`` the per-step loss
    breakdowns.
    """

    def __init__(
        self,
        profile="tiny",
        lmbda=0.0130,
        steps=500,
        lr=1e-4,
        lr_final=1e-5,
        batch_size=8,
        seed=0,
        use_dca=True,
        msfa_layers=3,
        slice_count=None,
        n_entries=None,
    ):
        self.profile = profile
        self.lmbda = lmbda
        self.steps = steps
        self.lr = lr
        self.lr_final = lr_final
        self.batch_size = batch_size
        self.seed = seed
        self.use_dca = use_dca
        self.msfa_layers = msfa_layers
        self.slice_count = slice_count
        self.n_entries = n_entries

    def _model_config(self):
        overrides = {"use_dca": self.use_dca, "msfa_layers": self.msfa_layers}
        if self.slice_count is not None:
            overrides["slice_count"] = self.slice_count
        if self.n_entries is not None:
            overrides["n_entries"] = self.n_entries
        return profile_config(self.profile, self.lmbda, **overrides)

    def _training_config(self):
        return TrainingConfig(
            lmbda=self.lmbda,
            lr=self.lr,
            lr_final=self.lr_final,
            batch=self.batch_size,
            steps=self.steps,
            seed=self.seed,
        )

    def fit(self, X, y=None, log=None):
        images = np.stack(check_images(X, same_size=True))
        s_total = self._model_config().autoencoder.s_total
        h, w = images.shape[1:3]
        if h % s_total or w % s_total:
            raise ValueError(f"training images must be multiples of {s_total} pixels, got {h}x{w}")
        self.model_ = DcaeModel(self._model_config(), seed=self.seed)
        self.history_ = train(self.model_, images, self._training_config(), log=log)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        """Compress each image into container bytes."""
        check_is_fitted(self, "model_")
        return [codec.compress(self.model_, im).container for im in check_images(X)]

    def inverse_transform(self, streams):
        check_is_fitted(self, "model_")
        return [codec.decompress(self.model_, s).image for s in check_streams(streams)]

    def score(self, X, y=None):
        """Negative mean RD loss per pixel (higher is better), evaluated with the noisy surrogate."""
        check_is_fitted(self, "model_")
        losses = []
        for im in check_images(X):
            loss, _ = rd_loss(im[None], self.model_, self.lmbda, mode="noisy", rng=np.random.default_rng(self.seed))
            losses.append(float(loss.data))
        return -float(np.mean(losses))

    def evaluate(self, X):
        """Per-image ``(bpp, psnr)`` after a real encode/decode round trip."""
        check_is_fitted(self, "model_")
        rows = []
        for im in check_images(X):
            data = codec.compress(self.model_, im).container
            rec = codec.decompress(self.model_, data).image
            rows.append((8.0 * len(data) / (im.shape[0] * im.shape[1]), psnr(im, rec)))
        return rows

    def save(self):
        check_is_fitted(self, "model_")
        return save_model(self.model_)

    @classmethod
    def from_archive(cls, data):
        """Rebuild a fitted codec from model-archive bytes."""
        model = load_model(data)
        cfg = model.config
        est = cls(
            profile=cfg.autoencoder.profile_name,
            lmbda=cfg.lmbda,
            use_dca=cfg.entropy.use_dca,
            msfa_layers=cfg.entropy.msfa_layers,
            slice_count=cfg.entropy.slice_count,
            n_entries=cfg.entropy.n_entries,
        )
        est.model_ = model
        est.history_ = []
        est.n_features_in_ = 3
        return est
