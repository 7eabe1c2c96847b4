"""Class-conditional generation: autoencoder codes + one mixture per class."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .dnnae import DNNAE, decode
from .exceptions import ValidationError
from .gmm import GaussianMixtureEM, gmm_sample
from .rng import TAG_SAMPLE, as_stream


def generate_morphologies(model, gmm, n, rng):
    """Sample ``n`` codes, clamp them to the ReLU range and decode them.

    Returns ``(images, codes)`` with images ``(n, side, side)`` in (0, 1).
    """
    codes = np.maximum(gmm_sample(gmm, n, rng), 0.0)
    return decode(model, codes), codes


class MorphologyGenerator(BaseEstimator):
    """Fit an autoencoder, then a Gaussian mixture on each class's codes.

    Parameters
    ----------
    autoencoder : DNNAE, optional
        Template estimator; cloned and fitted unless ``prefit=True``, in
        which case it must already be fitted and is used as is.
    n_components : int, default=3
    covariance_type : {'diag', 'full'}, default='diag'
    ridge, max_iter, tol : EM settings
    prefit : bool, default=False
    random_state : int, default=0
    """

    def __init__(
        self,
        autoencoder=None,
        n_components=3,
        covariance_type="diag",
        ridge=1e-6,
        max_iter=500,
        tol=1e-6,
        prefit=False,
        random_state=0,
    ):
        self.autoencoder = autoencoder
        self.n_components = n_components
        self.covariance_type = covariance_type
        self.ridge = ridge
        self.max_iter = max_iter
        self.tol = tol
        self.prefit = prefit
        self.random_state = random_state

    def fit(self, X, y, validation_data=None):
        if self.prefit:
            check_is_fitted(self.autoencoder, "model_")
            self.autoencoder_ = self.autoencoder
        else:
            base = DNNAE() if self.autoencoder is None else self.autoencoder
            self.autoencoder_ = clone(base).fit(X, y, validation_data=validation_data)
        X = check_images(X, self.autoencoder_.input_side)
        y = check_labels(y, X.shape[0])
        codes = self.autoencoder_.transform(X)
        self.classes_ = np.unique(y)
        self.mixtures_ = {}
        for c in self.classes_:
            self.mixtures_[int(c)] = GaussianMixtureEM(
                n_components=self.n_components,
                covariance_type=self.covariance_type,
                max_iter=self.max_iter,
                tol=self.tol,
                ridge=self.ridge,
                random_state=self.random_state,
            ).fit(codes[y == c])
        return self

    def score_samples(self, X):
        """``(N, n_classes)`` code log-densities under each class mixture."""
        check_is_fitted(self, "mixtures_")
        codes = self.autoencoder_.transform(X)
        return np.stack([self.mixtures_[int(c)].score_samples(codes) for c in self.classes_], axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.score_samples(X), axis=1)]

    def sample(self, n_samples, label, random_state=None):
        """Generate ``n_samples`` images of class ``label``."""
        check_is_fitted(self, "mixtures_")
        if int(label) not in self.mixtures_:
            raise ValidationError(f"no mixture fitted for class {label}")
        rng = as_stream(self.random_state if random_state is None else random_state, TAG_SAMPLE, int(label))
        images, _ = generate_morphologies(self.autoencoder_.model_, self.mixtures_[int(label)].model_, n_samples, rng)
        return images
