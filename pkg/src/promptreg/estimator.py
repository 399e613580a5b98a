"""Scikit-learn style estimator wrapping prompt tuning on a frozen dual encoder.

The estimator treats class feature means as class embeddings, builds a seeded
aligned encoder stack, and trains the prompts with the selected regime.  It
composes with the usual sklearn tooling (get_params/set_params, cloning,
cross-validation) for the desk-scale tasks this package targets.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .encoder import ClassSet, EncoderWeights, encode_image, encode_text, predict_probs
from .errors import DataError
from .training import TrainConfig, _stream, train_arrays
from .pipeline import STREAM_ENCODER


class PromptTunedClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot classifier trained by (meta-regularized) prompt tuning.

    Parameters mirror TrainConfig; `regime` selects plain prompt tuning, the
    fixed-strength regularized baseline, or the meta-learned gated regularizer.
    """

    def __init__(self, regime="prometar", alpha=0.0025, beta=0.0025, beta_phi=None,
                 lr_conv=0.0025, epochs=15, batch_size=0, mu=1.0, nu=1.0, lam=None,
                 d_p=4, d_e=8, hidden=32, tau=0.07, prompt_init_std=0.02,
                 encoder_misalignment=0.0, meta_gradient_mode="exact", random_state=0):
        self.regime = regime
        self.alpha = alpha
        self.beta = beta
        self.beta_phi = beta_phi
        self.lr_conv = lr_conv
        self.epochs = epochs
        self.batch_size = batch_size
        self.mu = mu
        self.nu = nu
        self.lam = lam
        self.d_p = d_p
        self.d_e = d_e
        self.hidden = hidden
        self.tau = tau
        self.prompt_init_std = prompt_init_std
        self.encoder_misalignment = encoder_misalignment
        self.meta_gradient_mode = meta_gradient_mode
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            regime=self.regime, alpha=self.alpha, beta=self.beta, beta_phi=self.beta_phi,
            lr_conv=self.lr_conv, epochs=self.epochs, batch_size=self.batch_size,
            mu=self.mu, nu=self.nu, lam=self.lam, d_p=self.d_p, d_e=self.d_e,
            hidden=self.hidden, tau=self.tau, prompt_init_std=self.prompt_init_std,
            encoder_misalignment=self.encoder_misalignment,
            meta_gradient_mode=self.meta_gradient_mode, seed=self.random_state,
        ).validate()

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        config = self._config()
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise DataError("PromptTunedClassifier: need at least 2 classes")
        x_all = np.asarray(X, dtype=np.float64).T  # (d_x, N)
        protos = np.stack([x_all[:, y_idx == k].mean(axis=1)
                           for k in range(self.classes_.size)], axis=1)
        class_set = ClassSet(embeddings=protos)
        weights = EncoderWeights.aligned(_stream(config.seed, STREAM_ENCODER),
                                         d_x=x_all.shape[0], d_p=config.d_p,
                                         d_e=config.d_e,
                                         misalignment=config.encoder_misalignment)
        result = train_arrays(x_all, y_idx, list(range(self.classes_.size)), config,
                              weights, class_set)
        self.weights_ = weights
        self.class_set_ = class_set
        self.prompts_ = result.prompts
        self.modulator_ = result.phi
        self.train_log_ = result.log
        self.n_features_in_ = x_all.shape[0]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "prompts_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        z = encode_image(X.T, self.prompts_.theta_vis, self.weights_)
        w = encode_text(list(range(self.classes_.size)), self.prompts_.theta_txt,
                        self.weights_, self.class_set_)
        return predict_probs(z, w, self.tau).reshape(X.shape[0], -1)

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[probs.argmax(axis=1)]
