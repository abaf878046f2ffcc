"""scikit-learn compatible estimators.

Images are passed as (N, H, W, C) float arrays in [-1, 1] (or as
:class:`~dtn.data.DatasetSplit`); grayscale inputs are replicated to three
channels wherever a feature network consumes them.
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import DatasetSplit, Domain
from .evaluation import apply_transfer
from .losses import LossWeights
from .networks import FeatureNetwork, replicate
from .training import Ablation, TrainingConfig, TransferModel, train_classifier, train_dtn
from .validation import check_images, check_labels, to_numpy, to_tensor


def _as_split(X, y=None, name="", domain=Domain.SOURCE):
    if isinstance(X, DatasetSplit):
        return X
    X = check_images(X, channels=(1, 3))
    return DatasetSplit(X, y, name=name, domain=domain)


class DigitClassifier(ClassifierMixin, BaseEstimator):
    """Ten-way digit classifier with the feature network's architecture.

    ``transform`` returns the 128-D representation (taken before the last
    ReLU), which is what the transfer network holds constant.
    """

    def __init__(self, n_steps=5000, batch_size=128, learning_rate=1e-3, adam_beta1=0.9,
                 adam_beta2=0.999, widths=(64, 128, 256, 128), seed=0):
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.widths = widths
        self.seed = seed

    def _config(self):
        return TrainingConfig.supervised(
            total_steps=self.n_steps, batch_size=self.batch_size,
            learning_rate=self.learning_rate, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, f_widths=self.widths, seed=self.seed,
        )

    def fit(self, X, y=None):
        if isinstance(X, DatasetSplit):
            split = X
        else:
            X = check_images(X, channels=(1, 3))
            split = DatasetSplit(X, check_labels(y, len(X)), name="fit")
        self.network_, self.loss_log_ = train_classifier(split, self._config())
        self.classes_ = np.arange(10)
        return self

    @classmethod
    def from_network(cls, network: FeatureNetwork, **params):
        clf = cls(**params)
        clf.network_ = network.eval()
        clf.loss_log_ = []
        clf.classes_ = np.arange(10)
        return clf

    @torch.no_grad()
    def _run(self, X, fn, batch_size=512):
        check_is_fitted(self, "network_")
        X = to_tensor(check_images(X, channels=(1, 3)))
        self.network_.eval()
        return apply_transfer(lambda x: fn(replicate(x)), X, batch_size).numpy()

    def predict_proba(self, X):
        return self._run(X, lambda x: torch.softmax(self.network_(x), dim=1))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def transform(self, X):
        return self._run(X, self.network_.features)


class DomainTransferNetwork(TransformerMixin, BaseEstimator):
    """Learns G = g o f from unlabeled source and target images.

    ``fit(X, X_target)`` trains the generator head and ternary discriminator;
    ``transform(X)`` maps source images into the target domain. The feature
    network (a fitted :class:`DigitClassifier` or a ``FeatureNetwork``) stays
    frozen throughout.
    """

    def __init__(self, feature_network=None, alpha=15.0, beta=15.0, gamma=0.0, tv_exponent=1.0,
                 learning_rate=2e-4, adam_beta1=0.5, adam_beta2=0.999, batch_size=128,
                 n_steps=3000, seed=0, ablation=(), g_widths=(512, 256, 128, 64),
                 d_widths=(64, 128, 256, 512), encoder_widths=(64, 128, 256, 128)):
        self.feature_network = feature_network
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.tv_exponent = tv_exponent
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.seed = seed
        self.ablation = ablation
        self.g_widths = g_widths
        self.d_widths = d_widths
        self.encoder_widths = encoder_widths

    def _ablation(self):
        return frozenset(Ablation(a) for a in self.ablation)

    def _config(self):
        return TrainingConfig(
            weights=LossWeights(self.alpha, self.beta, self.gamma, self.tv_exponent),
            learning_rate=self.learning_rate, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, batch_size=self.batch_size, total_steps=self.n_steps,
            seed=self.seed, ablation=self._ablation(), f_widths=self.encoder_widths,
            g_widths=self.g_widths, d_widths=self.d_widths,
        )

    def _feature_net(self):
        f = self.feature_network
        if isinstance(f, DigitClassifier):
            check_is_fitted(f, "network_")
            return f.network_
        if isinstance(f, FeatureNetwork):
            return f
        raise TypeError("feature_network must be a fitted DigitClassifier or a FeatureNetwork")

    def fit(self, X, X_target):
        s = _as_split(X, name="source")
        t = _as_split(X_target, name="target", domain=Domain.TARGET)
        self.model_ = train_dtn(s, t, self._feature_net(), self._config())
        self.loss_log_ = self.model_.log
        return self

    def transform(self, X, batch_size=512):
        check_is_fitted(self, "model_")
        X = to_tensor(check_images(X, channels=(1, 3)))
        return to_numpy(apply_transfer(self.model_, X, batch_size))

    @property
    def generator_(self):
        return self.model_.g

    @property
    def discriminator_(self):
        return self.model_.D

    @classmethod
    def load(cls, path):
        """Wrap a saved :class:`TransferModel` checkpoint as a fitted estimator."""
        model = TransferModel.load(path)
        est = cls(feature_network=model.f)
        est.model_ = model
        est.loss_log_ = model.log
        return est


class BaselineTransfer(DomainTransferNetwork):
    """Binary-GAN baseline: the generator works on source pixels and f only
    enters through the alpha-weighted constancy term."""

    def __init__(self, feature_network=None, alpha=15.0, learning_rate=2e-4, adam_beta1=0.5,
                 adam_beta2=0.999, batch_size=128, n_steps=3000, seed=0,
                 g_widths=(512, 256, 128, 64), d_widths=(64, 128, 256, 512),
                 encoder_widths=(64, 128, 256, 128)):
        super().__init__(feature_network=feature_network, alpha=alpha, beta=0.0,
                         learning_rate=learning_rate, adam_beta1=adam_beta1,
                         adam_beta2=adam_beta2, batch_size=batch_size, n_steps=n_steps,
                         seed=seed, g_widths=g_widths, d_widths=d_widths,
                         encoder_widths=encoder_widths)

    def _ablation(self):
        return frozenset({Ablation.BASELINE})

    @property
    def generator_(self):
        return self.model_.baseline
