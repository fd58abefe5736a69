"""scikit-learn style wrappers over the functional core.

The numeric work lives in the plain functions of ``train``, ``sensitivity``,
``selection`` and ``quantization``; these classes only hold hyperparameters
and fitted state so the pipeline composes with sklearn tooling
(``clone``, ``get_params``, ``cross_val_score``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import analog, quantization, selection, sensitivity, train
from .data import Dataset
from .nn import forward, softmax
from .variation import NoiseModel, trial_rng


def _reshape(X, input_shape):
    X = np.asarray(X, dtype=np.float32)
    want = tuple(input_shape)
    if X.shape[1:] == want:
        return X
    if X.ndim == 2 and X.shape[1] == int(np.prod(want)):
        return X.reshape((len(X),) + want)
    raise ValueError(f"inputs of shape {X.shape[1:]} do not fit input shape {want}")


class ToyNetClassifier(ClassifierMixin, BaseEstimator):
    """Train one of the toy presets; inputs may be flat or already shaped."""

    def __init__(self, preset="cnn-small", epochs=30, lr=0.02, momentum=0.9, batch_size=64,
                 weight_decay=None, random_state=0):
        self.preset = preset
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _xy(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True)
        self.classes_, codes = np.unique(y, return_inverse=True)
        spec = train.PRESETS[self.preset]
        n_out = spec["layers"][-1].out_features
        if len(self.classes_) > n_out:
            raise ValueError(f"{len(self.classes_)} classes but preset {self.preset!r} has {n_out} outputs")
        return _reshape(X, spec["input_shape"]), codes, n_out

    def fit(self, X, y):
        X, codes, n_out = self._xy(X, y)
        splits = {"train": Dataset(X, codes, n_out, "train")}
        cfg = train.TrainConfig(self.preset, self.epochs, self.lr, self.momentum, self.batch_size,
                                self.random_state, self.random_state, 0.0, self.weight_decay)
        self.network_ = train.train_toy(cfg, splits)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _inputs(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, allow_nd=True)
        return _reshape(X, self.network_.input_shape)

    def decision_function(self, X):
        X = self._inputs(X)
        return forward(self.network_, X)[:, :len(self.classes_)]

    def predict_proba(self, X):
        return softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


def _fitted_network(estimator):
    check_is_fitted(estimator, "network_")
    return estimator.network_


class ChannelSelector(BaseEstimator):
    """Sensitivity ranking plus greedy channel protection for a fitted ToyNetClassifier.

    ``fit(X, y)`` uses X for the Hessian (first ``hessian_samples`` rows) and
    for the noisy accuracy estimates.
    """

    def __init__(self, classifier=None, acc_desired=0.02, target="drop", n_pairs=5, aggregation="sum",
                 hessian_samples=500, trials=5, validation_trials=50, sigma_analog=0.5, sigma_digital=0.1,
                 max_fraction=0.5, random_state=0):
        self.classifier = classifier
        self.acc_desired = acc_desired
        self.target = target
        self.n_pairs = n_pairs
        self.aggregation = aggregation
        self.hessian_samples = hessian_samples
        self.trials = trials
        self.validation_trials = validation_trials
        self.sigma_analog = sigma_analog
        self.sigma_digital = sigma_digital
        self.max_fraction = max_fraction
        self.random_state = random_state

    def fit(self, X, y):
        net = _fitted_network(self.classifier)
        X, y = check_X_y(X, y, allow_nd=True)
        codes = np.searchsorted(self.classifier.classes_, y)
        data = Dataset(_reshape(X, net.input_shape), codes, net.num_classes)
        hess = Dataset(data.inputs[:self.hessian_samples], codes[:self.hessian_samples], net.num_classes, "train")
        self.sensitivity_ = sensitivity.compute(net, hess, self.n_pairs, self.aggregation, seed=self.random_state)
        cfg = selection.SelectionConfig(
            acc_desired=self.acc_desired, target=self.target, trials=self.trials,
            validation_trials=self.validation_trials,
            noise=NoiseModel(self.sigma_analog, self.sigma_digital, self.random_state),
            max_fraction=self.max_fraction,
        )
        self.result_ = selection.select_channels(net, self.sensitivity_, data, cfg)
        self.assignment_ = self.result_.assignment
        self.protected_fraction_ = self.result_.protected_fraction
        return self

    def get_support(self):
        """Per-layer boolean masks, True where the channel runs digitally."""
        check_is_fitted(self, "assignment_")
        return [m.copy() for m in self.assignment_.masks]


class HybridACClassifier(ClassifierMixin, BaseEstimator):
    """Quantized two-partition inference for a fitted classifier and selector.

    ``fit`` calibrates quantization ranges on X. With ``crossbar`` set, the
    analog partition runs through the crossbar model.
    """

    def __init__(self, classifier=None, selector=None, n1=6, n2=8, act_bits=8, accum="exact", crossbar=None,
                 random_state=0):
        self.classifier = classifier
        self.selector = selector
        self.n1 = n1
        self.n2 = n2
        self.act_bits = act_bits
        self.accum = accum
        self.crossbar = crossbar
        self.random_state = random_state

    def fit(self, X, y=None):
        net = _fitted_network(self.classifier)
        X = check_array(X, allow_nd=True)
        if self.selector is not None:
            check_is_fitted(self.selector, "assignment_")
            self.assignment_ = self.selector.assignment_
        else:
            self.assignment_ = selection.ChannelAssignment.all_analog(net)
        self.scheme_ = quantization.calibrate_scheme(net, self.assignment_, _reshape(X, net.input_shape),
                                                     self.n1, self.n2, self.act_bits)
        self.classes_ = self.classifier.classes_
        return self

    def decision_function(self, X):
        check_is_fitted(self, "scheme_")
        net = self.classifier.network_
        X = _reshape(check_array(X, allow_nd=True), net.input_shape)
        mm = None
        if self.crossbar is not None:
            cfg = self.crossbar.with_(weight_bits=self.n1, input_bits=self.act_bits)
            mm = analog.crossbar_matmul(cfg, trial_rng(self.random_state, (0,)))
        logits = quantization.hybrid_forward(net, self.assignment_, self.scheme_, X, self.accum, analog_matmul=mm)
        return logits[:, :len(self.classes_)]

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
