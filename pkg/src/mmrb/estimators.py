"""Scikit-learn-compatible front end.

``RobustClassifier`` wraps the training loop as a fit/predict estimator and
``AdversarialPerturber`` wraps the attack suite as a transformer, so both
compose with pipelines, grid search, and the usual validation helpers.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from . import nn, train as train_mod
from .attack import AttackConfig, PerturbationBudget, run_attack
from .tensor import softmax_rows


def _as_image_batch(X, input_shape):
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim == 2:
        return X.reshape((len(X),) + tuple(input_shape))
    if X.ndim == 4:
        return X
    raise ValueError(f"expected 2d or 4d input, got ndim={X.ndim}")


class RobustClassifier(ClassifierMixin, BaseEstimator):
    """Small conv-net classifier trained on natural or attacked batches.

    Parameters mirror the underlying training configuration; ``regime``
    selects plain SGD ('natural') or adversarial training against a one-step
    ('fgsm') or iterated ('pgd') adversary with the given budget.
    """

    def __init__(self, preset="mnist_capacity", capacity_scale=1, regime="pgd",
                 norm="linf", epsilon=0.3, attack_steps=20, attack_alpha=0.02,
                 epochs=5, batch_size=50, learning_rate=0.01, momentum=0.9,
                 random_state=0, threads=1):
        self.preset = preset
        self.capacity_scale = capacity_scale
        self.regime = regime
        self.norm = norm
        self.epsilon = epsilon
        self.attack_steps = attack_steps
        self.attack_alpha = attack_alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state
        self.threads = threads

    def _train_config(self) -> train_mod.TrainConfig:
        attack_cfg = None
        budget = None
        if self.regime != "natural":
            kind = "fgsm" if self.regime == "fgsm" else "pgd"
            attack_cfg = AttackConfig(kind=kind, steps=max(1, self.attack_steps),
                                      alpha=self.attack_alpha, restarts=1,
                                      random_start=(kind == "pgd"),
                                      seed=self.random_state)
            budget = PerturbationBudget(norm=self.norm, epsilon=self.epsilon)
        return train_mod.TrainConfig(
            regime=self.regime, attack=attack_cfg, budget=budget,
            epochs=self.epochs, batch_size=self.batch_size,
            lr_schedule=((0, self.learning_rate),), momentum=self.momentum,
            seed=self.random_state)

    def fit(self, X, y):
        spec = nn.build_spec(self.preset, self.capacity_scale)
        X = _as_image_batch(X, spec.input_shape)
        y = np.asarray(y)
        params = nn.init_params(spec, self.random_state)
        params, log = train_mod.train(spec, params, (X, y), self._train_config(),
                                      threads=self.threads)
        self.spec_ = spec
        self.params_ = params
        self.train_log_ = log
        self.classes_ = np.arange(spec.num_classes)
        return self

    def _model(self) -> nn.Model:
        if not hasattr(self, "params_"):
            raise NotFittedError("fit the classifier first")
        return nn.Model(self.spec_, self.params_)

    def decision_function(self, X):
        model = self._model()
        return model.logits(_as_image_batch(X, self.spec_.input_shape))

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X))


class AdversarialPerturber(TransformerMixin, BaseEstimator):
    """Transformer that replaces inputs with adversarial counterparts crafted
    against a fitted RobustClassifier (or a (spec, params) pair).

    ``transform(X)`` attacks the model's own predictions, so it needs no
    labels; use ``perturb(X, y)`` to attack true labels.
    """

    def __init__(self, model=None, kind="pgd", norm="linf", epsilon=0.3,
                 steps=40, alpha=0.01, restarts=1, random_start=True,
                 kappa=0.0, random_state=0, threads=1):
        self.model = model
        self.kind = kind
        self.norm = norm
        self.epsilon = epsilon
        self.steps = steps
        self.alpha = alpha
        self.restarts = restarts
        self.random_start = random_start
        self.kappa = kappa
        self.random_state = random_state
        self.threads = threads

    def _target(self) -> nn.Model:
        if self.model is None:
            raise NotFittedError("no model to attack")
        if isinstance(self.model, RobustClassifier):
            return self.model._model()
        if isinstance(self.model, nn.Model):
            return self.model
        spec, params = self.model
        return nn.Model(spec, params)

    def fit(self, X=None, y=None):
        self._target()
        return self

    def perturb(self, X, y):
        model = self._target()
        X = _as_image_batch(X, model.spec.input_shape)
        budget = PerturbationBudget(norm=self.norm, epsilon=self.epsilon)
        cfg = AttackConfig(kind=self.kind, steps=self.steps, alpha=self.alpha,
                           restarts=self.restarts, random_start=self.random_start,
                           kappa=self.kappa, seed=self.random_state)
        outcome = run_attack(model, X, np.asarray(y), budget, cfg, threads=self.threads)
        return outcome.x_adv

    def transform(self, X):
        model = self._target()
        X = _as_image_batch(X, model.spec.input_shape)
        return self.perturb(X, model.predict(X))
