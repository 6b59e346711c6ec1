"""Outer minimization: SGD with momentum on natural, FGSM-, or PGD-perturbed
batches. Replacing a batch by its attacked counterpart and differentiating
there gives the descent direction for the pointwise-max loss, which is what
adversarial training descends.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import attack as attack_mod
from .attack import AttackConfig, PerturbationBudget
from .errors import DivergenceError, NonFiniteError
from .nn import Model, ModelParams, ModelSpec
from .util import STREAM_SHUFFLE, derive_rng, derive_seed

Array = np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "natural"                  # natural | fgsm | pgd
    attack: AttackConfig | None = None       # adversarial regimes
    budget: PerturbationBudget | None = None
    epochs: int = 1
    batch_size: int = 50
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.01),)
    momentum: float = 0.9
    seed: int = 0
    eval_slice: int = 0                      # held-out examples scored per epoch

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_schedule or any(lr <= 0 for _, lr in self.lr_schedule):
            raise ValueError("all learning rates must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.regime not in ("natural", "fgsm", "pgd"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.regime != "natural" and (self.attack is None or self.budget is None):
            raise ValueError("adversarial regimes need attack config and budget")


@dataclass
class TrainLog:
    step_losses: list[float] = field(default_factory=list)
    step_epochs: list[int] = field(default_factory=list)
    epoch_eval: list[dict] = field(default_factory=list)   # epoch, natural_acc, adv_acc
    lr_events: list[tuple[int, float]] = field(default_factory=list)

    def epoch_mean_loss(self, epoch: int) -> float:
        losses = [l for l, e in zip(self.step_losses, self.step_epochs) if e == epoch]
        return float(np.mean(losses))


def lr_at(schedule, epoch: int) -> float:
    """Piecewise-constant learning rate: the last entry at or before epoch."""
    lr = None
    for start, value in sorted(schedule):
        if epoch >= start:
            lr = value
    if lr is None:
        raise ValueError(f"lr schedule has no entry at or before epoch {epoch}")
    return lr


def sgd_step(params: ModelParams, grads: ModelParams, lr: float, momentum: float,
             velocity: ModelParams) -> tuple[ModelParams, ModelParams]:
    """v <- momentum*v + g; theta <- theta - lr*v. Returns fresh arrays."""
    new_p, new_v = ModelParams(), ModelParams()
    for attr in ("weights", "biases"):
        for p, g, v in zip(getattr(params, attr), getattr(grads, attr), getattr(velocity, attr)):
            vn = momentum * v + g
            getattr(new_v, attr).append(vn)
            getattr(new_p, attr).append(p - lr * vn)
    return new_p, new_v


def zero_like(params: ModelParams) -> ModelParams:
    return ModelParams([np.zeros_like(w) for w in params.weights],
                       [np.zeros_like(b) for b in params.biases])


def adversarial_gradient(spec: ModelSpec, params: ModelParams, batch_x: Array, batch_y: Array,
                         budget: PerturbationBudget, attack_cfg: AttackConfig,
                         threads: int = 1):
    """Attack the batch, then take the parameter gradient of the mean loss at
    the perturbed points. Returns (loss, grads, x_adv)."""
    model = Model(spec, params)
    outcome = attack_mod.run_attack(model, batch_x, batch_y, budget, attack_cfg,
                                    threads=threads)
    loss, grads = model.param_gradient(outcome.x_adv, batch_y)
    return loss, grads, outcome.x_adv


def _epoch_eval(model: Model, cfg: TrainConfig, eval_x, eval_y, threads: int) -> dict:
    natural = float((model.predict(eval_x) == eval_y).mean())
    adv = None
    if cfg.regime != "natural":
        outcome = attack_mod.run_attack(model, eval_x, eval_y, cfg.budget, cfg.attack,
                                        threads=threads)
        adv = float((model.predict(outcome.x_adv) == eval_y).mean())
    return {"natural_acc": natural, "adv_acc": adv}


def train(spec: ModelSpec, params: ModelParams, dataset, cfg: TrainConfig,
          eval_set=None, threads: int = 1) -> tuple[ModelParams, TrainLog]:
    """Shuffled mini-batch SGD; in adversarial regimes every batch is replaced
    by its perturbed counterpart before the gradient step.

    ``dataset``/``eval_set`` are (images, labels) pairs or objects with
    .images/.labels. Deterministic given cfg.seed.
    """
    x_all, y_all = _unpack(dataset)
    if len(x_all) == 0:
        raise ValueError("dataset is empty")
    eval_pair = _unpack(eval_set) if eval_set is not None else None

    params = params.copy()
    velocity = zero_like(params)
    log = TrainLog()
    step = 0
    last_lr = None
    # one PGD start per batch occurrence; a fresh start comes with the next epoch
    base_attack = None
    if cfg.regime != "natural":
        base_attack = replace(cfg.attack, restarts=1)

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.lr_schedule, epoch)
        if lr != last_lr:
            log.lr_events.append((epoch, lr))
            last_lr = lr
        order = derive_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(len(x_all))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bx, by = x_all[idx], y_all[idx]
            try:
                if cfg.regime == "natural":
                    model = Model(spec, params)
                    loss, grads = model.param_gradient(bx, by)
                else:
                    step_cfg = replace(base_attack,
                                       seed=derive_seed(cfg.seed, STREAM_SHUFFLE, epoch, step))
                    loss, grads, _ = adversarial_gradient(spec, params, bx, by,
                                                          cfg.budget, step_cfg, threads=threads)
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
            if not np.isfinite(loss):
                raise DivergenceError(f"batch loss became {loss} at step {step}")
            params, velocity = sgd_step(params, grads, lr, cfg.momentum, velocity)
            log.step_losses.append(loss)
            log.step_epochs.append(epoch)
            step += 1
        if eval_pair is not None:
            entry = _epoch_eval(Model(spec, params), cfg, eval_pair[0][:cfg.eval_slice or None],
                                eval_pair[1][:cfg.eval_slice or None], threads)
            entry["epoch"] = epoch
            log.epoch_eval.append(entry)
    return params, log


def _unpack(dataset):
    if dataset is None:
        return None
    if hasattr(dataset, "images"):
        return np.asarray(dataset.images, dtype=np.float64), np.asarray(dataset.labels)
    x, y = dataset
    return np.asarray(x, dtype=np.float64), np.asarray(y)
