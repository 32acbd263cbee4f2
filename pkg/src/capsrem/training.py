"""Optimizers, Fixed Routing and Routing Annealing loops, LOBSTER pruning, evaluation."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .capsnet import CapsNetModel, compute_votes, decoder_forward, predict, primary_caps_forward
from .checkpoint import Checkpoint
from .errors import ConfigError, EmptySplitError
from .losses import LossConfig, margin_loss, reconstruction_loss, total_loss

log = logging.getLogger(__name__)


@dataclass
class AnnealingConfig:
    r0: int = 1
    r_max: int = 50
    step: int = 1
    patience: int = 10

    def __post_init__(self):
        if self.r0 < 1:
            raise ConfigError(f"annealing.r0 must be >= 1, got {self.r0}")
        if self.step < 1:
            raise ConfigError(f"annealing.step must be >= 1, got {self.step}")
        if self.r_max < self.r0:
            raise ConfigError(f"annealing.r_max ({self.r_max}) must be >= r0 ({self.r0})")
        if self.patience < 1:
            raise ConfigError(f"annealing.patience must be >= 1, got {self.patience}")


@dataclass
class LobsterConfig:
    enabled: bool = False
    lam: float = 1e-4
    threshold: float = 1e-3

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lobster.lam must be >= 0, got {self.lam}")
        if self.threshold < 0:
            raise ConfigError(f"lobster.threshold must be >= 0, got {self.threshold}")


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 128
    optimizer: str = "adam"
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    routing: str = "fixed"          # fixed | annealing
    r: int = 3
    annealing: AnnealingConfig = field(default_factory=AnnealingConfig)
    lobster: LobsterConfig = field(default_factory=LobsterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr_decay: float = 1.0           # per-epoch multiplicative factor; 0.99 for the decaying schedule
    eval_batch_size: int = 256
    reproducible: bool = True

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.routing not in ("fixed", "annealing"):
            raise ConfigError(f"train.routing must be fixed or annealing, got {self.routing!r}")
        if self.r < 1:
            raise ConfigError(f"train.r must be >= 1, got {self.r}")
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("lr, batch_size, patience and max_epochs must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"train.lr_decay must lie in (0, 1], got {self.lr_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizers -------------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, lr: float = 0.01):
        self.lr = lr
        self.t = 0

    def begin_step(self) -> None:
        self.t += 1

    def direction(self, name: str, grad: np.ndarray) -> np.ndarray:
        return grad

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "t": self.t, "tensors": {}}

    def load_state_dict(self, state: dict) -> None:
        self.lr, self.t = state["lr"], state["t"]


class Adam:
    """Adam; ``direction`` returns the bias-corrected step before the learning rate."""

    kind = "adam"

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def begin_step(self) -> None:
        self.t += 1

    def direction(self, name: str, grad: np.ndarray) -> np.ndarray:
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros_like(grad)
            self.v[name] = np.zeros_like(grad)
        v = self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        tensors = {f"m/{k}": v.copy() for k, v in self.m.items()}
        tensors.update({f"v/{k}": v.copy() for k, v in self.v.items()})
        return {"kind": self.kind, "lr": self.lr, "t": self.t, "tensors": tensors}

    def load_state_dict(self, state: dict) -> None:
        self.lr, self.t = state["lr"], state["t"]
        self.m = {k[2:]: v.copy() for k, v in state["tensors"].items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in state["tensors"].items() if k.startswith("v/")}


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def lobster_step(theta, grad, eta, lam, update):
    """theta - eta * update - lam * theta * relu(1 - |grad|).

    ``update`` is the optimizer direction G (the raw gradient for SGD).
    """
    return theta - eta * update - lam * theta * np.maximum(0, 1 - np.abs(grad))


def optimizer_step(params: dict, grads: dict, optimizer, frozen: Optional[dict] = None,
                   lobster: Optional[LobsterConfig] = None, prunable=()) -> None:
    """Apply one update in place. Entries under a frozen mask stay exactly zero."""
    frozen = frozen or {}
    optimizer.begin_step()
    use_lobster = lobster is not None and lobster.enabled
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        mask = frozen.get(name)
        if mask is not None:
            g = np.where(mask, 0, g).astype(g.dtype)
        update = optimizer.direction(name, g)
        if use_lobster and name in prunable:
            new = lobster_step(p.data, g, optimizer.lr, lobster.lam, update)
        else:
            new = p.data - optimizer.lr * update
        if mask is not None:
            new[mask] = 0
        p.data = new.astype(p.dtype, copy=False)


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    loss: float
    per_class_accuracy: np.ndarray
    predictions: np.ndarray


def batch_loss(model: CapsNetModel, images, labels, r: int, loss_config: LossConfig):
    out = model.run(images, r)
    loss = margin_loss(out.class_poses, labels, loss_config)
    if model.config.decoder:
        recon = decoder_forward(model, out.class_poses, labels)
        loss = total_loss(loss, reconstruction_loss(recon, out_images(images, recon)), loss_config.beta)
    return loss, out


def out_images(images, recon):
    data = images.data if isinstance(images, T.Tensor) else np.asarray(images)
    return data.reshape(recon.shape[0], -1)


def evaluate(model: CapsNetModel, dataset, r: Optional[int] = None, loss_config: Optional[LossConfig] = None,
             batch_size: int = 256) -> EvalResult:
    """Accuracy, mean loss and per-class accuracy; never touches the weights."""
    loss_config = loss_config or LossConfig()
    r = model.config.routing_iterations if r is None else r
    n = len(dataset)
    preds = np.zeros(n, dtype=np.int64)
    total = 0.0
    with T.no_grad():
        for start in range(0, n, batch_size):
            x = dataset.images[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            loss, out = batch_loss(model, x, y, r, loss_config)
            total += float(loss.item()) * len(y)
            preds[start:start + len(y)] = predict(out.class_poses)
    correct = preds == dataset.labels
    per_class = np.full(dataset.num_classes, np.nan)
    for j in range(dataset.num_classes):
        sel = dataset.labels == j
        if sel.any():
            per_class[j] = correct[sel].mean()
    return EvalResult(float(correct.mean()) if n else float("nan"), total / max(n, 1), per_class, preds)


# -- gradient check ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict
    checked: int
    finite: bool


GRADCHECK_FLOOR = 1e-6


def grad_check(model: CapsNetModel, images, labels, r: Optional[int] = None, detach_couplings: bool = False,
               samples_per_tensor: int = 200, h: float = 1e-5, seed: int = 0,
               loss_config: Optional[LossConfig] = None) -> GradCheckReport:
    """Compare backprop gradients of the total loss with central differences in float64.

    With ``detach_couplings`` the finite differences hold the final couplings
    at their unperturbed values, which is the function the detached graph
    differentiates.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``; the floor keeps
    entries whose true gradient is at the finite-difference noise level from
    dominating the maximum.
    """
    loss_config = loss_config or LossConfig()
    m64 = model.astype(np.float64)
    x = np.asarray(images.data if isinstance(images, T.Tensor) else images, dtype=np.float64)
    labels = np.atleast_1d(labels)
    r = m64.config.routing_iterations if r is None else r

    frozen_c = None

    def loss_value():
        if frozen_c is None:
            class_poses = m64.run(x, r, detach_couplings=detach_couplings).class_poses
        else:
            # with detached couplings the differentiated function sees them as constants
            votes = compute_votes(primary_caps_forward(m64._as_batch(x), m64), m64.params["caps.W"])
            class_poses = T.squash(T.einsum("bij,bijd->bjd", frozen_c, votes))
        loss = margin_loss(class_poses, labels, loss_config)
        if m64.config.decoder:
            recon = decoder_forward(m64, class_poses, labels)
            loss = total_loss(loss, reconstruction_loss(recon, x.reshape(len(labels), -1)), loss_config.beta)
        return loss

    m64.zero_grad()
    loss = loss_value()
    if detach_couplings:
        with T.no_grad():
            frozen_c = T.Tensor(m64.run(x, r).couplings.data, dtype=np.float64)
    loss.backward()
    rng = np.random.default_rng(seed)
    per_tensor, checked, finite = {}, 0, True
    for name, p in m64.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        finite &= bool(np.all(np.isfinite(analytic)))
        flat = p.data.reshape(-1)
        count = min(samples_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            with T.no_grad():
                flat[i] = orig + h
                up = loss_value().item()
                flat[i] = orig - h
                down = loss_value().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), GRADCHECK_FLOOR)
            worst = max(worst, err)
        per_tensor[name] = worst
        checked += count
    return GradCheckReport(max(per_tensor.values()), per_tensor, checked, finite)


# -- schedules ----------------------------------------------------------------

class FixedRoutingSchedule:
    """Early stopping at constant r: stop once the best loss is ``patience`` epochs old."""

    def __init__(self, r: int, patience: int):
        self.r = r
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch: Optional[int] = None

    def observe(self, epoch: int, loss: float) -> str:
        if loss < self.best_loss:
            self.best_loss, self.best_epoch = loss, epoch
            return "best"
        if self.best_epoch is None or epoch - self.best_epoch >= self.patience:
            return "stop"
        return "continue"

    @property
    def r_star(self) -> int:
        return self.r


class AnnealingSchedule:
    """Routing Annealing bookkeeping.

    ``observe`` returns ``"anneal"`` when the loss at the current r has not
    improved on its best for ``patience`` epochs; the caller must then reload
    the best weights of the previous r. ``"stop"`` is returned instead when
    the increment would take r past ``r_max``.
    """

    def __init__(self, cfg: AnnealingConfig):
        self.cfg = cfg
        self.r = cfg.r0
        self.steps = [{"r": cfg.r0, "best_loss": float("inf"), "best_epoch": None, "start_epoch": 0}]

    @property
    def k(self) -> int:
        return len(self.steps) - 1

    def observe(self, epoch: int, loss: float) -> str:
        cur = self.steps[-1]
        anchor = cur["best_epoch"] if cur["best_epoch"] is not None else cur["start_epoch"]
        if loss >= cur["best_loss"] and epoch - anchor >= self.cfg.patience:
            if self.r + self.cfg.step > self.cfg.r_max:
                return "stop"
            self.r += self.cfg.step
            self.steps.append({"r": self.r, "best_loss": float("inf"), "best_epoch": None,
                               "start_epoch": epoch})
            return "anneal"
        if loss < cur["best_loss"]:
            cur["best_loss"], cur["best_epoch"] = loss, epoch
            return "best"
        return "continue"

    @property
    def best_step(self) -> dict:
        return min(self.steps, key=lambda s: s["best_loss"])

    @property
    def r_star(self) -> int:
        return self.best_step["r"]


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    r_star: int
    history: list
    events: list
    model: CapsNetModel


def sparsity_of(model: CapsNetModel) -> float:
    names = model.prunable_names()
    total = sum(model.params[n].size for n in names)
    zeros = sum(int(np.count_nonzero(model.params[n].data == 0)) for n in names)
    return zeros / total if total else 0.0


class Trainer:
    """Mutable training state: model, optimizer, RNG and frozen-zero masks."""

    def __init__(self, model: CapsNetModel, config: TrainConfig, train, val):
        if len(train) == 0 or len(val) == 0:
            raise EmptySplitError("training and validation splits must both be non-empty")
        self.model, self.config, self.train, self.val = model, config, train, val
        self.optimizer = make_optimizer(config.optimizer, config.lr)
        self.rng = np.random.default_rng(config.seed)
        self.frozen = {n: np.zeros(model.params[n].shape, dtype=bool) for n in model.prunable_names()}

    def train_epoch(self, r: int) -> float:
        cfg, model = self.config, self.model
        order = self.rng.permutation(len(self.train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            x, y = self.train.images[idx], self.train.labels[idx]
            model.zero_grad()
            loss, _ = batch_loss(model, x, y, r, cfg.loss)
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            optimizer_step(model.params, grads, self.optimizer, self.frozen, cfg.lobster,
                           model.prunable_names())
            total += float(loss.item()) * len(idx)
        model.zero_grad()
        self.optimizer.lr *= cfg.lr_decay
        return total / len(order)

    def prune(self) -> None:
        """Zero and freeze prunable weights whose magnitude fell below the threshold."""
        tau = self.config.lobster.threshold
        for name, mask in self.frozen.items():
            p = self.model.params[name]
            mask |= np.abs(p.data) < tau
            p.data[mask] = 0

    def snapshot(self, epoch: int, r: int, val_loss: float) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.config.to_dict(),
            params=self.model.state_dict(),
            optimizer=copy.deepcopy(self.optimizer.state_dict()),
            frozen={k: v.copy() for k, v in self.frozen.items()},
            epoch=epoch, r=r, best_val_loss=float(val_loss),
            rng_state=copy.deepcopy(self.rng.bit_generator.state),
            train_config=self.config.to_dict(),
        )

    def restore(self, ckpt: Checkpoint) -> None:
        self.model.load_state_dict(ckpt.params)
        self.optimizer.load_state_dict(copy.deepcopy(ckpt.optimizer))
        self.frozen = {k: v.copy() for k, v in ckpt.frozen.items()}


def _default_validator(trainer: Trainer):
    def validate(model, r):
        res = evaluate(model, trainer.val, r, trainer.config.loss, trainer.config.eval_batch_size)
        return res.loss, res.accuracy
    return validate


def _fit(model, config: TrainConfig, train, val, schedule, validator=None, on_epoch=None, on_anneal=None):
    trainer = Trainer(model, config, train, val)
    validator = validator or _default_validator(trainer)
    history, events = [], []
    step_best: Optional[Checkpoint] = None
    global_best: Optional[Checkpoint] = None
    threads = 1 if config.reproducible else None
    with threadpool_limits(limits=threads):
        for epoch in range(config.max_epochs):
            r = schedule.r
            t0 = time.perf_counter()
            train_loss = trainer.train_epoch(r)
            if config.lobster.enabled:
                trainer.prune()
            val_loss, val_acc = validator(model, r)
            wall = 0.0 if config.reproducible else time.perf_counter() - t0
            row = {"epoch": epoch, "r": r, "train_loss": train_loss, "val_loss": float(val_loss),
                   "val_acc": float(val_acc), "sparsity": sparsity_of(model), "wall_seconds": wall}
            history.append(row)
            log.info("epoch %d r=%d train=%.5f val=%.5f acc=%.4f sparsity=%.3f",
                     epoch, r, train_loss, val_loss, val_acc, row["sparsity"])
            if on_epoch is not None:
                on_epoch(row)
            action = schedule.observe(epoch, float(val_loss))
            if action == "best":
                step_best = trainer.snapshot(epoch, r, val_loss)
                if global_best is None or step_best.best_val_loss < global_best.best_val_loss:
                    global_best = step_best
            elif action == "anneal":
                trainer.restore(step_best)
                event = {"epoch": epoch, "from_r": r, "to_r": schedule.r,
                         "restored_epoch": step_best.epoch, "restored_loss": step_best.best_val_loss}
                events.append(event)
                log.info("annealing step: r %d -> %d, restored epoch %d", r, schedule.r, step_best.epoch)
                if on_anneal is not None:
                    on_anneal(model, event)
                step_best = None
            elif action == "stop":
                break
    if global_best is None:
        raise ConfigError("training produced no finite validation loss")
    trainer.restore(global_best)
    return TrainResult(global_best, global_best.r, history, events, model)


def _build_model(model, model_config, config):
    if model is not None:
        return model
    if model_config is None:
        raise ConfigError("pass either a model or a model_config")
    return CapsNetModel(model_config, seed=config.seed)


def train_fixed_routing(config: TrainConfig, data, model: Optional[CapsNetModel] = None, model_config=None,
                        validator: Optional[Callable] = None, on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train at constant r with patience-based early stopping; returns the best-validation checkpoint."""
    train, val = data
    model = _build_model(model, model_config, config)
    schedule = FixedRoutingSchedule(config.r, config.patience)
    return _fit(model, config, train, val, schedule, validator, on_epoch)


def train_routing_annealing(config: TrainConfig, data, model: Optional[CapsNetModel] = None, model_config=None,
                            validator: Optional[Callable] = None, on_epoch: Optional[Callable] = None,
                            on_anneal: Optional[Callable] = None) -> TrainResult:
    """Routing Annealing; ``result.r_star`` is the r whose best validation loss is lowest."""
    train, val = data
    model = _build_model(model, model_config, config)
    schedule = AnnealingSchedule(config.annealing)
    return _fit(model, config, train, val, schedule, validator, on_epoch, on_anneal)


def train(config: TrainConfig, data, model=None, model_config=None, **kwargs) -> TrainResult:
    if config.routing == "annealing":
        return train_routing_annealing(config, data, model, model_config, **kwargs)
    kwargs.pop("on_anneal", None)
    return train_fixed_routing(config, data, model, model_config, **kwargs)


def prune_to_sparsity(config: TrainConfig, data, model: CapsNetModel, r: int, target: float,
                      max_prune_epochs: int = 20, finetune_epochs: int = 4, validator: Optional[Callable] = None,
                      on_epoch: Optional[Callable] = None) -> TrainResult:
    """Sparsify a trained model, then recover accuracy with the pruned weights frozen.

    LOBSTER epochs (``config.lobster``) run until the frozen fraction reaches
    ``target`` or ``max_prune_epochs`` pass. Fine-tuning then continues without
    the shrinking term for ``finetune_epochs``; the fine-tuning epoch with the
    lowest validation loss is restored and returned.
    """
    if not config.lobster.enabled:
        raise ConfigError("prune_to_sparsity needs lobster.enabled = true")
    if not 0 < target < 1:
        raise ConfigError(f"target sparsity must lie in (0, 1), got {target}")
    if finetune_epochs < 1:
        raise ConfigError("finetune_epochs must be >= 1")
    train, val = data
    trainer = Trainer(model, config, train, val)
    validator = validator or _default_validator(trainer)
    plain = replace(config, lobster=LobsterConfig())
    history, best = [], None
    threads = 1 if config.reproducible else None
    with threadpool_limits(limits=threads):
        epoch = 0
        while epoch < max_prune_epochs and sparsity_of(model) < target:
            train_loss = trainer.train_epoch(r)
            trainer.prune()
            history.append(_prune_row(epoch, "prune", r, train_loss, *validator(model, r), model))
            if on_epoch is not None:
                on_epoch(history[-1])
            epoch += 1
        trainer.config = plain
        for _ in range(finetune_epochs):
            train_loss = trainer.train_epoch(r)
            val_loss, val_acc = validator(model, r)
            history.append(_prune_row(epoch, "finetune", r, train_loss, val_loss, val_acc, model))
            if on_epoch is not None:
                on_epoch(history[-1])
            if best is None or val_loss < best.best_val_loss:
                best = trainer.snapshot(epoch, r, val_loss)
            epoch += 1
    trainer.restore(best)
    return TrainResult(best, r, history, [], model)


def _prune_row(epoch, phase, r, train_loss, val_loss, val_acc, model) -> dict:
    row = {"epoch": epoch, "phase": phase, "r": r, "train_loss": train_loss, "val_loss": float(val_loss),
           "val_acc": float(val_acc), "sparsity": sparsity_of(model)}
    log.info("%s epoch %d train=%.5f val=%.5f acc=%.4f sparsity=%.3f", phase, epoch, train_loss,
             val_loss, val_acc, row["sparsity"])
    return row
