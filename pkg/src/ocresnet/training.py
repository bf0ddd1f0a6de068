"""Stage-cost objective, SGD with momentum, step schedule and per-depth diagnostics.

The objective for a ResNet-N is::

    J_N = sum_k [ gamma * L(y_k) + lam/2 * ||w_F,k||^2 ] + L(y)

with decay on the residual branches only.  ``gamma = 0`` is ordinary training.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset, batches
from .errors import ConfigError, NumericError
from .resnet import (
    NetworkConfig,
    WeightBundle,
    forward_full,
    init_weights,
    is_exit_param,
    loss_fn,
    residual_names,
)

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.02
DEFAULT_LAMBDA = 1e-4


def desk_milestones(epochs: int) -> tuple[int, ...]:
    """Drop points at 50% and 75% of training (82 and 123 for 165 epochs)."""
    return (int(0.5 * epochs), int(0.75 * epochs))


@dataclass
class TrainConfig:
    gamma: float
    lam: float
    epochs: int
    seed: int
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_milestones: tuple[int, ...] | None = None
    exit_lr_scale: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")
        if self.lr_milestones is None:
            self.lr_milestones = desk_milestones(self.epochs)
        self.lr_milestones = tuple(sorted(int(m) for m in self.lr_milestones))

    @property
    def standard(self) -> bool:
        return self.gamma == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        d = dict(d)
        if d.get("lr_milestones") is not None:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)


def lr_at(epoch: int, config: TrainConfig) -> float:
    passed = sum(1 for m in config.lr_milestones if m <= epoch)
    return config.lr / 10.0 ** passed


@dataclass
class Objective:
    total: Tensor
    terminal_loss: float
    exit_losses: list[float]
    decay_terms: list[float]   # ||w_F,k||^2, before the lam/2 factor

    @property
    def value(self) -> float:
        return self.total.item()

    def depth_losses(self) -> list[float]:
        return [*self.exit_losses, self.terminal_loss]


def _finite_loss(t: Tensor, depth: int) -> Tensor:
    if not t.is_finite():
        raise NumericError(f"non-finite loss at depth {depth}", depth=depth)
    return t


def residual_sq_norm(params: Mapping[str, Tensor], k: int) -> Tensor:
    names = residual_names(k)
    total = ad.sum_squares(params[names[0]])
    for n in names[1:]:
        total = ad.add(total, ad.sum_squares(params[n]))
    return total


def objective(params, x, y, config: NetworkConfig, gamma: float, lam: float,
              reuse_backbone: bool = False) -> Objective:
    """Stage-cost objective on one batch, recorded on the active tape if any."""
    if isinstance(params, WeightBundle):
        params = params.tensors()
    trace = forward_full(x, params, config, reuse_backbone=reuse_backbone)
    total = None
    exit_losses, decay = [], []
    for k, y_k in enumerate(trace.exits):
        l_k = _finite_loss(loss_fn(y_k, y, config), k)
        sq = residual_sq_norm(params, k)
        exit_losses.append(l_k.item())
        decay.append(sq.item())
        term = ad.add(ad.scale(l_k, gamma), ad.scale(sq, lam / 2.0))
        total = term if total is None else ad.add(total, term)
    terminal = _finite_loss(loss_fn(trace.output, y, config), config.depth)
    total = terminal if total is None else ad.add(total, terminal)
    return Objective(total, terminal.item(), exit_losses, decay)


def objective_value(weights: WeightBundle, dataset: Dataset, gamma: float, lam: float,
                    reuse_backbone: bool = False) -> Objective:
    """Objective over a whole split in a single pass (no tape)."""
    return objective(weights.tensors(), dataset.features, dataset.labels, weights.config,
                     gamma, lam, reuse_backbone)


def gradients(weights: WeightBundle, x, y, gamma: float, lam: float) -> tuple[Objective, dict[str, np.ndarray]]:
    params = weights.tensors(requires_grad=True)
    with Tape() as tape:
        obj = objective(params, x, y, weights.config, gamma, lam)
    grads = tape.backward(obj.total)
    return obj, {n: grads.get(t, np.zeros_like(t.data)) for n, t in params.items()}


def sgd_step(weights: WeightBundle, grads: Mapping[str, np.ndarray], velocity: dict[str, np.ndarray],
             lr: float, momentum: float, exit_lr: float | None = None) -> WeightBundle:
    """Heavy-ball update ``v <- mu*v + g ; w <- w - lr*v``.

    ``exit_lr`` applies to exit-only parameters; ``velocity`` is updated in place.
    """
    exit_lr = lr if exit_lr is None else exit_lr
    out = weights.copy()
    for name, g in grads.items():
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        step = exit_lr if is_exit_param(name) else lr
        out.arrays[name] = weights.arrays[name] - step * v
    return out


@dataclass
class TrajectoryRecord:
    """Per-depth diagnostics of one network on one split."""

    split: str
    losses: list[float]                # depth 0..N, last entry is the final output
    accuracies: list[float]
    param_norm_sq: list[float]         # block 0..N-1
    output_residual_norm: list[float]  # mean_i ||y_{k+1,i} - y_{k,i}||, block 0..N-1
    epoch: int | None = None

    @property
    def depth(self) -> int:
        return len(self.param_norm_sq)


def evaluate_trajectory(weights: WeightBundle, dataset: Dataset, reuse_backbone: bool = False,
                        epoch: int | None = None) -> TrajectoryRecord:
    config = weights.config
    trace = forward_full(dataset.features, weights, config, reuse_backbone=reuse_backbone)
    outs = [t.data for t in trace.outputs()]
    losses = [loss_fn(Tensor(o), dataset.labels, config).item() for o in outs]
    accs = [float(np.mean(np.argmax(o, axis=1) == dataset.labels)) for o in outs]
    resid = [float(np.mean(np.linalg.norm(outs[k + 1] - outs[k], axis=1))) for k in range(config.depth)]
    return TrajectoryRecord(dataset.split, losses, accs, weights.residual_sq_norms().tolist(), resid, epoch)


@dataclass
class TrainResult:
    weights: WeightBundle
    history: list[TrajectoryRecord] = field(default_factory=list)
    objectives: list[float] = field(default_factory=list)   # mean batch objective per epoch


def exit_learning_rate(lr: float, net: NetworkConfig, cfg: TrainConfig) -> float:
    if cfg.exit_lr_scale and net.exit_mode == "extra_params" and cfg.gamma > 0:
        return lr / cfg.gamma
    return lr


def train(net: NetworkConfig, cfg: TrainConfig, train_set: Dataset, eval_set: Dataset | None = None,
          eval_every: int = 1, init: WeightBundle | None = None,
          on_epoch: Callable[[int, WeightBundle, list[TrajectoryRecord]], None] | None = None,
          ) -> TrainResult:
    """Minimize the stage-cost objective with SGD; deterministic for a fixed seed.

    Trajectories are recorded after every ``eval_every``-th epoch (and after the
    last one) on the training split and, if given, the evaluation split.
    """
    if train_set.dim != net.input_dim:
        raise ConfigError(f"dataset has input_dim {train_set.dim}, network expects {net.input_dim}")
    weights = init.copy() if init is not None else init_weights(net, cfg.seed)
    reuse = cfg.standard
    velocity: dict[str, np.ndarray] = {}
    result = TrainResult(weights)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        exit_lr = exit_learning_rate(lr, net, cfg)
        batch_values = []
        for b, idx in enumerate(batches(len(train_set), cfg.batch_size, cfg.seed, epoch)):
            try:
                obj, grads = gradients(weights, train_set.features[idx], train_set.labels[idx],
                                       cfg.gamma, cfg.lam)
            except NumericError as e:
                raise NumericError(f"training diverged at epoch {epoch}, batch {b}: {e}",
                                   epoch=epoch, batch=b, **e.location) from e
            if not np.isfinite(obj.value):
                raise NumericError(f"training diverged at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            batch_values.append(obj.value)
            weights = sgd_step(weights, grads, velocity, lr, cfg.momentum, exit_lr)
        result.objectives.append(float(np.mean(batch_values)) if batch_values else float("nan"))
        records = []
        if (epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1:
            records.append(evaluate_trajectory(weights, train_set, reuse, epoch))
            if eval_set is not None:
                records.append(evaluate_trajectory(weights, eval_set, reuse, epoch))
            result.history.extend(records)
            logger.info("epoch %d lr %.4g objective %.5f final-acc %.4f", epoch, lr,
                        result.objectives[-1], records[0].accuracies[-1])
        if on_epoch is not None:
            on_epoch(epoch, weights, records)
    result.weights = weights
    return result


def train_standard_reference(net: NetworkConfig, cfg: TrainConfig, train_set: Dataset,
                             init: WeightBundle | None = None) -> list[WeightBundle]:
    """Plain terminal-loss-plus-decay SGD loop, written without any exit machinery.

    Returns the weights after every epoch.  Used to check that the stage-cost
    trainer at ``gamma = 0`` is exactly ordinary training.
    """
    weights = init.copy() if init is not None else init_weights(net, cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    snapshots = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for idx in batches(len(train_set), cfg.batch_size, cfg.seed, epoch):
            params = weights.tensors(requires_grad=True)
            with Tape() as tape:
                trace = forward_full(train_set.features[idx], params, net, with_exits=False)
                total = None
                for k in range(net.depth):
                    d = ad.scale(residual_sq_norm(params, k), cfg.lam / 2.0)
                    total = d if total is None else ad.add(total, d)
                loss = loss_fn(trace.output, train_set.labels[idx], net)
                total = loss if total is None else ad.add(total, loss)
            g = tape.backward(total)
            grads = {n: g.get(t, np.zeros_like(t.data)) for n, t in params.items()}
            weights = sgd_step(weights, grads, velocity, lr, cfg.momentum)
        snapshots.append(weights.copy())
    return snapshots
