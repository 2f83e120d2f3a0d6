"""Optimization of the adaptation parameters against a frozen backbone.

The objective over two stochastically routed forward passes is

    loss = CE(logits_A, labels) + 1/2 * (KL(A||B) + KL(B||A))

so agreement between independently routed passes is rewarded. The backbone
never updates: only mixture-site modules (and optionally the classifier
head) carry gradients, and the optimizer owns buffers for exactly those.

The optimizer is AdamW (decoupled weight decay, bias-corrected moments) under
a linear warmup -> linear decay schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import BackboneModel
from .data import LabeledExample, batch_iter
from .errors import ConfigError, ShapeError, TrainingError
from .mixture import (
    MixtureSite,
    RoutingSelection,
    ensemble_predict,
    fixed_route_forward,
    merge_sites,
    routed_forward,
    select_routing,
    selection_collisions,
    site_parameters,
)
from .tensor import Tensor, backward, cross_entropy, kl_divergence

METRIC_COLUMNS = ("step", "lr", "ce_loss", "kl_loss", "total_loss", "eval_accuracy")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-4
    warmup_fraction: float = 0.06
    weight_decay: float = 0.1
    M: int = 4
    r: int = 8
    consistency: bool = True
    sharing: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs <= 0:
            raise ConfigError(f"train.epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(
                f"train.warmup_fraction must be in [0, 1], got {self.warmup_fraction}"
            )
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.M < 1:
            raise ConfigError(f"train.M must be >= 1, got {self.M}")
        if self.r < 1:
            raise ConfigError(f"train.r must be >= 1, got {self.r}")
        return self


@dataclass
class OptimizerState:
    """AdamW bookkeeping; holds buffers only for trainable parameters."""

    params: List[Tuple[str, Tensor]]
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(params: Sequence[Tuple[str, Tensor]], lr: float,
                   weight_decay: float = 0.0, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    """Keep only trainable tensors; shared objects appear once."""
    seen_ids = set()
    seen_names = set()
    kept = []
    for name, p in params:
        if not p.requires_grad or id(p) in seen_ids:
            continue
        if name in seen_names:
            raise ConfigError(f"duplicate parameter name {name!r}")
        seen_ids.add(id(p))
        seen_names.add(name)
        kept.append((name, p))
    opt = OptimizerState(params=kept, lr=lr, weight_decay=weight_decay,
                         beta1=beta1, beta2=beta2, eps=eps)
    for name, p in kept:
        opt.m[name] = np.zeros_like(p.data)
        opt.v[name] = np.zeros_like(p.data)
    return opt


def adamw_step(opt: OptimizerState, lr: Optional[float] = None) -> None:
    """One decoupled-weight-decay update over the optimizer's parameters.

    Parameters whose gradient is unset are skipped entirely (no decay, no
    moment update) — matching the convention that an untouched parameter is
    not "in" this step.
    """
    step_lr = opt.lr if lr is None else lr
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for name, p in opt.params:
        if p.grad is None:
            continue
        g = p.grad
        opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * (g * g)
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        p.data -= step_lr * (m_hat / (np.sqrt(v_hat) + opt.eps)
                             + opt.weight_decay * p.data)


def lr_at(step: int, total_steps: int, warmup_fraction: float, peak_lr: float) -> float:
    """Linear ramp 0 -> peak over the warmup span, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = warmup_fraction * total_steps
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


def consistency_parts(logits_a: Tensor, logits_b: Tensor, labels: np.ndarray,
                      stop_gradient_second: bool = False):
    """(total, ce, kl) of the two-pass objective.

    The CE term uses pass A's logits only. ``stop_gradient_second`` blocks the
    KL gradient into pass B, an ablation knob for one-sided consistency.
    """
    if logits_a.shape != logits_b.shape:
        raise ShapeError(
            f"consistency passes disagree in shape: {logits_a.shape} vs {logits_b.shape}"
        )
    ce = cross_entropy(logits_a, labels)
    b = logits_b.detach() if stop_gradient_second else logits_b
    kl = 0.5 * (kl_divergence(logits_a, b) + kl_divergence(b, logits_a))
    return ce + kl, ce, kl


def consistency_loss(logits_a: Tensor, logits_b: Tensor, labels: np.ndarray,
                     stop_gradient_second: bool = False) -> Tensor:
    total, _, _ = consistency_parts(logits_a, logits_b, labels, stop_gradient_second)
    return total


@dataclass
class StepMetrics:
    total: float
    ce: float
    kl: float
    sel_a: RoutingSelection
    sel_b: Optional[RoutingSelection]
    collisions: int


def train_step(model: BackboneModel, sites: Sequence[MixtureSite],
               batch: Tuple[np.ndarray, np.ndarray], opt: OptimizerState,
               rng: np.random.Generator, consistency: bool = True,
               lr: Optional[float] = None, tied: bool = False,
               stop_gradient_second: bool = False) -> StepMetrics:
    """Two routed passes, one backward, one optimizer update.

    With consistency off, only pass A runs and the loss is plain CE — half
    the forward cost. All examples in the batch share each pass's selection.
    """
    ids, labels = batch
    for _, p in opt.params:
        p.grad = None

    sel_a = select_routing(sites, rng, tied=tied)
    logits_a = routed_forward(model, sites, ids, sel_a)
    if consistency:
        sel_b = select_routing(sites, rng, tied=tied)
        logits_b = routed_forward(model, sites, ids, sel_b)
        total, ce, kl = consistency_parts(logits_a, logits_b, labels,
                                          stop_gradient_second)
        collisions = selection_collisions(sel_a, sel_b)
    else:
        sel_b = None
        ce = cross_entropy(logits_a, labels)
        total, kl = ce, None
        collisions = 0

    total_val = total.item()
    if not math.isfinite(total_val):
        raise TrainingError(
            f"non-finite loss at optimizer step {opt.step}: total={total_val}, "
            f"ce={ce.item()}, kl={'-' if kl is None else kl.item()}, "
            f"lr={opt.lr if lr is None else lr}"
        )

    backward(total)
    adamw_step(opt, lr=lr)
    return StepMetrics(total=total_val, ce=ce.item(),
                       kl=0.0 if kl is None else kl.item(),
                       sel_a=sel_a, sel_b=sel_b, collisions=collisions)


def evaluate(model: BackboneModel, sites: Sequence[MixtureSite],
             examples: Sequence[LabeledExample], mode: str = "merge",
             batch_size: int = 64, rng: Optional[np.random.Generator] = None,
             T: int = 4) -> float:
    """Accuracy under one of the inference modes.

    merge: average module weights, then a deterministic forward.
    random_route / ensemble: Monte-Carlo over routing draws (need an rng);
    random_route is exactly ensemble with T=1.
    fixed_route: always the first module pair.
    """
    if mode in ("random_route", "ensemble") and rng is None:
        raise ConfigError(f"mode {mode!r} consumes randomness and needs an rng")
    eval_sites = merge_sites(sites) if mode == "merge" else sites

    correct = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        ids = np.array([ex.token_ids for ex in chunk], dtype=np.int64)
        labels = np.array([ex.label for ex in chunk], dtype=np.int64)
        if mode in ("merge", "fixed_route"):
            scores = fixed_route_forward(model, eval_sites, ids).data
        elif mode == "random_route":
            scores = ensemble_predict(model, sites, ids, T=1, rng=rng).data
        elif mode == "ensemble":
            scores = ensemble_predict(model, sites, ids, T=T, rng=rng).data
        else:
            raise ConfigError(f"unknown inference mode {mode!r}")
        correct += int((scores.argmax(axis=1) == labels).sum())
    return correct / len(examples) if examples else 0.0


@dataclass
class TrainState:
    step: int = 0
    history: List[dict] = field(default_factory=list)
    epoch_summaries: List[dict] = field(default_factory=list)
    collisions_total: int = 0


def train_loop(config: TrainConfig, data, model: BackboneModel,
               sites: Sequence[MixtureSite],
               eval_mode: str = "merge") -> TrainState:
    """Full seeded run; same config and seed twice gives identical history.

    ``data`` is a (train_examples, eval_examples) pair. Separate RNG streams
    (derived from config.seed) drive batch shuffling and routing, so changing
    one consumer cannot silently shift the other. Per-step rows go to
    ``history``; each epoch's final row carries that epoch's eval accuracy.
    """
    config.validate()
    train_ex, eval_ex = data
    if not train_ex:
        raise ConfigError("train_loop got an empty training set")

    data_seq, route_seq = np.random.SeedSequence(config.seed).spawn(2)
    data_rng = np.random.default_rng(data_seq)
    routing_rng = np.random.default_rng(route_seq)

    params = list(model.head_parameters()) + site_parameters(sites)
    opt = init_optimizer(params, lr=config.lr, weight_decay=config.weight_decay)
    if not opt.params:
        raise ConfigError("nothing to train: no trainable parameters found")

    steps_per_epoch = math.ceil(len(train_ex) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    state = TrainState()

    for epoch in range(config.epochs):
        epoch_losses = []
        for ids, labels in batch_iter(train_ex, config.batch_size, data_rng):
            lr = lr_at(state.step, total_steps, config.warmup_fraction, config.lr)
            metrics = train_step(model, sites, (ids, labels), opt, routing_rng,
                                 consistency=config.consistency, lr=lr)
            state.step += 1
            state.collisions_total += metrics.collisions
            epoch_losses.append(metrics.total)
            state.history.append({
                "step": state.step, "lr": lr, "ce_loss": metrics.ce,
                "kl_loss": metrics.kl, "total_loss": metrics.total,
                "eval_accuracy": None,
            })
        train_acc = evaluate(model, sites, train_ex, mode=eval_mode)
        eval_acc = evaluate(model, sites, eval_ex, mode=eval_mode) if eval_ex else train_acc
        state.history[-1]["eval_accuracy"] = eval_acc
        state.epoch_summaries.append({
            "epoch": epoch, "mean_loss": float(np.mean(epoch_losses)),
            "train_accuracy": train_acc, "eval_accuracy": eval_acc,
        })
    return state


def write_metrics_csv(history: Sequence[dict], path: str) -> None:
    """Metric rows in a fixed column order; floats via repr for exactness."""
    import csv

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow([fmt(row[c]) for c in METRIC_COLUMNS])
