"""Training regimes: offline pretraining, online fine-tuning, episodic meta-training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from chandenoise.autodiff import grad
from chandenoise.datasets import Dataset, MetaTask
from chandenoise.network import ResidualDenoiser, residual_loss
from chandenoise.optim import AdamState, adam_step, sgd_step

# Online fine-tuning batch handling: full batch up to this size, otherwise
# seeded mini-batches.
FULL_BATCH_LIMIT = 64
MINI_BATCH_SIZE = 32


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the history up to that point."""

    def __init__(self, msg: str, history):
        super().__init__(msg)
        self.history = history


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)


def _loss_and_grad(model: ResidualDenoiser, noisy: np.ndarray, target: np.ndarray):
    model.zero_grad()
    loss = residual_loss(model, noisy, target)
    loss.backward()
    return loss.item(), model.grad_theta()


def evaluate_loss(model: ResidualDenoiser, dataset: Dataset) -> float:
    noisy, target = dataset.arrays()
    return residual_loss(model, noisy, target).item()


def pretrain(model: ResidualDenoiser, dataset: Dataset, epochs: int,
             batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
             val_fraction: float = 0.1) -> TrainHistory:
    """ADAM minimization of the mean residual loss over the offline dataset.

    Mutates the model in place and returns the per-epoch history. The
    validation split is carved off the shuffled dataset up front.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    noisy, target = dataset.arrays()
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ValueError("no training samples left after validation split")
    history = TrainHistory()
    theta = model.get_theta()
    state = AdamState.init(theta.size)
    for _ in range(epochs):
        order = rng.permutation(train_idx.size)
        batch_losses = []
        for start in range(0, order.size, batch_size):
            sel = train_idx[order[start:start + batch_size]]
            loss, g = _loss_and_grad(model, noisy[sel], target[sel])
            batch_losses.append(loss)
            theta = adam_step(state, theta, g, lr)
            model.set_theta(theta)
        history.train_loss.append(float(np.mean(batch_losses)))
        if n_val:
            history.val_loss.append(
                residual_loss(model, noisy[val_idx], target[val_idx]).item())
        latest = history.val_loss[-1] if n_val else history.train_loss[-1]
        if not np.isfinite(latest):
            raise TrainingDivergedError("pretraining loss became non-finite", history)
    return history


def fine_tune(model: ResidualDenoiser, dataset: Dataset, steps: int, lr: float,
              seed: int = 0, sample_cap: int | None = None) -> ResidualDenoiser:
    """Plain gradient-descent adaptation on the online dataset.

    Returns an adapted copy; the incoming model is untouched. Full-batch for
    small datasets, seeded mini-batches of MINI_BATCH_SIZE beyond
    FULL_BATCH_LIMIT samples. Every layer is updated (deep fine-tuning).
    """
    adapted = model.clone()
    if steps == 0 or lr == 0.0:
        return adapted
    noisy, target = dataset.arrays()
    rng = np.random.default_rng(seed)
    if sample_cap is not None and sample_cap < len(dataset):
        keep = rng.choice(len(dataset), size=sample_cap, replace=False)
        noisy, target = noisy[keep], target[keep]
    n = noisy.shape[0]
    theta = adapted.get_theta()
    if n <= FULL_BATCH_LIMIT:
        for _ in range(steps):
            _, g = _loss_and_grad(adapted, noisy, target)
            theta = sgd_step(theta, g, lr)
            adapted.set_theta(theta)
    else:
        order = rng.permutation(n)
        pos = 0
        for _ in range(steps):
            if pos + MINI_BATCH_SIZE > n:
                order = rng.permutation(n)
                pos = 0
            sel = order[pos:pos + MINI_BATCH_SIZE]
            pos += MINI_BATCH_SIZE
            _, g = _loss_and_grad(adapted, noisy[sel], target[sel])
            theta = sgd_step(theta, g, lr)
            adapted.set_theta(theta)
    if not np.all(np.isfinite(theta)):
        raise TrainingDivergedError("fine-tuning diverged", None)
    return adapted


def maml_inner(model: ResidualDenoiser, support: Dataset, alpha: float,
               steps: int = 1) -> np.ndarray:
    """Task adaptation theta' = theta - alpha * grad; the model is untouched."""
    noisy, target = support.arrays()
    scratch = model.clone()
    theta = scratch.get_theta()
    for _ in range(steps):
        _, g = _loss_and_grad(scratch, noisy, target)
        theta = sgd_step(theta, g, alpha)
        scratch.set_theta(theta)
    return theta


def _task_meta_grad_first_order(model: ResidualDenoiser, task: MetaTask,
                                alpha: float, inner_steps: int):
    """Query-loss gradient at the adapted parameters (inner grad held constant)."""
    theta0 = model.get_theta()
    theta_adapted = maml_inner(model, task.support, alpha, steps=inner_steps)
    model.set_theta(theta_adapted)
    q_noisy, q_target = task.query.arrays()
    loss, g = _loss_and_grad(model, q_noisy, q_target)
    model.set_theta(theta0)
    return loss, g


def _task_meta_grad_second_order(model: ResidualDenoiser, task: MetaTask,
                                 alpha: float, inner_steps: int):
    """Exact meta-gradient: differentiate through the inner update."""
    params = model.parameters()
    s_noisy, s_target = task.support.arrays()
    q_noisy, q_target = task.query.arrays()
    adapted = params
    for _ in range(inner_steps):
        inner = residual_loss(model, s_noisy, s_target, params=adapted)
        inner_grads = grad(inner, adapted, create_graph=True)
        adapted = [p - alpha * g for p, g in zip(adapted, inner_grads)]
    outer = residual_loss(model, q_noisy, q_target, params=adapted)
    outer_grads = grad(outer, params)
    flat = np.concatenate([np.asarray(g.data, dtype=model.dtype).ravel()
                           for g in outer_grads])
    return outer.item(), flat


def maml_train(model: ResidualDenoiser, tasks: list[MetaTask], alpha: float,
               beta: float, epochs: int, task_batch: int, seed: int = 0,
               inner_steps: int = 1, second_order: bool = False) -> list[float]:
    """Episodic meta-training; returns the meta-loss history (one entry per
    outer update).

    Per outer step: adapt each task in the batch on its support set, sum the
    query-loss gradients of the adapted models (fixed task order), and apply
    one ADAM step with rate beta to the shared initialization.
    """
    if not tasks:
        raise ValueError("need at least one task")
    rng = np.random.default_rng(seed)
    theta = model.get_theta()
    state = AdamState.init(theta.size)
    history: list[float] = []
    task_fn = _task_meta_grad_second_order if second_order else _task_meta_grad_first_order
    for _ in range(epochs):
        order = rng.permutation(len(tasks))
        for start in range(0, len(tasks), task_batch):
            batch = [tasks[i] for i in order[start:start + task_batch]]
            total_grad = np.zeros_like(theta)
            total_loss = 0.0
            for task in batch:
                loss, g = task_fn(model, task, alpha, inner_steps)
                total_grad += g
                total_loss += loss
            theta = adam_step(state, theta, total_grad, beta)
            model.set_theta(theta)
            history.append(total_loss / len(batch))
            if not np.isfinite(history[-1]):
                raise TrainingDivergedError("meta-training loss became non-finite",
                                            history)
    return history
