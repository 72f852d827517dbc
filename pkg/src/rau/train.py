"""Optimizers, schedules, and the batch training loops.

Classification shuffles examples each epoch with the run's own RNG;
language modeling walks contiguous windows over parallel token streams,
carrying hidden state across windows (gradients stop at window edges).
Every random draw flows from the run seed, so a (seed, config, data)
triple pins every emitted metric except wall-clock time.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .autograd import Grads, backward, clip_global_norm
from .cells import iter_tensors
from .data import lm_batches
from .linalg import ContractError, NumericError, Rng
from .models import classify_forward, cross_entropy, lm_forward, perplexity

DEFAULT_CLIP_NORM = 5.0


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class LrSchedule:
    """base_lr held until decay_start_epoch, then multiplied by decay_factor each epoch."""

    base_lr: float
    decay_factor: float = 1.0
    decay_start_epoch: int = 1

    def __post_init__(self):
        if not 0.0 < self.decay_factor <= 1.0:
            raise ContractError(f"decay_factor must be in (0, 1], got {self.decay_factor}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for a 1-based epoch index."""
    if epoch < 0:
        raise ContractError("lr_at: epoch must be >= 0")
    exponent = max(0, epoch - schedule.decay_start_epoch + 1)
    return schedule.base_lr * schedule.decay_factor**exponent


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    split: str
    loss: float
    metric_name: str
    metric_value: float
    wall_ms: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "step": self.step,
                "split": self.split,
                "loss": self.loss,
                "metric_name": self.metric_name,
                "metric_value": self.metric_value,
                "wall_ms": self.wall_ms,
                "seed": self.seed,
            }
        )


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Grads | None = None
    v: Grads | None = None


def make_optimizer(kind: str, params, lr: float) -> OptimizerState:
    if kind == "sgd":
        return OptimizerState(kind="sgd", lr=lr)
    if kind == "adam":
        return OptimizerState(kind="adam", lr=lr, m=Grads.zeros_like(params), v=Grads.zeros_like(params))
    raise ContractError(f"unknown optimizer kind {kind!r}")


def _check_grads_finite(grads: Grads, context: str) -> None:
    for name, g in grads.items():
        s = float(np.sum(g * g))
        if not np.isfinite(s):
            raise NumericError(f"{context}: non-finite gradient in {name}")


def sgd_step(params, grads: Grads, lr: float):
    """Plain gradient descent; mutates and returns params."""
    _check_grads_finite(grads, "sgd_step")
    for name, arr in iter_tensors(params):
        arr -= lr * grads[name]
    return params


def adam_step(state: OptimizerState, params, grads: Grads):
    """Bias-corrected Adam update; mutates and returns (state, params)."""
    _check_grads_finite(grads, "adam_step")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, arr in iter_tensors(params):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        arr -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state, params


def apply_update(opt: OptimizerState, params, grads: Grads):
    if opt.kind == "sgd":
        sgd_step(params, grads, opt.lr)
    else:
        adam_step(opt, params, grads)


def train_epoch_classifier(model, xs, ys, opt: OptimizerState, rng: Rng, batch_size: int,
                           epoch: int, seed: int, clip_norm: float = DEFAULT_CLIP_NORM,
                           max_steps: int | None = None, step_offset: int = 0):
    """One seeded-shuffle pass; returns (train record, steps done this epoch).

    Loss and accuracy are running averages over the shuffled batches.
    max_steps caps total optimizer steps (step_offset counts prior ones).
    """
    N = len(ys)
    if N == 0:
        raise ContractError("train_epoch_classifier: empty data")
    t0 = time.monotonic()
    order = rng.permutation(N)
    total_loss = 0.0
    correct = 0
    seen = 0
    steps = 0
    for start in range(0, N, batch_size):
        if max_steps is not None and step_offset + steps >= max_steps:
            break
        idx = order[start:start + batch_size]
        xb = xs[idx]
        yb = ys[idx]
        logits, tape = classify_forward(model, xb, train_mode=True, rng=rng)
        loss, dlogits = cross_entropy(logits, yb)
        if not np.isfinite(loss):
            raise DivergenceError(f"classifier loss diverged at epoch {epoch}, step {step_offset + steps}")
        grads = backward(tape, dlogits)
        try:
            clip_global_norm(grads, clip_norm)
            apply_update(opt, model, grads)
        except NumericError as e:
            raise DivergenceError(f"classifier gradients diverged at epoch {epoch}, "
                                  f"step {step_offset + steps}: {e}") from e
        total_loss += loss * len(idx)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        seen += len(idx)
        steps += 1
    wall_ms = int((time.monotonic() - t0) * 1000)
    record = MetricsRecord(
        epoch=epoch, step=step_offset + steps, split="train",
        loss=total_loss / seen, metric_name="accuracy", metric_value=correct / seen,
        wall_ms=wall_ms, seed=seed,
    )
    return record, steps


def evaluate_classifier(model, xs, ys, batch_size: int = 256):
    """Deterministic eval pass; returns (mean loss, accuracy)."""
    N = len(ys)
    if N == 0:
        raise ContractError("evaluate_classifier: empty data")
    total_loss = 0.0
    correct = 0
    for start in range(0, N, batch_size):
        xb = xs[start:start + batch_size]
        yb = ys[start:start + batch_size]
        logits, _ = classify_forward(model, xb, train_mode=False)
        loss, _ = cross_entropy(logits, yb)
        total_loss += loss * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return total_loss / N, correct / N


def _lm_window_loss(model, inputs, targets, states, train_mode, rng):
    """Forward one window; returns (loss/token, token count, states, tape, per-step dlogits)."""
    logits, states, tape = lm_forward(model, inputs, h_init=states, train_mode=train_mode, rng=rng)
    T = logits.shape[0]
    B = logits.shape[1]
    flat = logits.reshape(T * B, -1)
    flat_targets = np.ascontiguousarray(targets.T).reshape(T * B)
    loss, dflat = cross_entropy(flat, flat_targets)
    dsteps = dflat.reshape(T, B, -1) if train_mode else None
    return loss, T * B, states, tape, dsteps


def train_epoch_lm(model, stream, opt: OptimizerState, rng: Rng, batch_size: int, unroll: int,
                   epoch: int, seed: int, clip_norm: float = DEFAULT_CLIP_NORM,
                   max_steps: int | None = None, step_offset: int = 0):
    """One pass over the token stream with cross-window state carry."""
    t0 = time.monotonic()
    total_loss = 0.0
    total_tokens = 0
    steps = 0
    states = None
    for inputs, targets, is_new_epoch in lm_batches(stream, batch_size, unroll):
        if max_steps is not None and step_offset + steps >= max_steps:
            break
        if is_new_epoch:
            states = None
        loss, tokens, states, tape, dsteps = _lm_window_loss(model, inputs, targets, states, True, rng)
        if not np.isfinite(loss):
            raise DivergenceError(f"LM loss diverged at epoch {epoch}, step {step_offset + steps}")
        grads = backward(tape, dsteps)
        try:
            clip_global_norm(grads, clip_norm)
            apply_update(opt, model, grads)
        except NumericError as e:
            raise DivergenceError(f"LM gradients diverged at epoch {epoch}, "
                                  f"step {step_offset + steps}: {e}") from e
        total_loss += loss * tokens
        total_tokens += tokens
        steps += 1
    wall_ms = int((time.monotonic() - t0) * 1000)
    avg = total_loss / total_tokens
    record = MetricsRecord(
        epoch=epoch, step=step_offset + steps, split="train",
        loss=avg, metric_name="perplexity", metric_value=perplexity(avg * total_tokens, total_tokens),
        wall_ms=wall_ms, seed=seed,
    )
    return record, steps


def evaluate_lm(model, stream, batch_size: int, unroll: int):
    """Deterministic stream evaluation; returns (loss per token, perplexity)."""
    total_loss = 0.0
    total_tokens = 0
    states = None
    for inputs, targets, is_new_epoch in lm_batches(stream, batch_size, unroll):
        if is_new_epoch:
            states = None
        loss, tokens, states, _, _ = _lm_window_loss(model, inputs, targets, states, False, None)
        total_loss += loss * tokens
        total_tokens += tokens
    avg = total_loss / total_tokens
    return avg, perplexity(avg * total_tokens, total_tokens)
