"""Gradients, Adam, learning-rate schedules and classification losses."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import InvalidArgument, NumericError


def value_and_grad(loss_fn, params: dict, *args, **kwargs):
    """Evaluate ``loss_fn(param_tensors, *args)`` and backpropagate.

    Returns ``(loss_value, grads)`` where ``grads`` maps every parameter
    name to an array of the parameter's shape; parameters the loss does
    not depend on get exact zeros.
    """
    leaves = {k: ag.parameter(v, name=k) for k, v in params.items()}
    loss = loss_fn(leaves, *args, **kwargs)
    if not isinstance(loss, ag.Tensor):
        raise InvalidArgument("loss function must return a Tensor")
    if loss.data.size != 1:
        raise InvalidArgument(f"loss must be scalar, got shape {loss.shape}")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(t.shape)
             for k, t in leaves.items()}
    return float(loss.data), grads


def accumulate(grad_list, accumulation_steps=None):
    """Average microbatch gradients into one effective-batch gradient.

    Equal to a single pass over the concatenated batch when each
    microbatch loss is a mean over equally sized microbatches.
    """
    if not grad_list:
        raise InvalidArgument("no gradients to accumulate")
    steps = len(grad_list) if accumulation_steps is None else accumulation_steps
    if steps < 1:
        raise InvalidArgument("accumulation_steps must be >= 1")
    keys = grad_list[0].keys()
    out = {}
    for k in keys:
        shape = grad_list[0][k].shape
        total = np.zeros(shape, dtype=grad_list[0][k].dtype)
        for g in grad_list:
            if g.keys() != keys or g[k].shape != shape:
                raise InvalidArgument(f"gradient shape mismatch for {k}")
            total += g[k]
        out[k] = total / steps
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, **hyper)


def adam_step(params: dict, grads: dict, state: AdamState, lr):
    """One bias-corrected Adam update.

    ``lr`` is a float or a mapping from parameter name to learning rate.
    Parameters without a gradient entry are left alone.  Returns new
    ``(params, state)``; inputs are not modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * (g * g)
        step = lr[name] if isinstance(lr, dict) else lr
        update = step * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p - update).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float = 1e-4
    warmup_epochs: int = 10
    total_epochs: int = 200
    final_lr: float = 1e-6
    layer_decay: float | None = 0.75

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise InvalidArgument("need 0 <= warmup_epochs <= total_epochs")
        if self.final_lr > self.base_lr:
            raise InvalidArgument("final_lr must not exceed base_lr")

    @classmethod
    def pretrain(cls):
        return cls(base_lr=1e-4, warmup_epochs=20, total_epochs=400, final_lr=0.0, layer_decay=None)

    @classmethod
    def finetune(cls):
        return cls()


def lr_at(s: ScheduleSpec, epoch) -> float:
    """Linear warmup from 0, then cosine annealing down to ``final_lr``.

    ``epoch`` may be fractional for per-step schedules.  The last epoch
    (``total_epochs - 1``) lands exactly on ``final_lr``.
    """
    if not 0 <= epoch < s.total_epochs:
        raise InvalidArgument(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.warmup_epochs:
        return s.base_lr * epoch / s.warmup_epochs
    span = s.total_epochs - 1 - s.warmup_epochs
    if span <= 0:
        return s.base_lr
    progress = min(1.0, (epoch - s.warmup_epochs) / span)
    return s.final_lr + (s.base_lr - s.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def layerwise_lrs(base_lr, decay, n_layers):
    """Learning rates for groups [embed, block 1..n, head]; the head gets ``base_lr``."""
    if not 0.0 < decay <= 1.0:
        raise InvalidArgument(f"decay must be in (0, 1], got {decay}")
    groups = n_layers + 2
    return [base_lr * decay ** (groups - 1 - g) for g in range(groups)]


_BLOCK = re.compile(r"^blocks\.(\d+)\.")


def layer_group(name, n_layers):
    """Group index of a parameter for layer-wise decay."""
    if name.startswith("patch_embed") or name == "cls_token":
        return 0
    m = _BLOCK.match(name)
    if m:
        return int(m.group(1)) + 1
    return n_layers + 1


def param_lrs(params, lr, decay, n_layers):
    """Per-parameter learning rates for an epoch-level ``lr``."""
    if decay is None:
        return {k: lr for k in params}
    scales = layerwise_lrs(1.0, decay, n_layers)
    return {k: lr * scales[layer_group(k, n_layers)] for k in params}


# ---------------------------------------------------------------------------
# classification loss


def pos_weights(labels, direction="neg_over_pos"):
    """Per-class positive weights from a (n, k) label matrix.

    ``neg_over_pos`` balances positive and negative contributions;
    ``pos_over_neg`` is the literal reading offered as an override.
    Classes without positives (or negatives) get weight 1.
    """
    labels = np.asarray(labels).reshape(len(labels), -1)
    pos = labels.sum(axis=0).astype(float)
    neg = len(labels) - pos
    with np.errstate(divide="ignore", invalid="ignore"):
        w = neg / pos if direction == "neg_over_pos" else pos / neg
    return np.where(np.isfinite(w) & (w > 0), w, 1.0)


def weighted_bce(logits=None, labels=None, pos_weight=1.0, probabilities=None):
    """Mean weighted binary cross-entropy over samples and classes.

    Pass ``logits`` (array or tensor; stable softplus form) or
    ``probabilities`` (array in the open interval (0, 1)).  Returns a scalar
    tensor.
    """
    if probabilities is not None:
        p = np.asarray(probabilities, dtype=np.float64)
        if np.any(p <= 0) or np.any(p >= 1):
            raise InvalidArgument("probabilities must lie strictly inside (0, 1)")
        logits = np.log(p) - np.log1p(-p)
    y = np.asarray(labels)
    if np.any((y != 0) & (y != 1)):
        raise InvalidArgument("labels must be 0/1")
    if np.any(np.asarray(pos_weight) <= 0):
        raise InvalidArgument("pos_weight must be positive")
    z = logits if isinstance(logits, ag.Tensor) else ag.Tensor(np.asarray(logits, dtype=np.float64))
    return ag.mean(ag.bce_with_logits(z, y.reshape(z.shape), pos_weight))
