"""Training objectives: intent cross-entropy, distillation KL, and their blend.

The distillation loss treats the teacher embedding as a fixed reference
distribution: tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)).
Teacher-side log-probabilities are evaluated with the same arithmetic as
the student side, so identical inputs produce a loss of exactly 0.0, and
no gradient ever flows into the teacher.

``total_loss`` returns the untouched input loss at the alpha endpoints
(alpha=0 gives the intent loss object itself, alpha=1 the distillation
loss), which makes training at alpha=0 bit-identical to training on the
intent objective alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError, DomainError, LabelError, NumericError
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    """Interpolation weight and distillation temperature."""

    alpha: float = 0.5
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0.0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], in the stable log-sum-exp form.

    Fused into a single tape entry (the probabilities computed for the
    value double as the backward cache): d/dlogits = softmax - onehot.
    """
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    k = logits.shape[0]
    if not isinstance(label, (int, np.integer)) or not 0 <= int(label) < k:
        raise LabelError(f"label {label!r} out of range for {k} classes")
    label = int(label)
    shifted = logits.data - np.max(logits.data)
    e = np.exp(shifted)
    total = np.sum(e)
    value = np.log(total) - shifted[label]
    p = e / total

    def bwd(g):
        grad = p * g
        grad[label] -= g
        return (grad,)

    return tt.custom_op("cross_entropy", [logits],
                        np.asarray(value, dtype=logits.dtype), bwd)


def _log_softmax_np(v: np.ndarray, inv_t) -> np.ndarray:
    s = v * inv_t
    s = s - np.max(s)
    return s - np.log(np.sum(np.exp(s)))


def distillation_kl(e_te: Tensor, e_lang: Union[Tensor, np.ndarray],
                    temperature: float = 1.0) -> Tensor:
    """tau^2-scaled KL from the teacher distribution to the student's.

    ``e_te`` is the student-side pooled embedding (gradient flows into
    it); ``e_lang`` is the teacher embedding and is detached regardless
    of how it is passed.
    """
    if not temperature > 0.0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    teacher = e_lang.data if isinstance(e_lang, Tensor) else np.asarray(e_lang)
    if e_te.data.ndim != 1 or teacher.ndim != 1 or e_te.shape[0] != teacher.shape[0]:
        raise DimensionError(
            f"distillation_kl: embedding shapes disagree, {e_te.shape} vs {teacher.shape}")
    dtype = e_te.dtype
    inv_t = dtype.type(1.0 / temperature)
    tau = dtype.type(temperature)
    teacher = teacher.astype(dtype, copy=False)

    # student log-probabilities, mirroring _log_softmax_np op for op so
    # that identical inputs cancel exactly; fused into one tape entry
    # with d/de_te = tau * (q - p)
    s = e_te.data * inv_t
    shifted = s - np.max(s)
    e = np.exp(shifted)
    total = np.sum(e)
    log_q = shifted - np.log(total)

    log_p = _log_softmax_np(teacher, inv_t)
    p = np.exp(log_p)
    value = np.sum(p * (log_p - log_q)) * tau ** 2
    q = e / total

    def bwd(g):
        return (g * tau * (q - p),)

    return tt.custom_op("distillation_kl", [e_te],
                        np.asarray(value, dtype=dtype), bwd)


def total_loss(loss_tl: Tensor, loss_intent: Tensor, cfg: LossConfig) -> Tensor:
    """alpha * loss_tl + (1 - alpha) * loss_intent.

    The endpoints return the corresponding loss tensor unchanged, so a
    zero-weighted term contributes nothing to the graph at all.
    """
    if not (np.all(np.isfinite(loss_tl.data)) and np.all(np.isfinite(loss_intent.data))):
        raise NumericError("total_loss: non-finite component loss")
    a = cfg.alpha
    if a == 0.0:
        return loss_intent
    if a == 1.0:
        return loss_tl
    dtype = loss_intent.dtype
    return tt.add(tt.mul(loss_tl, Tensor(np.asarray(dtype.type(a)))),
                  tt.mul(loss_intent, Tensor(np.asarray(dtype.type(1.0 - a)))))


def batch_loss(losses: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of per-example losses, in batch order."""
    if len(losses) == 0:
        raise ContractError("batch_loss: empty batch")
    acc = losses[0]
    for one in losses[1:]:
        acc = tt.add(acc, one)
    inv = acc.dtype.type(1.0 / len(losses))
    return tt.mul(acc, Tensor(np.asarray(inv)))
