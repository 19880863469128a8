"""Loss terms for confidence-weighted multi-level distillation.

Each operation returns a LossTerm: a scalar value plus the upstream
gradients for the trainable (student) side only. Teacher-side inputs are
plain arrays and never receive gradients. Distillation terms are rescaled by
the inverse summed task losses of the two models involved; that denominator
is treated as a constant with respect to every gradient, so large task
losses damp knowledge transfer without coupling the gradient paths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .nn import ForwardTrace, ModelParams, check_congruent

EPS_PROB = 1e-12   # probability clamp inside log terms
EPS_DENOM = 1e-8   # guard for the task-loss normalizer


@dataclass
class LossTerm:
    """Scalar loss plus student-side upstream gradients.

    n is the batch size the term was computed on (None for batch-free terms
    such as the parameter-space proximal penalty); composition checks it so
    terms from different batches cannot be mixed.
    """

    value: float
    n: int | None = None
    d_logits: np.ndarray | None = None
    d_features: np.ndarray | None = None
    d_params: np.ndarray | None = None

    def scaled(self, factor: float) -> "LossTerm":
        return LossTerm(
            value=self.value * factor,
            n=self.n,
            d_logits=None if self.d_logits is None else self.d_logits * factor,
            d_features=None if self.d_features is None else self.d_features * factor,
            d_params=None if self.d_params is None else self.d_params * factor,
        )


def task_ce(trace: ForwardTrace, labels: np.ndarray) -> LossTerm:
    """Mean binary cross-entropy of the traced model against hard labels."""
    y = np.asarray(labels)
    if y.shape != (trace.n,):
        raise InputError(f"labels shape {y.shape} does not match batch size {trace.n}")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    y = y.astype(np.int64)
    p1 = np.clip(trace.probs[:, 1], EPS_PROB, 1.0 - EPS_PROB)
    value = float(np.mean(-(y * np.log(p1) + (1 - y) * np.log(1.0 - p1))))
    one_hot = np.zeros_like(trace.probs)
    one_hot[np.arange(trace.n), y] = 1.0
    d_logits = (trace.probs - one_hot) / trace.n
    return LossTerm(value=value, n=trace.n, d_logits=d_logits)


def kl_output(teacher_probs: np.ndarray, student_trace: ForwardTrace) -> LossTerm:
    """Mean KL(teacher || student) over soft predictions; teacher is constant."""
    t = np.asarray(teacher_probs, dtype=np.float64)
    if t.shape != student_trace.probs.shape:
        raise InputError(
            f"teacher probs shape {t.shape} does not match student {student_trace.probs.shape}"
        )
    if (t < 0).any() or (np.abs(t.sum(axis=1) - 1.0) > 1e-6).any():
        raise InputError("teacher rows must be probability distributions")
    s = np.clip(student_trace.probs, EPS_PROB, 1.0)
    # convention: 0 * log 0 = 0 on the teacher side
    terms = np.where(t > 0.0, t * (np.log(np.maximum(t, EPS_PROB)) - np.log(s)), 0.0)
    value = float(terms.sum(axis=1).mean())
    # exact for a softmax student at temperature 1
    d_logits = (student_trace.probs - t) / student_trace.n
    return LossTerm(value=value, n=student_trace.n, d_logits=d_logits)


def mse_features(teacher_features: np.ndarray, student_trace: ForwardTrace) -> LossTerm:
    """Mean squared error between feature matrices; teacher is constant."""
    t = np.asarray(teacher_features, dtype=np.float64)
    s = student_trace.features
    if t.shape != s.shape:
        raise InputError(f"teacher features shape {t.shape} does not match student {s.shape}")
    diff = s - t
    value = float(np.mean(diff * diff))
    d_features = (2.0 / diff.size) * diff
    return LossTerm(value=value, n=student_trace.n, d_features=d_features)


def adaptive_scale(raw: LossTerm, task_a: float, task_b: float) -> LossTerm:
    """Damp a distillation term by the summed task losses of both models.

    The denominator carries no gradient: it rescales the raw term's value and
    gradients by the same constant factor.
    """
    return raw.scaled(1.0 / (task_a + task_b + EPS_DENOM))


def proximal(p: ModelParams, t_global: ModelParams, mu: float) -> LossTerm:
    """(mu/2) * squared distance of p from the frozen global anchor."""
    check_congruent(p, t_global)
    if mu < 0:
        raise InputError(f"proximal coefficient must be >= 0 (got {mu})")
    diff = p.values - t_global.values
    return LossTerm(value=0.5 * mu * float(diff @ diff), d_params=mu * diff)


def _check_same_batch(terms: list[LossTerm]):
    sizes = {t.n for t in terms if t.n is not None}
    if len(sizes) > 1:
        raise ContractError(f"loss terms come from different batches: sizes {sorted(sizes)}")


def combine(weighted: list[tuple[float, LossTerm]]) -> LossTerm:
    """Weighted sum of loss terms computed on one batch, gradients included."""
    terms = [t for _w, t in weighted]
    _check_same_batch(terms)
    out = LossTerm(value=0.0, n=next((t.n for t in terms if t.n is not None), None))
    for w, t in weighted:
        out.value += w * t.value
        for attr in ("d_logits", "d_features", "d_params"):
            g = getattr(t, attr)
            if g is None:
                continue
            acc = getattr(out, attr)
            setattr(out, attr, w * g if acc is None else acc + w * g)
    return out


def compose_T_loss(task: LossTerm, kl_mutual: LossTerm, feat_mutual: LossTerm) -> LossTerm:
    """Transfer-model total: task + mutual output distill + mutual feature distill.

    All gradients in the result belong to the transfer model.
    """
    return combine([(1.0, task), (1.0, kl_mutual), (1.0, feat_mutual)])


def compose_P_loss(
    task: LossTerm,
    kl_mutual: LossTerm,
    feat_mutual: LossTerm,
    prox: LossTerm | None = None,
    peer_kl: LossTerm | None = None,
    peer_feat: LossTerm | None = None,
    lambda_c: float = 0.5,
) -> LossTerm:
    """Personalized-model total: task + mutual terms + weighted peer terms + proximal.

    Peer terms may be omitted only when lambda_c is 0; they are skipped
    entirely in that case so the cross-client pathway contributes exactly
    zero to value and gradient.
    """
    if lambda_c < 0:
        raise InputError(f"lambda_c must be >= 0 (got {lambda_c})")
    weighted = [(1.0, task), (1.0, kl_mutual), (1.0, feat_mutual)]
    if lambda_c > 0.0:
        if peer_kl is None or peer_feat is None:
            raise ContractError("peer distillation terms are required when lambda_c > 0")
        weighted += [(lambda_c, peer_kl), (lambda_c, peer_feat)]
    if prox is not None:
        weighted.append((1.0, prox))
    return combine(weighted)
