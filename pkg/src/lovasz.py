"""
Lovasz hinge over the Jaccard loss, on [0,1] probabilities.

Every loss returns `(loss, grad)` where `grad` is the subgradient picked by the
error ordering: errors sorted descending, ties broken by ascending index.
"""
from __future__ import annotations
from typing import Literal

import numpy as np

from core import ValidationError, VOID_CLASS

BRUTEFORCE_MAX_N = 12

def _as_binary(t, name='t') -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 1:
        raise ValidationError(f"{name} must be a vector, got shape {t.shape}")
    if t.size and not np.all((t == 0) | (t == 1)):
        raise ValidationError(f"{name} must only contain 0 and 1")
    return t.astype(bool)

def _as_probabilities(p, tol=1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValidationError(f"p must be a vector, got shape {p.shape}")
    if p.size and (np.min(p) < -tol or np.max(p) > 1 + tol or not np.all(np.isfinite(p))):
        raise ValidationError("p must lie in [0, 1]")
    return np.clip(p, 0.0, 1.0)

def jaccard(y, t) -> float:
    """ |y & t| / |y | t|, 1 when both are empty """
    y = _as_binary(y, 'y')
    t = _as_binary(t)
    if y.shape != t.shape:
        raise ValidationError(f"length mismatch: {y.size} vs {t.size}")
    union = np.count_nonzero(y | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(y & t) / union

def lovasz_increments(t_sorted) -> np.ndarray:
    """
    IoU decrease when the i-th pixel (in error order) is added to the mispredicted set.
    Entry i is J(S_i) - J(S_{i-1}) for the Jaccard loss J = 1 - IoU, J(empty) = 0.
    """
    t = _as_binary(t_sorted, 't_sorted').astype(np.float64)
    if t.size == 0:
        return t
    gts = t.sum()
    intersection = gts - np.cumsum(t)
    union = gts + np.cumsum(1.0 - t)
    losses = 1.0 - intersection / union
    losses[1:] = losses[1:] - losses[:-1]
    return losses

def errors(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.where(t, 1.0 - p, p)

def error_order(xi: np.ndarray) -> np.ndarray:
    """ descending errors, ascending index on ties """
    return np.argsort(-xi, kind='stable')

def lovasz_binary(p, t) -> tuple[float, np.ndarray]:
    p = _as_probabilities(p)
    t = _as_binary(t)
    if p.shape != t.shape:
        raise ValidationError(f"length mismatch: {p.size} vs {t.size}")
    grad = np.zeros_like(p)
    if p.size == 0:
        return 0.0, grad
    xi = errors(p, t)
    perm = error_order(xi)
    delta = lovasz_increments(t[perm])
    loss = float(np.dot(xi[perm], delta))
    grad[perm] = np.where(t[perm], -delta, delta)
    return loss, grad

def lovasz_softmax(probs, labels, num_classes: int | None = None,
                   classes: Literal['all', 'present'] = 'all',
                   void: int = VOID_CLASS) -> tuple[float, np.ndarray]:
    """
    Mean of one-vs-rest binary losses.
      probs: (N, C) class probabilities
      labels: (N,) class ids, `void` pixels are dropped from every class problem
      classes: 'all' averages over every catalog class (absent ones penalize false
        positives), 'present' only over classes present in the labels
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValidationError(f"probs {probs.shape} do not match {labels.size} labels")
    num_classes = probs.shape[1] if num_classes is None else num_classes
    grad = np.zeros_like(probs)
    valid = labels != void
    if not np.any(valid):
        return 0.0, grad
    rows = np.flatnonzero(valid)
    kept = labels[rows]
    if classes == 'all':
        chosen = list(range(num_classes))
    elif classes == 'present':
        chosen = [c for c in range(num_classes) if np.any(kept == c)]
    else:
        raise ValidationError(f"unknown class averaging '{classes}'")
    if not chosen:
        return 0.0, grad
    total = 0.0
    for c in chosen:
        loss, g = lovasz_binary(probs[rows, c], kept == c)
        total += loss
        grad[rows, c] = g
    scale = 1.0 / len(chosen)
    return total * scale, grad * scale

def lovasz_bruteforce(p, t) -> float:
    """
    Lovasz extension of the Jaccard loss evaluated from its level sets:
    integral over thresholds of J({i : xi_i >= theta}), each J computed by counting.
    Test oracle for `lovasz_binary`, independent of the increment formula.
    """
    p = _as_probabilities(p)
    t = _as_binary(t)
    if p.shape != t.shape:
        raise ValidationError(f"length mismatch: {p.size} vs {t.size}")
    if p.size > BRUTEFORCE_MAX_N:
        raise ValidationError(f"brute force is limited to N <= {BRUTEFORCE_MAX_N}, got {p.size}")
    xi = errors(p, t)
    levels = sorted(set(xi.tolist()), reverse=True) + [0.0]
    total = 0.0
    for upper, lower in zip(levels[:-1], levels[1:]):
        mispredicted = xi >= upper
        y = t ^ mispredicted
        total += (upper - lower) * (1.0 - jaccard(y, t))
    return total
