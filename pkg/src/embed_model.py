"""
Hierarchical embedding kernels and losses.

Per pixel i the model holds an embedding e_i on the unit sphere, an embedding
bandwidth sigma_i, a spatial bandwidth sigma_spatial_i and a seed score s_i.
Per class k it holds a persistent mean mu_hat_k and a bandwidth sigma_k.

Every loss returns `(loss, grads)` where `grads` maps parameter names
('e', 'sigma', 'sigma_spatial', 'seed', 'mu_hat', 'sigma_sem') to arrays shaped like
the parameter. Stop-gradient targets are held constant, so a term only reports
gradients for the parameters it actually trains.
"""
from __future__ import annotations
import functools
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from console import log
from core import (
    ClassCatalog, FieldGrid, Instance, InstanceMap, LabelMap, ValidationError,
    VOID_CLASS, extract_instances, read_grid, write_grid,
)
from lovasz import lovasz_binary, lovasz_softmax

GradSet = dict[str, np.ndarray]

LossVariant = Literal['hierarchical', 'split', 'ae', 'cross_entropy']
LOSS_VARIANTS: tuple[str, ...] = ('hierarchical', 'split', 'ae', 'cross_entropy')


@dataclass(frozen=True)
class PixelFields:
    e: np.ndarray
    """ (H, W, D) unit embeddings """
    sigma: np.ndarray
    """ (H, W) embedding bandwidth """
    sigma_spatial: np.ndarray
    """ (H, W) spatial bandwidth, in normalized image coordinates """
    seed: np.ndarray
    """ (H, W) seed score in [0, 1] """

    @property
    def height(self) -> int: return self.e.shape[0]
    @property
    def width(self) -> int: return self.e.shape[1]
    @property
    def dim(self) -> int: return self.e.shape[2]
    @property
    def num_pixels(self) -> int: return self.e.shape[0] * self.e.shape[1]

    def flat_e(self) -> np.ndarray:
        return self.e.reshape(-1, self.dim)

    def validate(self, tol=1e-6, blocks: int = 1) -> list[str]:
        """ `blocks` equal channel blocks must each be unit vectors (2 for the split layout) """
        problems = []
        shape = self.e.shape[:2]
        for name in ('sigma', 'sigma_spatial', 'seed'):
            if getattr(self, name).shape != shape:
                problems.append(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.dim % blocks:
            problems.append(f"dimension {self.dim} does not split into {blocks} blocks")
        if problems:
            return problems
        width = self.dim // blocks
        for b in range(blocks):
            problems += FieldGrid(self.e[:, :, b * width:(b + 1) * width]).validate(unit_norm=True, tol=tol)
        if not (np.all(self.sigma > 0) and np.all(self.sigma_spatial > 0)):
            problems.append("bandwidths must be strictly positive")
        if not np.all((self.seed >= 0) & (self.seed <= 1)):
            problems.append("seeds must lie in [0, 1]")
        return problems

    def to_grid(self) -> np.ndarray:
        """ (H, W, D+3): embedding channels, sigma, sigma_spatial, seed """
        return np.concatenate([self.e, self.sigma[..., None], self.sigma_spatial[..., None], self.seed[..., None]], axis=2)

    @staticmethod
    def from_grid(grid: np.ndarray) -> PixelFields:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3 or grid.shape[2] < 4:
            raise ValidationError(f"fields grid needs at least 4 channels, got shape {grid.shape}")
        return PixelFields(e=grid[:, :, :-3].copy(), sigma=grid[:, :, -3].copy(),
                           sigma_spatial=grid[:, :, -2].copy(), seed=grid[:, :, -1].copy())

@dataclass(frozen=True)
class SemanticState:
    mu_hat: np.ndarray
    """ (C, D) persistent class means, unit rows """
    sigma_sem: np.ndarray
    """ (C,) class bandwidths """

    @property
    def num_classes(self) -> int: return self.mu_hat.shape[0]
    @property
    def dim(self) -> int: return self.mu_hat.shape[1]

    def validate(self, tol=1e-6) -> list[str]:
        problems = []
        if self.sigma_sem.shape != (self.num_classes,):
            problems.append(f"sigma_sem has shape {self.sigma_sem.shape}, expected ({self.num_classes},)")
        norms = np.linalg.norm(self.mu_hat, axis=1)
        if norms.size and np.max(np.abs(norms - 1)) > tol:
            problems.append("class means must be unit vectors")
        if not np.all(self.sigma_sem > 0):
            problems.append("class bandwidths must be strictly positive")
        return problems

@dataclass
class LossConfig:
    variant: str = 'hierarchical'
    """ hierarchical | split | ae | cross_entropy """
    gamma: float = 10.0
    classes: str = 'all'
    """ lovasz softmax class averaging: all | present """
    vq_style: bool = True
    """ persistent means regressed by seg_mean (stop-gradient); off = learned through the semantic loss """
    support_margin: float | None = None
    """ pixels around each instance's bounding box where phi is evaluated; None = whole image """
    delta_pull: float = 0.1
    delta_push: float = 1.5
    delta_pull_sem: float = 0.5
    delta_push_sem: float = 3.0

    def validate(self) -> list[str]:
        problems = []
        if self.variant not in LOSS_VARIANTS:
            problems.append(f"unknown loss variant '{self.variant}', expected one of {LOSS_VARIANTS}")
        if self.classes not in ('all', 'present'):
            problems.append(f"classes must be 'all' or 'present', got '{self.classes}'")
        if self.gamma < 0:
            problems.append("gamma must be non-negative")
        if min(self.delta_pull, self.delta_push, self.delta_pull_sem, self.delta_push_sem) < 0:
            problems.append("hinge margins must be non-negative")
        if self.support_margin is not None and self.support_margin < 0:
            problems.append("support_margin must be non-negative")
        return problems

@dataclass
class LossReport:
    seg: float = 0.0
    seg_mean: float = 0.0
    ins: float = 0.0
    ins_var: float = 0.0
    seed: float = 0.0
    total: float = 0.0
    counts: dict[str, int] = field(default_factory=dict)

    TERMS = ('seg', 'seg_mean', 'ins', 'ins_var', 'seed')

    def as_row(self) -> list[float]:
        return [self.seg, self.seg_mean, self.ins, self.ins_var, self.seed, self.total]

@dataclass
class Gradients:
    e: np.ndarray
    sigma: np.ndarray
    sigma_spatial: np.ndarray
    seed: np.ndarray
    mu_hat: np.ndarray
    sigma_sem: np.ndarray

    @staticmethod
    def zeros(fields: PixelFields, state: SemanticState) -> Gradients:
        return Gradients(
            e=np.zeros_like(fields.e), sigma=np.zeros_like(fields.sigma),
            sigma_spatial=np.zeros_like(fields.sigma_spatial), seed=np.zeros_like(fields.seed),
            mu_hat=np.zeros_like(state.mu_hat), sigma_sem=np.zeros_like(state.sigma_sem))


# -------------------------------------------------------------
#  kernels

@functools.lru_cache(maxsize=16)
def pixel_positions(height: int, width: int) -> np.ndarray:
    """ (H*W, 2) row-major (x, y) pixel centers normalized to [0, 1] """
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    rho = np.stack([(cols.reshape(-1) + 0.5) / width, (rows.reshape(-1) + 0.5) / height], axis=1)
    rho.flags.writeable = False
    return rho

def _check_bandwidth(value, name='sigma'):
    if np.any(np.asarray(value) <= 0):
        raise ValidationError(f"{name} must be positive")

def p_kernel(e, mu, sigma) -> np.ndarray | float:
    """ exp(-(1 - e.mu) / (2 sigma^2)), broadcast over leading axes of e """
    _check_bandwidth(sigma)
    d = 1.0 - np.asarray(e, dtype=np.float64) @ np.asarray(mu, dtype=np.float64)
    return np.exp(-d / (2.0 * np.square(sigma)))

def spatial_kernel(rho, rho_center, sigma_spatial) -> np.ndarray | float:
    _check_bandwidth(sigma_spatial, 'sigma_spatial')
    r = np.sum(np.square(np.asarray(rho, dtype=np.float64) - rho_center), axis=-1)
    return np.exp(-r / (2.0 * np.square(sigma_spatial)))

def phi_kernel(e, rho, mu, rho_center, sigma, sigma_spatial) -> np.ndarray | float:
    return p_kernel(e, mu, sigma) * spatial_kernel(rho, rho_center, sigma_spatial)

def semantic_logits(e: np.ndarray, state: SemanticState) -> tuple[np.ndarray, np.ndarray]:
    """ returns (logits, cosine distances), both (..., C) """
    d = 1.0 - np.asarray(e, dtype=np.float64) @ state.mu_hat.T
    return -d / (2.0 * np.square(state.sigma_sem)), d

def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / np.sum(weights, axis=-1, keepdims=True)

def psi_scores(e, state: SemanticState) -> np.ndarray:
    """ p_k(e) / sum_c p_c(e) over all classes; (D,) -> (C,), (N, D) -> (N, C) """
    _check_bandwidth(state.sigma_sem, 'sigma_sem')
    logits, _ = semantic_logits(e, state)
    return _softmax(logits)

def embedding_views(fields: PixelFields, state: SemanticState) -> tuple[slice, slice]:
    """
    Channel slices (semantic, instance) of the embedding. A state whose dimension is
    half the field dimension means a split space: semantics in the first half,
    instances in the second. Otherwise both views are the whole embedding.
    """
    if state.dim == fields.dim:
        return slice(None), slice(None)
    if 2 * state.dim == fields.dim:
        return slice(0, state.dim), slice(state.dim, fields.dim)
    raise ValidationError(f"state dimension {state.dim} does not fit field dimension {fields.dim}")

def with_embedding(fields: PixelFields, channels: slice) -> PixelFields:
    if channels == slice(None):
        return fields
    return replace(fields, e=fields.e[:, :, channels])


# -------------------------------------------------------------
#  instance kernel pieces

@dataclass
class InstanceKernel:
    mu: np.ndarray
    center: np.ndarray
    sigma: float
    sigma_spatial: float
    support: np.ndarray
    """ flat pixel indices where phi is evaluated """
    d: np.ndarray
    r: np.ndarray
    phi: np.ndarray

def instance_support(instance: Instance, height: int, width: int,
                     valid: np.ndarray | None = None, margin: float | None = None) -> np.ndarray:
    """ non-void pixels, optionally limited to the instance bounding box grown by `margin` pixels """
    if margin is None:
        idx = np.arange(height * width)
    else:
        rows, cols = np.divmod(instance.pixels, width)
        m = int(np.ceil(margin))
        r0, r1 = max(0, rows.min() - m), min(height, rows.max() + m + 1)
        c0, c1 = max(0, cols.min() - m), min(width, cols.max() + m + 1)
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing='ij')
        idx = (rr * width + cc).reshape(-1)
    if valid is not None:
        idx = idx[valid[idx]]
    return idx

def instance_kernel(fields: PixelFields, instance: Instance, support: np.ndarray | None = None,
                    rho: np.ndarray | None = None) -> InstanceKernel:
    e = fields.flat_e()
    rho = pixel_positions(fields.height, fields.width) if rho is None else rho
    members = instance.pixels
    support = np.arange(fields.num_pixels) if support is None else support
    mu = e[members].mean(axis=0)
    center = rho[members].mean(axis=0)
    sigma = float(fields.sigma.reshape(-1)[members].mean())
    sigma_spatial = float(fields.sigma_spatial.reshape(-1)[members].mean())
    d = 1.0 - e[support] @ mu
    r = np.sum(np.square(rho[support] - center), axis=1)
    phi = np.exp(-d / (2.0 * sigma ** 2) - r / (2.0 * sigma_spatial ** 2))
    return InstanceKernel(mu, center, sigma, sigma_spatial, support, d, r, phi)

def instance_scores(fields: PixelFields, instance: Instance, support: np.ndarray | None = None) -> np.ndarray:
    """ phi_l over `support` (default: every pixel) """
    return instance_kernel(fields, instance, support).phi

def _as_instances(labels: LabelMap | None, instances) -> list[Instance]:
    if isinstance(instances, InstanceMap):
        if labels is None:
            raise ValidationError("a label map is needed to extract instances")
        return extract_instances(labels, instances)
    return list(instances)


# -------------------------------------------------------------
#  losses

def instance_loss(fields: PixelFields, instances: list[Instance], labels: LabelMap | None = None,
                  support_margin: float | None = None) -> tuple[float, GradSet]:
    """ mean over instances of the binary lovasz loss of phi_l against membership in I_l """
    n = fields.num_pixels
    grad_e = np.zeros((n, fields.dim))
    grad_sigma = np.zeros(n)
    grad_spatial = np.zeros(n)
    shape = fields.sigma.shape
    if not instances:
        return 0.0, {'e': grad_e.reshape(fields.e.shape), 'sigma': grad_sigma.reshape(shape),
                     'sigma_spatial': grad_spatial.reshape(shape)}
    valid = None if labels is None else labels.data.reshape(-1) != VOID_CLASS
    e = fields.flat_e()
    total = 0.0
    for inst in instances:
        support = instance_support(inst, fields.height, fields.width, valid, support_margin)
        k = instance_kernel(fields, inst, support)
        target = np.isin(support, inst.pixels, assume_unique=True)
        loss, g_phi = lovasz_binary(k.phi, target)
        total += loss
        w = g_phi * k.phi
        s2 = 2.0 * k.sigma ** 2
        m = inst.size
        grad_e[support] += np.outer(w, k.mu / s2)
        grad_mu = (w @ e[support]) / s2
        grad_e[inst.pixels] += grad_mu / m
        grad_sigma[inst.pixels] += float(w @ k.d) / k.sigma ** 3 / m
        grad_spatial[inst.pixels] += float(w @ k.r) / k.sigma_spatial ** 3 / m
    scale = 1.0 / len(instances)
    return total * scale, {
        'e': (grad_e * scale).reshape(fields.e.shape),
        'sigma': (grad_sigma * scale).reshape(shape),
        'sigma_spatial': (grad_spatial * scale).reshape(shape),
    }

def _semantic_rows(labels: LabelMap, state: SemanticState) -> tuple[np.ndarray, np.ndarray]:
    flat = labels.data.reshape(-1)
    rows = np.flatnonzero(flat != VOID_CLASS)
    kept = flat[rows]
    if kept.size and (kept.min() < 0 or kept.max() >= state.num_classes):
        raise ValidationError(f"labels reference classes outside the {state.num_classes} class means")
    return rows, kept

def _backprop_logits(g_logits: np.ndarray, e_rows: np.ndarray, d: np.ndarray, state: SemanticState,
                     rows: np.ndarray, fields: PixelFields, train_means: bool) -> GradSet:
    s2 = 2.0 * np.square(state.sigma_sem)
    scaled = g_logits / s2
    grad_e = np.zeros((fields.num_pixels, fields.dim))
    grad_e[rows] = scaled @ state.mu_hat
    grads = {
        'e': grad_e.reshape(fields.e.shape),
        'sigma_sem': np.sum(g_logits * d, axis=0) / state.sigma_sem ** 3,
    }
    if train_means:
        grads['mu_hat'] = scaled.T @ e_rows
    return grads

def semantic_loss(fields: PixelFields, labels: LabelMap, state: SemanticState,
                  classes: str = 'all', train_means: bool = False) -> tuple[float, GradSet]:
    """ lovasz softmax over psi of every non-void pixel """
    rows, kept = _semantic_rows(labels, state)
    if rows.size == 0:
        return 0.0, {'e': np.zeros_like(fields.e), 'sigma_sem': np.zeros_like(state.sigma_sem)}
    e_rows = fields.flat_e()[rows]
    logits, d = semantic_logits(e_rows, state)
    psi = _softmax(logits)
    loss, g_psi = lovasz_softmax(psi, kept, state.num_classes, classes)
    g_logits = psi * (g_psi - np.sum(g_psi * psi, axis=1, keepdims=True))
    return loss, _backprop_logits(g_logits, e_rows, d, state, rows, fields, train_means)

def semantic_cross_entropy_loss(fields: PixelFields, labels: LabelMap, state: SemanticState,
                                train_means: bool = False) -> tuple[float, GradSet]:
    """ mean softmax cross-entropy of psi against the labels """
    rows, kept = _semantic_rows(labels, state)
    if rows.size == 0:
        return 0.0, {'e': np.zeros_like(fields.e), 'sigma_sem': np.zeros_like(state.sigma_sem)}
    e_rows = fields.flat_e()[rows]
    logits, d = semantic_logits(e_rows, state)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_psi = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    n = rows.size
    loss = -float(np.mean(log_psi[np.arange(n), kept]))
    g_logits = np.exp(log_psi)
    g_logits[np.arange(n), kept] -= 1.0
    g_logits /= n
    return loss, _backprop_logits(g_logits, e_rows, d, state, rows, fields, train_means)

def seed_loss(fields: PixelFields, instances: list[Instance], labels: LabelMap,
              catalog: ClassCatalog) -> tuple[float, GradSet]:
    """
    Squared error of the seed map to sg[phi_l] on instance pixels and to 0 on stuff
    pixels, averaged over those pixels. Crowd thing pixels and void are left out.
    """
    s = fields.seed.reshape(-1)
    target = np.zeros_like(s)
    included = catalog.stuff_pixels(labels.data.reshape(-1))
    for inst in instances:
        target[inst.pixels] = instance_scores(fields, inst, inst.pixels)
        included[inst.pixels] = True
    n = int(np.count_nonzero(included))
    if n == 0:
        return 0.0, {'seed': np.zeros_like(fields.seed)}
    residual = np.where(included, s - target, 0.0)
    loss = float(np.sum(np.square(residual))) / n
    return loss, {'seed': (2.0 * residual / n).reshape(fields.seed.shape)}

def ins_var_loss(fields: PixelFields, instances: list[Instance], gamma: float = 10.0) -> tuple[float, GradSet]:
    """ gamma * squared deviation of both bandwidth fields from sg[instance mean], averaged over instance pixels """
    sigma = fields.sigma.reshape(-1)
    spatial = fields.sigma_spatial.reshape(-1)
    grad_sigma = np.zeros_like(sigma)
    grad_spatial = np.zeros_like(spatial)
    n = sum(inst.size for inst in instances)
    if n == 0:
        return 0.0, {'sigma': grad_sigma.reshape(fields.sigma.shape),
                     'sigma_spatial': grad_spatial.reshape(fields.sigma.shape)}
    total = 0.0
    for inst in instances:
        dev = sigma[inst.pixels] - sigma[inst.pixels].mean()
        dev_spatial = spatial[inst.pixels] - spatial[inst.pixels].mean()
        total += float(dev @ dev + dev_spatial @ dev_spatial)
        grad_sigma[inst.pixels] = 2.0 * gamma * dev / n
        grad_spatial[inst.pixels] = 2.0 * gamma * dev_spatial / n
    return gamma * total / n, {'sigma': grad_sigma.reshape(fields.sigma.shape),
                               'sigma_spatial': grad_spatial.reshape(fields.sigma.shape)}

def seg_mean_loss(fields: PixelFields, labels: LabelMap, state: SemanticState) -> tuple[float, GradSet]:
    """ squared distance of each present class mean to sg[batch mean], averaged over present classes """
    rows, kept = _semantic_rows(labels, state)
    grad = np.zeros_like(state.mu_hat)
    present = np.unique(kept)
    if present.size == 0:
        return 0.0, {'mu_hat': grad}
    e = fields.flat_e()[rows]
    total = 0.0
    for k in present.tolist():
        diff = state.mu_hat[k] - e[kept == k].mean(axis=0)
        total += float(diff @ diff)
        grad[k] = 2.0 * diff
    return total / present.size, {'mu_hat': grad / present.size}

def ae_baseline_loss(fields: PixelFields, instances: list[Instance],
                     delta_pull: float, delta_push: float) -> tuple[float, GradSet]:
    """ associative embedding pull + push terms with L1 distances and squared hinges """
    if delta_pull < 0 or delta_push < 0:
        raise ValidationError("hinge margins must be non-negative")
    e = fields.flat_e()
    grad_e = np.zeros_like(e)
    count = len(instances)
    if count == 0:
        return 0.0, {'e': grad_e.reshape(fields.e.shape)}
    means = np.stack([e[inst.pixels].mean(axis=0) for inst in instances])
    grad_means = np.zeros_like(means)
    pull = 0.0
    for l, inst in enumerate(instances):
        m = inst.size
        v = means[l] - e[inst.pixels]
        hinge = np.maximum(np.sum(np.abs(v), axis=1) - delta_pull, 0.0)
        pull += float(hinge @ hinge) / m
        g_v = (2.0 * hinge / m)[:, None] * np.sign(v) / count
        grad_e[inst.pixels] -= g_v
        grad_means[l] += g_v.sum(axis=0)
    pull /= count
    push = 0.0
    if count > 1:
        pairs = count * (count - 1)
        for l in range(count):
            u = means[l] - means
            hinge = np.maximum(delta_push - np.sum(np.abs(u), axis=1), 0.0)
            hinge[l] = 0.0
            push += float(hinge @ hinge)
            g_u = (-2.0 * hinge / pairs)[:, None] * np.sign(u)
            grad_means[l] += g_u.sum(axis=0)
            grad_means -= g_u
        push /= pairs
    for l, inst in enumerate(instances):
        grad_e[inst.pixels] += grad_means[l] / inst.size
    return pull + push, {'e': grad_e.reshape(fields.e.shape)}

def class_groups(labels: LabelMap) -> list[Instance]:
    """ every present class as one pixel group, for the semantic AE term """
    flat = labels.data.reshape(-1)
    return [Instance(int(k) + 1, int(k), np.flatnonzero(flat == k))
            for k in np.unique(flat).tolist() if k != VOID_CLASS]


def _accumulate(target: np.ndarray, grad: np.ndarray | None, channels: slice | None = None):
    if grad is None:
        return
    if channels is None:
        target += grad
    else:
        target[..., channels] += grad

def total_loss(fields: PixelFields, labels: LabelMap, instances, state: SemanticState,
               catalog: ClassCatalog, config: LossConfig | None = None) -> tuple[LossReport, Gradients]:
    """ seg + seg_mean + ins + ins_var + seed, each averaged over its own support """
    config = config or LossConfig()
    problems = config.validate()
    if problems:
        raise ValidationError('; '.join(problems))
    if labels.shape != fields.e.shape[:2]:
        raise ValidationError(f"labels {labels.shape} do not match fields {fields.e.shape[:2]}")
    instances = _as_instances(labels, instances)
    sem_channels, ins_channels = embedding_views(fields, state)
    sem_fields = with_embedding(fields, sem_channels)
    ins_fields = with_embedding(fields, ins_channels)
    train_means = not config.vq_style
    grads = Gradients.zeros(fields, state)
    report = LossReport()

    if config.variant == 'ae':
        report.seg, g = ae_baseline_loss(sem_fields, class_groups(labels), config.delta_pull_sem, config.delta_push_sem)
    elif config.variant == 'cross_entropy':
        report.seg, g = semantic_cross_entropy_loss(sem_fields, labels, state, train_means)
    else:
        report.seg, g = semantic_loss(sem_fields, labels, state, config.classes, train_means)
    _accumulate(grads.e, g.get('e'), sem_channels)
    _accumulate(grads.sigma_sem, g.get('sigma_sem'))
    _accumulate(grads.mu_hat, g.get('mu_hat'))

    if config.vq_style:
        report.seg_mean, g = seg_mean_loss(sem_fields, labels, state)
        _accumulate(grads.mu_hat, g['mu_hat'])

    if config.variant == 'ae':
        report.ins, g = ae_baseline_loss(ins_fields, instances, config.delta_pull, config.delta_push)
    else:
        report.ins, g = instance_loss(ins_fields, instances, labels, config.support_margin)
    _accumulate(grads.e, g['e'], ins_channels)
    _accumulate(grads.sigma, g.get('sigma'))
    _accumulate(grads.sigma_spatial, g.get('sigma_spatial'))

    report.ins_var, g = ins_var_loss(fields, instances, config.gamma)
    _accumulate(grads.sigma, g['sigma'])
    _accumulate(grads.sigma_spatial, g['sigma_spatial'])

    report.seed, g = seed_loss(ins_fields, instances, labels, catalog)
    _accumulate(grads.seed, g['seed'])

    report.total = report.seg + report.seg_mean + report.ins + report.ins_var + report.seed
    flat = labels.data.reshape(-1)
    instance_pixels = sum(inst.size for inst in instances)
    report.counts = {
        'seg_pixels': int(np.count_nonzero(flat != VOID_CLASS)),
        'seg_mean_classes': int(len(set(np.unique(flat).tolist()) - {VOID_CLASS})),
        'instances': len(instances),
        'ins_var_pixels': instance_pixels,
        'seed_pixels': instance_pixels + int(np.count_nonzero(catalog.stuff_pixels(flat))),
    }
    log.debug(f"loss total={report.total:.6f} seg={report.seg:.6f} seg_mean={report.seg_mean:.6f} "
              f"ins={report.ins:.6f} ins_var={report.ins_var:.6f} seed={report.seed:.6f}")
    return report, grads


# -------------------------------------------------------------
#  HLE1 files

def save_fields(path: str, fields: PixelFields):
    write_grid(path, fields.to_grid())

def load_fields(path: str) -> PixelFields:
    return PixelFields.from_grid(read_grid(path))

def save_state(path: str, state: SemanticState):
    """ |C| x 1 x D means at `path`, |C| x 1 x 1 bandwidths at `path`.sigma """
    write_grid(path, state.mu_hat[:, None, :])
    write_grid(f"{path}.sigma", state.sigma_sem[:, None, None])

def load_state(path: str) -> SemanticState:
    mu = read_grid(path).astype(np.float64)
    sigma = read_grid(f"{path}.sigma").astype(np.float64)
    if mu.shape[1] != 1 or sigma.shape != (mu.shape[0], 1, 1):
        raise ValidationError(f"{path}: state grids must be |C| x 1 x D and |C| x 1 x 1, got {mu.shape} and {sigma.shape}")
    mu = mu[:, 0, :]
    # float32 storage; re-project so the unit-norm invariant holds at float64 precision
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    return SemanticState(mu, sigma.reshape(-1))
