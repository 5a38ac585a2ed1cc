"""
Direct optimization of per-pixel fields against one scene's ground truth.

Free parameters are unconstrained: embeddings (renormalized to the sphere after
every step), log bandwidths, seed logits, class means (re-projected to the
sphere) and log class bandwidths. Updates use Adam.
"""
from __future__ import annotations
import math
import concurrent.futures
from dataclasses import dataclass, field, replace

import numpy as np

from console import log
from core import (
    ClassCatalog, HleError, InstanceMap, LabelMap, PanopticMap, ValidationError, VOID_CLASS,
    extract_instances,
)
from decoder import DecoderConfig, decode
from embed_model import LossConfig, LossReport, PixelFields, SemanticState, pixel_positions, total_loss
from metrics import PqResult, panoptic_quality
from thomson import ThomsonConfig, random_unit_vectors, thomson_init

LOG_BANDWIDTH_MIN = math.log(1e-3)
LOG_BANDWIDTH_MAX = math.log(10.0)
INIT_METHODS = ('thomson', 'random')

Scene = tuple[LabelMap, InstanceMap]

class TrainingDiverged(HleError):
    def __init__(self, step: int, initial: float, current: float):
        super().__init__(f"total loss {current:.6g} at step {step} exceeds the divergence bound "
                         f"(initial {initial:.6g})")
        self.step = step
        self.initial = initial
        self.current = current

@dataclass
class TrainConfig:
    steps: int = 2000
    step_size: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init: str = 'thomson'
    """ class mean initialization: thomson | random """
    embedding_dim: int = 12
    sigma_init: float = 0.5
    sigma_spatial_init: float = 0.25
    sigma_sem_init: float = 0.5
    seed_init: float = 0.5
    rng_seed: int = 0
    divergence_factor: float = 10.0
    log_every: int = 200
    thomson_steps: int = 2000
    loss: LossConfig = field(default_factory=LossConfig)

    @property
    def split(self) -> bool:
        return self.loss.variant == 'split'

    def validate(self) -> list[str]:
        problems = []
        if self.steps < 0:
            problems.append("steps must be non-negative")
        if self.step_size <= 0:
            problems.append("step_size must be positive")
        if self.init not in INIT_METHODS:
            problems.append(f"init must be one of {INIT_METHODS}, got '{self.init}'")
        if self.embedding_dim < 2:
            problems.append("embedding_dim must be >= 2")
        if self.split and (self.embedding_dim % 2 or self.embedding_dim < 4):
            problems.append("the split variant needs an even embedding_dim >= 4")
        for name in ('sigma_init', 'sigma_spatial_init', 'sigma_sem_init'):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if not 0 < self.seed_init < 1:
            problems.append("seed_init must lie in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("Adam betas must lie in [0, 1)")
        return problems + self.loss.validate()

@dataclass
class TrainResult:
    fields: PixelFields
    state: SemanticState
    curve: list[LossReport]


# -------------------------------------------------------------
#  parametrization

def _normalize_blocks(e: np.ndarray, blocks: int) -> np.ndarray:
    width = e.shape[-1] // blocks
    out = np.empty_like(e)
    for b in range(blocks):
        part = e[..., b * width:(b + 1) * width]
        out[..., b * width:(b + 1) * width] = part / np.maximum(np.linalg.norm(part, axis=-1, keepdims=True), 1e-12)
    return out

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))

def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))

@dataclass
class _Params:
    values: dict[str, np.ndarray]
    blocks: int

    @staticmethod
    def from_model(fields: PixelFields, state: SemanticState, blocks: int) -> _Params:
        clip = lambda x: np.clip(np.log(x), LOG_BANDWIDTH_MIN, LOG_BANDWIDTH_MAX)
        return _Params({
            'e': np.array(fields.e, dtype=np.float64),
            'log_sigma': clip(fields.sigma),
            'log_sigma_spatial': clip(fields.sigma_spatial),
            'seed_logit': _logit(fields.seed),
            'mu_hat': np.array(state.mu_hat, dtype=np.float64),
            'log_sigma_sem': clip(state.sigma_sem),
        }, blocks)

    def fields(self) -> PixelFields:
        v = self.values
        return PixelFields(e=v['e'], sigma=np.exp(v['log_sigma']), sigma_spatial=np.exp(v['log_sigma_spatial']),
                           seed=_sigmoid(v['seed_logit']))

    def state(self) -> SemanticState:
        return SemanticState(self.values['mu_hat'], np.exp(self.values['log_sigma_sem']))

    def project(self):
        v = self.values
        v['e'] = _normalize_blocks(v['e'], self.blocks)
        v['mu_hat'] = _normalize_blocks(v['mu_hat'], 1)
        for name in ('log_sigma', 'log_sigma_spatial', 'log_sigma_sem'):
            np.clip(v[name], LOG_BANDWIDTH_MIN, LOG_BANDWIDTH_MAX, out=v[name])

    def chain(self, fields: PixelFields, state: SemanticState, grads) -> dict[str, np.ndarray]:
        """ gradients of the positive-valued model back to the free parameters """
        return {
            'e': grads.e,
            'log_sigma': grads.sigma * fields.sigma,
            'log_sigma_spatial': grads.sigma_spatial * fields.sigma_spatial,
            'seed_logit': grads.seed * fields.seed * (1.0 - fields.seed),
            'mu_hat': grads.mu_hat,
            'log_sigma_sem': grads.sigma_sem * state.sigma_sem,
        }

class Adam:
    """ first/second moment estimates with bias correction, one slot per named parameter """
    def __init__(self, step_size: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] = params[name] - self.step_size * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -------------------------------------------------------------
#  training

def init_fields(scene: Scene, catalog: ClassCatalog, config: TrainConfig | None = None) -> tuple[PixelFields, SemanticState]:
    """ class means from the Thomson problem (or random), random unit embeddings, constant bandwidths and seeds """
    config = config or TrainConfig()
    problems = config.validate()
    if problems:
        raise ValidationError('; '.join(problems))
    labels, _ = scene
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    state_dim = config.embedding_dim // 2 if config.split else config.embedding_dim
    blocks = 2 if config.split else 1
    if config.init == 'thomson':
        mu_hat = thomson_init(ThomsonConfig(k=catalog.num_classes, d=state_dim, steps=config.thomson_steps,
                                            rng_seed=config.rng_seed, log_every=0))
    else:
        mu_hat = random_unit_vectors(catalog.num_classes, state_dim, rng)
    h, w = labels.shape
    e = _normalize_blocks(rng.standard_normal((h, w, config.embedding_dim)), blocks)
    fields = PixelFields(e=e, sigma=np.full((h, w), config.sigma_init),
                         sigma_spatial=np.full((h, w), config.sigma_spatial_init),
                         seed=np.full((h, w), config.seed_init))
    state = SemanticState(mu_hat, np.full(catalog.num_classes, config.sigma_sem_init))
    return fields, state

def train(scene: Scene, catalog: ClassCatalog, config: TrainConfig | None = None,
          init: tuple[PixelFields, SemanticState] | None = None) -> TrainResult:
    config = config or TrainConfig()
    problems = config.validate()
    if problems:
        raise ValidationError('; '.join(problems))
    labels, instance_map = scene
    fields, state = init or init_fields(scene, catalog, config)
    if config.steps == 0:
        return TrainResult(fields, state, [])
    instances = extract_instances(labels, instance_map)
    params = _Params.from_model(fields, state, 2 if config.split else 1)
    params.project()
    adam = Adam(config.step_size, config.beta1, config.beta2, config.adam_eps)
    curve: list[LossReport] = []
    for step in range(config.steps):
        fields, state = params.fields(), params.state()
        report, grads = total_loss(fields, labels, instances, state, catalog, config.loss)
        curve.append(report)
        initial = curve[0].total
        if not np.isfinite(report.total) or report.total > config.divergence_factor * max(initial, 1e-12):
            raise TrainingDiverged(step, initial, report.total)
        adam.step(params.values, params.chain(fields, state, grads))
        params.project()
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info(f"step {step + 1}/{config.steps}: total {report.total:.5f} (seg {report.seg:.4f}, "
                     f"ins {report.ins:.4f}, seed {report.seed:.4f})")
    return TrainResult(params.fields(), params.state(), curve)

def evaluate_toy(fields: PixelFields, state: SemanticState, scene: Scene, catalog: ClassCatalog,
                 config: DecoderConfig | None = None) -> PqResult:
    labels, instances = scene
    predicted = decode(fields, state, catalog, config)
    return panoptic_quality(predicted, PanopticMap.from_ground_truth(labels, instances, catalog), catalog)


# -------------------------------------------------------------
#  analytic fields

def _complement_basis(means: np.ndarray) -> np.ndarray:
    """ orthonormal rows spanning the orthogonal complement of the mean vectors """
    dim = means.shape[1]
    _, s, vt = np.linalg.svd(means, full_matrices=True)
    rank = int(np.sum(s > 1e-10))
    return vt[rank:dim]

def ideal_fields(labels: LabelMap, instances: InstanceMap, catalog: ClassCatalog,
                 state: SemanticState | None = None, dim: int = 12, offset: float = 0.5,
                 sigma: float = 0.05, sigma_spatial: float = 10.0, sigma_sem: float = 0.3,
                 rng_seed: int = 0) -> tuple[PixelFields, SemanticState]:
    """
    Fields that decode back to the ground truth: every stuff (and void or crowd) pixel
    sits on its class mean, every instance on normalize(mu_k + offset * u_l) with u_l
    orthogonal to all class means and distinct within the class, and each instance's
    seed peaks at 1 on the member pixel nearest its centroid.
    """
    if state is None:
        mu_hat = thomson_init(ThomsonConfig(k=catalog.num_classes, d=dim, rng_seed=rng_seed, log_every=0))
        state = SemanticState(mu_hat, np.full(catalog.num_classes, sigma_sem))
    dim = state.dim
    h, w = labels.shape
    flat = labels.data.reshape(-1)
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    basis = _complement_basis(state.mu_hat)
    e = state.mu_hat[np.where(flat == VOID_CLASS, 0, flat)].copy()
    seed = np.zeros(h * w)
    rho = pixel_positions(h, w)
    per_class: dict[int, int] = {}
    for inst in extract_instances(labels, instances):
        n = per_class.get(inst.class_id, 0)
        per_class[inst.class_id] = n + 1
        if n < len(basis):
            u = basis[n]
        else:
            u = rng.standard_normal(len(basis)) @ basis
            u /= np.linalg.norm(u)
        v = state.mu_hat[inst.class_id] + offset * u
        e[inst.pixels] = v / np.linalg.norm(v)
        r = np.sum(np.square(rho[inst.pixels] - rho[inst.pixels].mean(axis=0)), axis=1)
        spread = max(float(np.sqrt(r.max())), 1.0 / max(h, w))
        seed[inst.pixels] = np.exp(-(r - r.min()) / (2.0 * spread ** 2))
    fields = PixelFields(e=e.reshape(h, w, dim), sigma=np.full((h, w), sigma),
                         sigma_spatial=np.full((h, w), sigma_spatial), seed=seed.reshape(h, w))
    return fields, state


# -------------------------------------------------------------
#  hierarchy and ablation reports

@dataclass(frozen=True)
class InstanceHierarchy:
    instance_id: int
    class_id: int
    intra: float
    """ mean cosine distance between pixels of the instance """
    same_class: float | None
    """ to pixels of the same class outside the instance; None without any """
    other_class: float | None

    @property
    def ordered(self) -> bool:
        chain = [d for d in (self.intra, self.same_class, self.other_class) if d is not None]
        return all(a < b for a, b in zip(chain, chain[1:]))

def _intra_distance(e: np.ndarray) -> float:
    """ mean 1 - e_i.e_j over pairs i != j of unit rows; 0 for a single pixel """
    n = len(e)
    if n < 2:
        return 0.0
    total = e.sum(axis=0)
    return float(1.0 - (total @ total - n) / (n * (n - 1)))

def hierarchy_report(fields: PixelFields, labels: LabelMap, instances: InstanceMap) -> list[InstanceHierarchy]:
    """ mean pairwise cosine distances (self-pairs excluded), computed from set sums """
    e = fields.flat_e()
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    flat = labels.data.reshape(-1)
    known = flat != VOID_CLASS
    report = []
    for inst in extract_instances(labels, instances):
        mean = e[inst.pixels].mean(axis=0)
        inside = np.zeros(len(flat), dtype=bool)
        inside[inst.pixels] = True
        same = (flat == inst.class_id) & ~inside
        other = known & (flat != inst.class_id)
        report.append(InstanceHierarchy(
            inst.instance_id, inst.class_id, _intra_distance(e[inst.pixels]),
            float(1.0 - mean @ e[same].mean(axis=0)) if np.any(same) else None,
            float(1.0 - mean @ e[other].mean(axis=0)) if np.any(other) else None))
    return report

@dataclass(frozen=True)
class AblationRow:
    scene: str
    variant: str
    seed: int
    pq: float
    final_loss: float

def _ablation_run(name: str, scene: Scene, catalog: ClassCatalog, variant: str, seed: int,
                  config: TrainConfig, decoder_config: DecoderConfig) -> AblationRow:
    run_config = replace(config, rng_seed=seed, loss=replace(config.loss, variant=variant))
    result = train(scene, catalog, run_config)
    pq = evaluate_toy(result.fields, result.state, scene, catalog, decoder_config).pq_all
    final = result.curve[-1].total if result.curve else float('nan')
    log.info(f"ablation {name} {variant} seed {seed}: PQ {pq:.4f}")
    return AblationRow(name, variant, seed, pq, final)

def run_ablation(scenes: list[tuple[str, Scene]], catalog: ClassCatalog, variants: list[str],
                 seeds: list[int], config: TrainConfig | None = None,
                 decoder_config: DecoderConfig | None = None, jobs: int = 1) -> list[AblationRow]:
    """ train and decode every (scene, variant, seed); rows come back in that nested order """
    config = config or TrainConfig()
    decoder_config = decoder_config or DecoderConfig()
    runs = [(name, scene, variant, seed) for name, scene in scenes for variant in variants for seed in seeds]
    if jobs <= 1:
        return [_ablation_run(n, s, catalog, v, k, config, decoder_config) for n, s, v, k in runs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_ablation_run, n, s, catalog, v, k, config, decoder_config) for n, s, v, k in runs]
        return [f.result() for f in futures]

def summarize_ablation(rows: list[AblationRow]) -> dict[str, float]:
    """ mean PQ per variant, in first-seen order """
    out: dict[str, list[float]] = {}
    for row in rows:
        out.setdefault(row.variant, []).append(row.pq)
    return {k: float(np.mean(v)) for k, v in out.items()}
