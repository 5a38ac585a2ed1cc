"""
Panoptic decoding of predicted fields:

  semantic argmax -> seed NMS -> seed threshold -> greedy seed merge
  -> mask assignment -> stuff filter

Thing segments are numbered in merge order, stuff segments follow in class order.
"""
from __future__ import annotations
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from console import log
from core import (
    ClassCatalog, FieldGrid, LabelMap, PanopticMap, Segment, ValidationError, VOID_SEGMENT,
)
from embed_model import PixelFields, SemanticState, embedding_views, pixel_positions, psi_scores, with_embedding

DOWNSAMPLE_FACTORS = (1, 2, 4, 8)

@dataclass
class DecoderConfig:
    seed_threshold: float = 0.5
    merge_threshold: float = 0.5
    mask_threshold: float = 0.5
    stuff_threshold: float = 0.25
    pool_size: int = 3
    min_stuff_area: int = 0
    downsample_factor: int = 1
    things_only_seeds: bool = False
    """ only pixels whose semantic argmax is a thing class may become seeds """

    def validate(self) -> list[str]:
        problems = []
        for name in ('seed_threshold', 'merge_threshold', 'mask_threshold', 'stuff_threshold'):
            value = getattr(self, name)
            if not 0 < value < 1:
                problems.append(f"{name} must lie in (0, 1), got {value}")
        if self.pool_size < 1 or self.pool_size % 2 == 0:
            problems.append(f"pool_size must be odd and positive, got {self.pool_size}")
        if self.min_stuff_area < 0:
            problems.append("min_stuff_area must be non-negative")
        if self.downsample_factor not in DOWNSAMPLE_FACTORS:
            problems.append(f"downsample_factor must be one of {DOWNSAMPLE_FACTORS}, got {self.downsample_factor}")
        return problems

@dataclass(frozen=True)
class SeedCandidate:
    pixel: int
    score: float
    e: np.ndarray
    rho: np.ndarray
    sigma: float
    sigma_spatial: float
    class_id: int


def semantic_argmax(fields: PixelFields, state: SemanticState) -> LabelMap:
    """ argmax_k psi_k per pixel, smallest class id on ties """
    return _semantic(fields, state)[0]

def _semantic(fields: PixelFields, state: SemanticState) -> tuple[LabelMap, np.ndarray]:
    sem_channels, _ = embedding_views(fields, state)
    e = with_embedding(fields, sem_channels).flat_e()
    if e.shape[0] == 0:
        empty = np.zeros((fields.height, fields.width))
        return LabelMap(empty.astype(np.int32)), empty
    psi = psi_scores(e, state)
    best = np.argmax(psi, axis=1)
    confidence = psi[np.arange(len(best)), best]
    shape = (fields.height, fields.width)
    return LabelMap(best.reshape(shape)), confidence.reshape(shape)

def seed_nms(seed: FieldGrid | np.ndarray, pool_size: int = 3) -> list[int]:
    """
    Row-major flat indices of pixels that equal the max of their pool_size window
    and have no earlier (row-major) window neighbor with the same value.
    """
    data = seed.data[:, :, 0] if isinstance(seed, FieldGrid) else np.asarray(seed, dtype=np.float64)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    if data.ndim != 2:
        raise ValidationError(f"seed map must be single-channel, got shape {data.shape}")
    if data.size == 0:
        return []
    r = pool_size // 2
    padded = np.pad(data, r, mode='constant', constant_values=-np.inf)
    windows = sliding_window_view(padded, (pool_size, pool_size))
    keep = data == windows.max(axis=(2, 3))
    h, w = data.shape
    for dr in range(-r, 1):
        for dc in range(-r, r + 1):
            if dr == 0 and dc >= 0:
                break
            keep &= padded[r + dr:r + dr + h, r + dc:r + dc + w] != data
    return np.flatnonzero(keep).tolist()

def pair_affinity(a: SeedCandidate, b: SeedCandidate) -> float:
    """ Phi(a, b) with a's bandwidths """
    d = 1.0 - float(a.e @ b.e)
    r = float(np.sum(np.square(a.rho - b.rho)))
    return float(np.exp(-d / (2.0 * a.sigma ** 2) - r / (2.0 * a.sigma_spatial ** 2)))

def seed_candidates(fields: PixelFields, semantic: LabelMap, catalog: ClassCatalog,
                    config: DecoderConfig, rho: np.ndarray | None = None) -> list[SeedCandidate]:
    rho = pixel_positions(fields.height, fields.width) if rho is None else rho
    seed = fields.seed.reshape(-1)
    e = fields.flat_e()
    sigma = fields.sigma.reshape(-1)
    spatial = fields.sigma_spatial.reshape(-1)
    classes = semantic.data.reshape(-1)
    thing = catalog.thing_mask()
    candidates = []
    for i in seed_nms(fields.seed, config.pool_size):
        if seed[i] < config.seed_threshold:
            continue
        if config.things_only_seeds and not thing[classes[i]]:
            continue
        candidates.append(SeedCandidate(i, float(seed[i]), e[i], rho[i], float(sigma[i]), float(spatial[i]), int(classes[i])))
    return candidates

def merge_seeds(candidates: list[SeedCandidate], config: DecoderConfig | None = None) -> list[SeedCandidate]:
    """ Greedy by descending score: a candidate survives if Phi from every survivor is below merge_threshold """
    config = config or DecoderConfig()
    survivors: list[SeedCandidate] = []
    for c in sorted(candidates, key=lambda c: (-c.score, c.pixel)):
        if all(pair_affinity(s, c) < config.merge_threshold for s in survivors):
            survivors.append(c)
    log.debug(f"{len(survivors)} of {len(candidates)} seeds survive merging")
    return survivors

def affinity_to_seeds(survivors: list[SeedCandidate], fields: PixelFields, rho: np.ndarray | None = None) -> np.ndarray:
    """ (N, S) Phi of every pixel to every survivor, with each survivor's bandwidths """
    rho = pixel_positions(fields.height, fields.width) if rho is None else rho
    e = fields.flat_e()
    phi = np.empty((e.shape[0], len(survivors)))
    for j, s in enumerate(survivors):
        d = 1.0 - e @ s.e
        r = np.sum(np.square(rho - s.rho), axis=1)
        phi[:, j] = np.exp(-d / (2.0 * s.sigma ** 2) - r / (2.0 * s.sigma_spatial ** 2))
    return phi

def assign_masks(survivors: list[SeedCandidate], fields: PixelFields, semantic: LabelMap,
                 catalog: ClassCatalog, config: DecoderConfig | None = None,
                 rho: np.ndarray | None = None) -> PanopticMap:
    """
    Each pixel joins the survivor with the highest Phi (first on ties) if that Phi
    reaches mask_threshold. Survivors seeded on a stuff class claim pixels but make no
    segment; those pixels stay void here and are left to the stuff filter.
    """
    config = config or DecoderConfig()
    raster = np.full(fields.height * fields.width, VOID_SEGMENT, dtype=np.int32)
    segments: list[Segment] = []
    if not survivors or raster.size == 0:
        return PanopticMap(raster.reshape(fields.height, fields.width), ())
    phi = affinity_to_seeds(survivors, fields, rho)
    owner = np.argmax(phi, axis=1)
    claimed = phi[np.arange(len(owner)), owner] >= config.mask_threshold
    for j, s in enumerate(survivors):
        if not catalog.is_thing(s.class_id):
            continue
        mask = claimed & (owner == j)
        if not np.any(mask):
            continue
        segments.append(Segment(len(segments) + 1, s.class_id, True, s.score))
        raster[mask] = segments[-1].segment_id
    return PanopticMap(raster.reshape(fields.height, fields.width), tuple(segments))

def stuff_filter(things: PanopticMap, semantic: LabelMap, fields: PixelFields, state: SemanticState,
                 catalog: ClassCatalog, config: DecoderConfig | None = None,
                 confidence: np.ndarray | None = None, min_area: int | None = None) -> PanopticMap:
    """
    Unclaimed pixels of a stuff class with psi >= stuff_threshold join that class's
    single segment; classes with fewer than min_stuff_area such pixels become void.
    """
    config = config or DecoderConfig()
    min_area = config.min_stuff_area if min_area is None else min_area
    if confidence is None:
        confidence = _semantic(fields, state)[1]
    raster = np.array(things.data)
    segments = list(things.segments)
    free = raster == VOID_SEGMENT
    confident = free & (confidence >= config.stuff_threshold)
    next_id = max([s.segment_id for s in segments], default=0) + 1
    for class_id in catalog.stuff_ids:
        mask = confident & (semantic.data == class_id)
        area = int(np.count_nonzero(mask))
        if area == 0 or area < min_area:
            continue
        segments.append(Segment(next_id, class_id, False))
        raster[mask] = next_id
        next_id += 1
    return PanopticMap(raster, tuple(segments))

def _decode_at(fields: PixelFields, state: SemanticState, catalog: ClassCatalog,
               config: DecoderConfig, rho: np.ndarray, min_area: int) -> PanopticMap:
    semantic, confidence = _semantic(fields, state)
    _, ins_channels = embedding_views(fields, state)
    instance_view = with_embedding(fields, ins_channels)
    candidates = seed_candidates(instance_view, semantic, catalog, config, rho)
    survivors = merge_seeds(candidates, config)
    things = assign_masks(survivors, instance_view, semantic, catalog, config, rho)
    return stuff_filter(things, semantic, fields, state, catalog, config, confidence, min_area)

def decode(fields: PixelFields, state: SemanticState, catalog: ClassCatalog,
           config: DecoderConfig | None = None) -> PanopticMap:
    config = config or DecoderConfig()
    problems = config.validate()
    if problems:
        raise ValidationError('; '.join(problems))
    if config.downsample_factor > 1:
        return decode_downsampled(fields, state, catalog, config)
    rho = pixel_positions(fields.height, fields.width)
    return _decode_at(fields, state, catalog, config, rho, config.min_stuff_area)

def decode_downsampled(fields: PixelFields, state: SemanticState, catalog: ClassCatalog,
                       config: DecoderConfig) -> PanopticMap:
    """
    Decode the top-left pixel of every f x f block, keeping full-resolution positions,
    then replicate each decoded pixel over its block. min_stuff_area is counted in
    full-resolution pixels.
    """
    f = config.downsample_factor
    if f == 1:
        return decode(fields, state, catalog, config)
    h, w = fields.height, fields.width
    small = PixelFields(e=fields.e[::f, ::f], sigma=fields.sigma[::f, ::f],
                        sigma_spatial=fields.sigma_spatial[::f, ::f], seed=fields.seed[::f, ::f])
    rows, cols = np.meshgrid(np.arange(0, h, f), np.arange(0, w, f), indexing='ij')
    rho = pixel_positions(h, w)[(rows * w + cols).reshape(-1)]
    min_area = int(np.ceil(config.min_stuff_area / (f * f)))
    decoded = _decode_at(small, state, catalog, config, rho, min_area)
    raster = np.repeat(np.repeat(decoded.data, f, axis=0), f, axis=1)[:h, :w]
    return PanopticMap(raster, decoded.segments)
