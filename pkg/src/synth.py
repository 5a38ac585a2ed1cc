"""
Deterministic synthetic panoptic scenes: horizontal stuff bands with disc and
rectangle thing instances painted on top in draw order.
"""
from __future__ import annotations
from dataclasses import dataclass

import numpy as np

from console import log
from core import ClassCatalog, InstanceMap, LabelMap, ValidationError, validate

SHAPES = ('disc', 'rectangle')

def standard_catalog() -> ClassCatalog:
    return ClassCatalog.of(('sky', 'stuff'), ('vegetation', 'stuff'), ('road', 'stuff'),
                           ('car', 'thing'), ('person', 'thing'))

SKY, VEGETATION, ROAD, CAR, PERSON = range(5)

@dataclass(frozen=True)
class ThingSpec:
    class_id: int
    min_count: int
    max_count: int
    shape: str = 'disc'

@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    bands: tuple[tuple[int, float], ...]
    """ (stuff class id, fraction of the height), top to bottom """
    things: tuple[ThingSpec, ...] = ()
    size_range: tuple[float, float] = (0.1, 0.2)
    """ disc radius / rectangle half-height as a fraction of min(height, width) """
    avoid_overlap: bool = False
    """ resample positions so things keep a one-pixel gap; later things occlude otherwise """
    rng_seed: int = 0
    max_attempts: int = 200

    @property
    def declared_instances(self) -> tuple[int, int]:
        return sum(t.min_count for t in self.things), sum(t.max_count for t in self.things)

    def validate(self) -> list[str]:
        problems = []
        if self.height < 1 or self.width < 1:
            problems.append(f"scene size must be positive, got {self.height}x{self.width}")
        if not self.bands:
            problems.append("at least one stuff band is required")
        elif abs(sum(f for _, f in self.bands) - 1.0) > 1e-6:
            problems.append(f"band fractions sum to {sum(f for _, f in self.bands)}, expected 1")
        if any(f < 0 for _, f in self.bands):
            problems.append("band fractions must be non-negative")
        for t in self.things:
            if t.min_count < 0 or t.max_count < t.min_count:
                problems.append(f"bad count range [{t.min_count}, {t.max_count}] for class {t.class_id}")
            if t.shape not in SHAPES:
                problems.append(f"unknown shape '{t.shape}', expected one of {SHAPES}")
        lo, hi = self.size_range
        if not 0 < lo <= hi <= 0.5:
            problems.append(f"size range {self.size_range} must satisfy 0 < min <= max <= 0.5")
        return problems


def _band_labels(spec: SceneSpec) -> np.ndarray:
    labels = np.empty((spec.height, spec.width), dtype=np.int32)
    bounds = np.round(np.cumsum([0.0] + [f for _, f in spec.bands]) * spec.height).astype(int)
    bounds[-1] = spec.height
    for (class_id, _), top, bottom in zip(spec.bands, bounds[:-1], bounds[1:]):
        labels[top:bottom] = class_id
    return labels

def _shape_mask(shape: str, center: tuple[float, float], half: tuple[float, float],
                rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    dr = rows - center[0]
    dc = cols - center[1]
    if shape == 'disc':
        return dr * dr + dc * dc <= half[0] * half[0]
    return (np.abs(dr) <= half[0]) & (np.abs(dc) <= half[1])

def _dilate(mask: np.ndarray) -> np.ndarray:
    grown = mask.copy()
    grown[1:] |= mask[:-1]
    grown[:-1] |= mask[1:]
    grown[:, 1:] |= mask[:, :-1]
    grown[:, :-1] |= mask[:, 1:]
    return grown

def _place(spec: SceneSpec, thing: ThingSpec, occupied: np.ndarray, rng: np.random.Generator,
           rows: np.ndarray, cols: np.ndarray) -> np.ndarray | None:
    base = min(spec.height, spec.width)
    attempts = spec.max_attempts if spec.avoid_overlap else 1
    for _ in range(attempts):
        radius = max(1.0, rng.uniform(*spec.size_range) * base)
        half = (radius, radius if thing.shape == 'disc' else radius * rng.uniform(0.6, 1.6))
        center = (rng.uniform(min(half[0], spec.height / 2), max(spec.height - 1 - half[0], spec.height / 2)),
                  rng.uniform(min(half[1], spec.width / 2), max(spec.width - 1 - half[1], spec.width / 2)))
        mask = _shape_mask(thing.shape, center, half, rows, cols)
        if not np.any(mask):
            continue
        if spec.avoid_overlap and np.any(_dilate(mask) & occupied):
            continue
        return mask
    return None

def generate(spec: SceneSpec, catalog: ClassCatalog | None = None) -> tuple[LabelMap, InstanceMap]:
    """
    Paint the bands, then every thing in ThingSpec order. Instance ids follow draw
    order; instances fully occluded by later ones are dropped and ids compacted.
    """
    problems = spec.validate()
    if problems:
        raise ValidationError('; '.join(problems))
    rng = np.random.Generator(np.random.PCG64(spec.rng_seed))
    labels = _band_labels(spec)
    instances = np.zeros_like(labels)
    rows, cols = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing='ij')
    next_id = 1
    for thing in spec.things:
        count = int(rng.integers(thing.min_count, thing.max_count + 1))
        for _ in range(count):
            mask = _place(spec, thing, instances > 0, rng, rows, cols)
            if mask is None:
                log.warning(f"could not place a class {thing.class_id} {thing.shape} without overlap")
                continue
            labels[mask] = thing.class_id
            instances[mask] = next_id
            next_id += 1
    survivors = [i for i in range(1, next_id) if np.any(instances == i)]
    if len(survivors) < next_id - 1:
        log.debug(f"{next_id - 1 - len(survivors)} instances fully occluded")
    lut = np.zeros(next_id, dtype=np.int32)
    lut[survivors] = np.arange(1, len(survivors) + 1)
    instances = lut[instances]
    label_map, instance_map = LabelMap(labels), InstanceMap(instances)
    problems = validate(label_map, instance_map, catalog or standard_catalog())
    if problems:
        raise ValidationError('; '.join(problems))
    return label_map, instance_map

def standard_suite() -> list[tuple[str, SceneSpec]]:
    return [
        ('tiny', SceneSpec(32, 48, ((SKY, 0.5), (ROAD, 0.5)),
                           (ThingSpec(CAR, 2, 2, 'disc'),),
                           size_range=(0.15, 0.22), avoid_overlap=True, rng_seed=1)),
        ('small', SceneSpec(64, 96, ((SKY, 0.3), (VEGETATION, 0.3), (ROAD, 0.4)),
                            (ThingSpec(CAR, 3, 3, 'rectangle'), ThingSpec(PERSON, 2, 2, 'disc')),
                            size_range=(0.08, 0.14), avoid_overlap=True, rng_seed=2)),
        ('occluded', SceneSpec(64, 96, ((SKY, 0.5), (ROAD, 0.5)),
                               (ThingSpec(CAR, 3, 3, 'disc'), ThingSpec(PERSON, 2, 2, 'disc')),
                               size_range=(0.18, 0.25), avoid_overlap=False, rng_seed=3)),
        ('dense', SceneSpec(96, 128, ((SKY, 0.25), (VEGETATION, 0.25), (ROAD, 0.5)),
                            (ThingSpec(CAR, 6, 6, 'rectangle'), ThingSpec(PERSON, 6, 6, 'disc')),
                            size_range=(0.06, 0.1), avoid_overlap=True, rng_seed=4)),
    ]

def suite_scene(name: str) -> SceneSpec:
    for n, spec in standard_suite():
        if n == name:
            return spec
    raise ValidationError(f"unknown suite scene '{name}', expected one of {[n for n, _ in standard_suite()]}")
