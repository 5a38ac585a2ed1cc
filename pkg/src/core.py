from __future__ import annotations
import struct
import configparser
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from console import log

VOID_CLASS = 255
""" class id of unlabeled pixels in a LabelMap """
VOID_SEGMENT = 0
""" segment id of unassigned pixels in a PanopticMap """
PANOPTIC_OFFSET = 1000
""" instances per class in the class*1000+instance interchange codec """

GRID_MAGIC = b'HLE1'
DTYPE_INT32 = 0
DTYPE_FLOAT32 = 1


class HleError(Exception):
    """ Base error for everything raised by this package """

class ValidationError(HleError, ValueError):
    pass

class GridFormatError(HleError):
    pass


class ClassKind(Enum):
    THING = 'thing'
    STUFF = 'stuff'

@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    kind: ClassKind

    @property
    def is_thing(self) -> bool:
        return self.kind is ClassKind.THING

@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[ClassInfo, ...]

    def __post_init__(self):
        problems = self.validate(require_panoptic=False)
        if problems:
            raise ValidationError('; '.join(problems))

    def validate(self, require_panoptic=True) -> list[str]:
        problems = []
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            problems.append(f"class ids must be unique and contiguous from 0, got {ids}")
        if VOID_CLASS in ids:
            problems.append(f"class id {VOID_CLASS} is reserved for void")
        if require_panoptic:
            if not self.thing_ids:
                problems.append("catalog has no thing class")
            if not self.stuff_ids:
                problems.append("catalog has no stuff class")
        return problems

    def __len__(self):
        return len(self.classes)

    def __getitem__(self, class_id: int) -> ClassInfo:
        return self.classes[class_id]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def thing_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.is_thing]

    @property
    def stuff_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if not c.is_thing]

    def is_thing(self, class_id: int) -> bool:
        return 0 <= class_id < len(self.classes) and self.classes[class_id].is_thing

    def thing_mask(self) -> np.ndarray:
        """ bool lookup table indexed by class id (void and unknown ids -> False) """
        table = np.zeros(VOID_CLASS + 1, dtype=bool)
        table[self.thing_ids] = True
        return table

    def stuff_mask(self) -> np.ndarray:
        table = np.zeros(VOID_CLASS + 1, dtype=bool)
        table[self.stuff_ids] = True
        return table

    def stuff_pixels(self, labels: np.ndarray) -> np.ndarray:
        """ per-pixel stuff test; void, negative and unknown ids -> False """
        return _class_lookup(self.stuff_mask(), labels)

    def thing_pixels(self, labels: np.ndarray) -> np.ndarray:
        return _class_lookup(self.thing_mask(), labels)

    @staticmethod
    def of(*entries: tuple[str, str]) -> ClassCatalog:
        """ ClassCatalog.of(('sky', 'stuff'), ('car', 'thing')) numbers classes in order """
        return ClassCatalog(tuple(ClassInfo(i, name, ClassKind(kind)) for i, (name, kind) in enumerate(entries)))

    @staticmethod
    def from_file(path: str | Path) -> ClassCatalog:
        """ ini file with a [classes] section of `id = name, kind` lines """
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#',))
        try:
            parser.read(path, encoding='utf-8')
        except configparser.Error as e:
            raise ValidationError(f"{path}: {e}") from None
        if not parser.has_section('classes'):
            raise ValidationError(f"{path}: missing [classes] section")
        entries = []
        for key, value in parser['classes'].items():
            parts = [p.strip().strip('"\'') for p in value.split(',')]
            try:
                if len(parts) != 2:
                    raise ValueError(value)
                entries.append(ClassInfo(int(key), parts[0], ClassKind(parts[1].lower())))
            except ValueError:
                raise ValidationError(f"{path}: class '{key}' needs 'name, thing|stuff', got '{value}'") from None
        return ClassCatalog(tuple(sorted(entries, key=lambda c: c.class_id)))

    def to_file(self, path: str | Path):
        with open(path, 'w', encoding='utf-8') as f:
            f.write("[classes]\n")
            for c in self.classes:
                f.write(f"{c.class_id} = {c.name}, {c.kind.value}\n")


def _class_lookup(table: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    inside = (labels >= 0) & (labels < len(table))
    return table[np.where(inside, labels, VOID_CLASS)] & inside

def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out

@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray
    """ (H, W) int32 class id per pixel, VOID_CLASS for unlabeled """

    def __post_init__(self):
        if np.ndim(self.data) != 2:
            raise ValidationError(f"label map must be 2-d, got shape {np.shape(self.data)}")
        object.__setattr__(self, 'data', _frozen(self.data, np.int32))

    @property
    def height(self) -> int: return self.data.shape[0]
    @property
    def width(self) -> int: return self.data.shape[1]
    @property
    def shape(self) -> tuple[int, int]: return self.data.shape

@dataclass(frozen=True)
class InstanceMap:
    data: np.ndarray
    """ (H, W) int32 instance index per pixel, 0 = no instance """

    def __post_init__(self):
        if np.ndim(self.data) != 2:
            raise ValidationError(f"instance map must be 2-d, got shape {np.shape(self.data)}")
        object.__setattr__(self, 'data', _frozen(self.data, np.int32))

    @property
    def height(self) -> int: return self.data.shape[0]
    @property
    def width(self) -> int: return self.data.shape[1]
    @property
    def shape(self) -> tuple[int, int]: return self.data.shape

@dataclass(frozen=True)
class FieldGrid:
    data: np.ndarray
    """ (H, W, D) float64 """

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] < 1:
            raise ValidationError(f"field grid must be (H, W, D), got shape {data.shape}")
        object.__setattr__(self, 'data', _frozen(data, np.float64))

    @property
    def height(self) -> int: return self.data.shape[0]
    @property
    def width(self) -> int: return self.data.shape[1]
    @property
    def channels(self) -> int: return self.data.shape[2]

    def validate(self, unit_norm=False, tol=1e-6) -> list[str]:
        problems = []
        if not np.all(np.isfinite(self.data)):
            problems.append(f"field has {int(np.sum(~np.isfinite(self.data)))} non-finite values")
        elif unit_norm:
            norms = np.linalg.norm(self.data, axis=2)
            worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
            if worst > tol:
                problems.append(f"embedding norms deviate from 1 by up to {worst:.3g}")
        return problems


@dataclass(frozen=True)
class Segment:
    segment_id: int
    class_id: int
    is_thing: bool
    score: float = 1.0
    """ seed score for decoded thing segments, 1.0 otherwise """

@dataclass(frozen=True)
class PanopticMap:
    data: np.ndarray
    """ (H, W) int32 segment id per pixel, VOID_SEGMENT for void """
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        if np.ndim(self.data) != 2:
            raise ValidationError(f"panoptic map must be 2-d, got shape {np.shape(self.data)}")
        object.__setattr__(self, 'data', _frozen(self.data, np.int32))
        object.__setattr__(self, 'segments', tuple(self.segments))
        known = {s.segment_id for s in self.segments}
        if VOID_SEGMENT in known:
            raise ValidationError(f"segment id {VOID_SEGMENT} is reserved for void")
        if len(known) != len(self.segments):
            raise ValidationError("duplicate segment ids in segment table")
        used = set(np.unique(self.data).tolist()) - {VOID_SEGMENT}
        missing = used - known
        if missing:
            raise ValidationError(f"segment ids {sorted(missing)} are not in the segment table")

    @property
    def height(self) -> int: return self.data.shape[0]
    @property
    def width(self) -> int: return self.data.shape[1]
    @property
    def shape(self) -> tuple[int, int]: return self.data.shape

    def segment_table(self) -> dict[int, Segment]:
        return {s.segment_id: s for s in self.segments}

    def semantic(self) -> LabelMap:
        """ class id per pixel, VOID_CLASS on void segments """
        lut = np.full(max([s.segment_id for s in self.segments], default=0) + 1, VOID_CLASS, dtype=np.int32)
        for s in self.segments:
            lut[s.segment_id] = s.class_id
        return LabelMap(lut[self.data])

    def panoptic_ids(self) -> np.ndarray:
        """ class*1000+instance raster; void encodes as VOID_CLASS*1000 """
        out = np.full(self.data.shape, VOID_CLASS * PANOPTIC_OFFSET, dtype=np.int32)
        rank: dict[int, int] = {}
        for s in sorted(self.segments, key=lambda s: s.segment_id):
            if s.is_thing:
                rank[s.class_id] = rank.get(s.class_id, 0) + 1
                index = rank[s.class_id]
            else:
                index = 0
            out[self.data == s.segment_id] = encode_panoptic_id(s.class_id, index)
        return out

    @staticmethod
    def from_ground_truth(labels: LabelMap, instances: InstanceMap, catalog: ClassCatalog) -> PanopticMap:
        """ one segment per present stuff class and per instance; void and crowd pixels -> void """
        raster = np.zeros(labels.shape, dtype=np.int32)
        segments: list[Segment] = []
        stuff = catalog.stuff_pixels(labels.data)
        for class_id in catalog.stuff_ids:
            mask = stuff & (labels.data == class_id)
            if np.any(mask):
                segments.append(Segment(len(segments) + 1, class_id, False))
                raster[mask] = segments[-1].segment_id
        for inst in extract_instances(labels, instances):
            segments.append(Segment(len(segments) + 1, inst.class_id, True))
            raster.reshape(-1)[inst.pixels] = segments[-1].segment_id
        return PanopticMap(raster, tuple(segments))


def encode_panoptic_id(class_id: int, instance_index: int) -> int:
    if not 0 <= instance_index < PANOPTIC_OFFSET:
        raise ValidationError(f"instance index {instance_index} outside [0, {PANOPTIC_OFFSET})")
    if class_id < 0:
        raise ValidationError(f"negative class id {class_id}")
    return class_id * PANOPTIC_OFFSET + instance_index

def decode_panoptic_id(panoptic_id: int) -> tuple[int, int]:
    if panoptic_id < 0:
        raise ValidationError(f"negative panoptic id {panoptic_id}")
    return divmod(panoptic_id, PANOPTIC_OFFSET)


@dataclass(frozen=True)
class Instance:
    instance_id: int
    class_id: int
    pixels: np.ndarray = field(repr=False)
    """ sorted row-major flat pixel indices """

    @property
    def size(self) -> int:
        return len(self.pixels)

def extract_instances(labels: LabelMap, instances: InstanceMap) -> list[Instance]:
    """ One entry per distinct nonzero instance id, ordered by id """
    if labels.shape != instances.shape:
        raise ValidationError(f"label map {labels.shape} and instance map {instances.shape} differ in size")
    ids = instances.data.reshape(-1)
    classes = labels.data.reshape(-1)
    order = np.argsort(ids, kind='stable')
    sorted_ids = ids[order]
    start = np.searchsorted(sorted_ids, 1)
    result = []
    if start == len(sorted_ids):
        return result
    uniq, first = np.unique(sorted_ids[start:], return_index=True)
    bounds = list(first + start) + [len(sorted_ids)]
    for k, instance_id in enumerate(uniq.tolist()):
        pixels = np.sort(order[bounds[k]:bounds[k + 1]])
        owners = np.unique(classes[pixels])
        if len(owners) != 1:
            raise ValidationError(f"instance {instance_id} spans classes {owners.tolist()}")
        result.append(Instance(instance_id, int(owners[0]), pixels))
    return result

def mean_embedding(field: FieldGrid | np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """ Raw (not renormalized) mean of the embedding vectors at flat `pixels` """
    data = field.data if isinstance(field, FieldGrid) else np.asarray(field)
    flat = data.reshape(-1, data.shape[-1])
    pixels = np.asarray(pixels)
    if pixels.size == 0:
        raise ValidationError("mean of an empty pixel list")
    return flat[pixels].mean(axis=0)

def validate(labels: LabelMap, instances: InstanceMap, catalog: ClassCatalog) -> list[str]:
    """ Check map invariants; returns the violations (empty list = ok) """
    problems = catalog.validate(require_panoptic=False)
    if labels.shape != instances.shape:
        problems.append(f"label map {labels.shape} and instance map {instances.shape} differ in size")
        return problems
    values = np.unique(labels.data)
    negative = [int(v) for v in values if v < 0]
    if negative:
        problems.append(f"negative class ids {negative}")
    unknown = [int(v) for v in values if v != VOID_CLASS and v >= len(catalog)]
    if unknown:
        problems.append(f"unknown class ids {unknown}")
    if np.any(instances.data < 0):
        problems.append("negative instance ids")
    has_instance = instances.data > 0
    on_stuff = has_instance & catalog.stuff_pixels(labels.data)
    if np.any(on_stuff):
        ids = np.unique(instances.data[on_stuff]).tolist()
        problems.append(f"instance ids {ids} on stuff pixels")
    on_void = has_instance & (labels.data == VOID_CLASS)
    if np.any(on_void):
        ids = np.unique(instances.data[on_void]).tolist()
        problems.append(f"instance ids {ids} on void pixels")
    flat_ids = instances.data[has_instance]
    flat_classes = labels.data[has_instance]
    for instance_id in np.unique(flat_ids).tolist():
        owners = np.unique(flat_classes[flat_ids == instance_id])
        if len(owners) > 1:
            problems.append(f"instance {instance_id} spans classes {owners.tolist()}")
    return problems


# -------------------------------------------------------------
#  HLE1 grid files

def write_grid(path: str | Path, array: np.ndarray):
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise GridFormatError(f"grid must be 2-d or 3-d, got shape {array.shape}")
    if np.issubdtype(array.dtype, np.integer) or array.dtype == bool:
        code, payload = DTYPE_INT32, array.astype('<i4')
    else:
        code, payload = DTYPE_FLOAT32, array.astype('<f4')
    height, width, channels = array.shape
    with open(path, 'wb') as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack('<4I', height, width, channels, code))
        f.write(np.ascontiguousarray(payload).tobytes())
    log.debug(f"wrote {height}x{width}x{channels} grid to {path}")

def read_grid(path: str | Path) -> np.ndarray:
    """ Returns (H, W, C) int32 or float32 """
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:4] != GRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise GridFormatError(f"{path}: truncated header")
    height, width, channels, code = struct.unpack('<4I', raw[4:20])
    if code == DTYPE_INT32:
        dtype = np.dtype('<i4')
    elif code == DTYPE_FLOAT32:
        dtype = np.dtype('<f4')
    else:
        raise GridFormatError(f"{path}: unknown dtype code {code}")
    expected = height * width * channels * dtype.itemsize
    if len(raw) - 20 != expected:
        raise GridFormatError(f"{path}: payload is {len(raw) - 20} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=20).reshape(height, width, channels).copy()

def write_segment_table(path: str | Path, segments: tuple[Segment, ...] | list[Segment]):
    with open(path, 'w', encoding='utf-8') as f:
        for s in segments:
            kind = ClassKind.THING.value if s.is_thing else ClassKind.STUFF.value
            f.write(f"{s.segment_id}\t{s.class_id}\t{kind}\t{s.score!r}\n")

def read_segment_table(path: str | Path) -> list[Segment]:
    segments = []
    with open(path, encoding='utf-8') as f:
        for n, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split('\t')
            if len(parts) not in (3, 4):
                raise GridFormatError(f"{path}:{n}: expected 3 or 4 tab-separated fields")
            try:
                score = float(parts[3]) if len(parts) == 4 else 1.0
                segments.append(Segment(int(parts[0]), int(parts[1]), ClassKind(parts[2]) is ClassKind.THING, score))
            except ValueError as e:
                raise GridFormatError(f"{path}:{n}: {e}") from None
    return segments

def save_panoptic(path: str | Path, panoptic: PanopticMap):
    write_grid(path, panoptic.data)
    write_segment_table(f"{path}.segments", panoptic.segments)

def load_panoptic(path: str | Path) -> PanopticMap:
    raster = read_grid(path)
    if raster.shape[2] != 1:
        raise GridFormatError(f"{path}: panoptic raster must have 1 channel")
    return PanopticMap(raster[:, :, 0], tuple(read_segment_table(f"{path}.segments")))

def load_label_map(path: str | Path) -> LabelMap:
    return LabelMap(read_grid(path)[:, :, 0])

def load_instance_map(path: str | Path) -> InstanceMap:
    return InstanceMap(read_grid(path)[:, :, 0])
