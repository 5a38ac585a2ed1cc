"""
Decoder trade-off measurements: wall time and PQ per downsampling factor, and a
grid search over decoder thresholds.
"""
from __future__ import annotations
import csv
import itertools
from dataclasses import dataclass, replace
from typing import TextIO

from console import log
from core import ClassCatalog, PanopticMap, ValidationError
from decoder import DOWNSAMPLE_FACTORS, DecoderConfig, decode
from embed_model import PixelFields, SemanticState
from helpers import median_time_ms
from metrics import panoptic_quality

@dataclass(frozen=True)
class BenchRow:
    factor: int
    ms: float
    pq: float

def bench_downsample(fields: PixelFields, state: SemanticState, catalog: ClassCatalog, gt: PanopticMap,
                     factors: tuple[int, ...] | list[int] = DOWNSAMPLE_FACTORS, config: DecoderConfig | None = None,
                     repeats: int = 5) -> list[BenchRow]:
    """ median decode time over `repeats` runs and PQ vs `gt`, per factor in the given order """
    config = config or DecoderConfig()
    rows = []
    for factor in factors:
        if factor not in DOWNSAMPLE_FACTORS:
            raise ValidationError(f"downsample factor must be one of {DOWNSAMPLE_FACTORS}, got {factor}")
        run_config = replace(config, downsample_factor=factor)
        ms, predicted = median_time_ms(lambda: decode(fields, state, catalog, run_config), max(5, repeats))
        pq = panoptic_quality(predicted, gt, catalog).pq_all
        log.info(f"factor {factor}: {ms:.2f} ms, PQ {pq:.4f}")
        rows.append(BenchRow(factor, ms, pq))
    return rows

def write_bench_csv(rows: list[BenchRow], out: TextIO):
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(['factor', 'ms', 'pq'])
    for row in rows:
        writer.writerow([row.factor, f"{row.ms:.3f}", f"{row.pq:.6f}"])

SWEEP_KEYS = ('seed_threshold', 'merge_threshold', 'mask_threshold', 'stuff_threshold')

def sweep_thresholds(fields: PixelFields, state: SemanticState, catalog: ClassCatalog, gt: PanopticMap,
                     grid: dict[str, list[float]], config: DecoderConfig | None = None) -> list[tuple[dict[str, float], float]]:
    """ PQ of every combination in `grid`, best first (grid order on ties) """
    config = config or DecoderConfig()
    unknown = [k for k in grid if k not in SWEEP_KEYS]
    if unknown:
        raise ValidationError(f"cannot sweep {unknown}, expected some of {SWEEP_KEYS}")
    keys = list(grid)
    results = []
    for values in itertools.product(*(grid[k] for k in keys)):
        settings = dict(zip(keys, values))
        predicted = decode(fields, state, catalog, replace(config, **settings))
        results.append((settings, panoptic_quality(predicted, gt, catalog).pq_all))
    order = sorted(range(len(results)), key=lambda i: (-results[i][1], i))
    return [results[i] for i in order]
