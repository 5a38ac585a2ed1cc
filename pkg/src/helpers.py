from __future__ import annotations
import time
import statistics
from typing import Callable, TypeVar

T = TypeVar('T')

def parse_int_list(text: str) -> list[int]:
    """ '1, 2,4' -> [1, 2, 4] """
    return [int(tok) for tok in text.replace(' ', '').split(',') if tok]

def parse_float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(' ', '').split(',') if tok]

def parse_pixel(text: str) -> tuple[int, int]:
    """ 'row,col' -> (row, col) """
    parts = parse_int_list(text)
    if len(parts) != 2:
        raise ValueError(f"expected 'row,col', got '{text}'")
    return parts[0], parts[1]

def median_time_ms(fn: Callable[[], T], repeats: int = 5) -> tuple[float, T]:
    """Run `fn` `repeats` times, return (median wall time in ms, last result)"""
    times = []
    result = None
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        result = fn()
        times.append((time.perf_counter() - start) * 1000.0)
    return statistics.median(times), result
