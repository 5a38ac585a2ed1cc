"""
Binary PPM (P6, 8-bit) exports: embedding channels as RGB images, and cosine
distance heatmaps to a target pixel.
"""
from __future__ import annotations
from pathlib import Path

import numpy as np

from console import log
from core import ValidationError
from embed_model import PixelFields

# warm to cold: red (distance 0), yellow, cyan, blue (distance 2)
PALETTE_ANCHORS = np.array([[255, 0, 0], [255, 255, 0], [0, 255, 255], [0, 0, 255]], dtype=np.float64)

def _build_palette() -> np.ndarray:
    t = np.linspace(0.0, 1.0, 256)
    stops = np.linspace(0.0, 1.0, len(PALETTE_ANCHORS))
    channels = [np.interp(t, stops, PALETTE_ANCHORS[:, c]) for c in range(3)]
    return np.round(np.stack(channels, axis=1)).astype(np.uint8)

PALETTE = _build_palette()
""" 256 RGB entries, index 0 hottest """

def write_ppm(path: str | Path, rgb: np.ndarray):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"PPM needs an (H, W, 3) image, got {rgb.shape}")
    height, width, _ = rgb.shape
    with open(path, 'wb') as f:
        f.write(f"P6\n{width} {height}\n255\n".encode('ascii'))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())

def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, 'rb') as f:
        raw = f.read()
    tokens = raw.split(maxsplit=4)
    if len(tokens) < 5 or tokens[0] != b'P6' or tokens[3] != b'255':
        raise ValidationError(f"{path}: not an 8-bit P6 image")
    width, height = int(tokens[1]), int(tokens[2])
    pixels = raw[len(raw) - width * height * 3:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).copy()

def embedding_rgb(fields: PixelFields) -> list[np.ndarray]:
    """ one image per group of 3 channels, [-1, 1] -> [0, 255]; missing channels of the last group are 0 """
    values = np.round((np.clip(fields.e, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    images = []
    for start in range(0, fields.dim, 3):
        group = values[:, :, start:start + 3]
        if group.shape[2] < 3:
            pad = np.zeros(group.shape[:2] + (3 - group.shape[2],), dtype=np.uint8)
            group = np.concatenate([group, pad], axis=2)
        images.append(group)
    return images

def viz_embeddings(fields: PixelFields, out_prefix: str | Path) -> list[Path]:
    paths = []
    for n, image in enumerate(embedding_rgb(fields)):
        path = Path(f"{out_prefix}_{n}.ppm")
        write_ppm(path, image)
        paths.append(path)
    log.info(f"wrote {len(paths)} embedding images with prefix {out_prefix}")
    return paths

def distance_map(fields: PixelFields, target: tuple[int, int]) -> np.ndarray:
    """ d_cos of every pixel embedding to the target pixel's embedding """
    row, col = target
    if not (0 <= row < fields.height and 0 <= col < fields.width):
        raise ValidationError(f"target pixel {target} outside the {fields.height}x{fields.width} grid")
    return 1.0 - fields.e @ fields.e[row, col]

def distance_rgb(distances: np.ndarray) -> np.ndarray:
    index = np.round(np.clip(distances, 0.0, 2.0) / 2.0 * 255).astype(np.intp)
    return PALETTE[index]

def viz_distance(fields: PixelFields, target: tuple[int, int], out: str | Path) -> Path:
    write_ppm(out, distance_rgb(distance_map(fields, target)))
    return Path(out)
