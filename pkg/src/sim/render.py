"""
Flat-shaded rasterizer for the task suite. Pixel (i, j) samples the world at
x = (j + 0.5) / width, y = 1 - (i + 0.5) / height; shapes are filled where the
pixel center falls inside them, so every image is bit-exact and moving one
object only touches pixels under its old and new footprint.
"""
from functools import lru_cache
from typing import Sequence, Tuple

import numpy as np

BACKGROUND = (0.92, 0.92, 0.92)
AGENT = (0.15, 0.35, 0.85)
TARGET = (0.85, 0.2, 0.2)
BLOCK = (0.95, 0.6, 0.1)
BUTTON_OFF = (0.55, 0.1, 0.1)
BUTTON_ON = (0.1, 0.7, 0.2)
TRACK = (0.5, 0.5, 0.5)
HANDLE = (0.55, 0.2, 0.7)

AGENT_RADIUS = 0.04
TARGET_RADIUS = 0.03
BLOCK_HALF = 0.04
BUTTON_HALF = 0.035
HANDLE_HALF = 0.03
TRACK_HALF_HEIGHT = 0.008


@lru_cache(maxsize=8)
def pixel_centers(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(width) + 0.5) / width
    ys = 1.0 - (np.arange(height) + 0.5) / height
    grid_x, grid_y = np.meshgrid(xs, ys)
    grid_x.setflags(write=False)
    grid_y.setflags(write=False)
    return grid_x, grid_y


def blank(size: int) -> np.ndarray:
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = BACKGROUND
    return image


def fill_disc(canvas: np.ndarray, center: Sequence[float], radius: float, color) -> None:
    grid_x, grid_y = pixel_centers(canvas.shape[0], canvas.shape[1])
    mask = (grid_x - center[0]) ** 2 + (grid_y - center[1]) ** 2 <= radius ** 2
    canvas[mask] = color


def fill_rect(canvas: np.ndarray, center: Sequence[float], half_width: float, half_height: float, color) -> None:
    grid_x, grid_y = pixel_centers(canvas.shape[0], canvas.shape[1])
    mask = (np.abs(grid_x - center[0]) <= half_width) & (np.abs(grid_y - center[1]) <= half_height)
    canvas[mask] = color


def split_panels(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Left and right halves as writable views: two orthographic projections side by side"""
    half = image.shape[1] // 2
    return image[:, :half], image[:, half:]


def footprint(center: Sequence[float], half_extent: float, size: int) -> Tuple[slice, slice]:
    """Pixel rows/cols a shape centred at center can touch, plus a one-pixel margin"""
    x, y = center[0], center[1]
    col_lo = int(np.floor((x - half_extent) * size - 0.5)) - 1
    col_hi = int(np.ceil((x + half_extent) * size - 0.5)) + 1
    row_lo = int(np.floor((1.0 - y - half_extent) * size - 0.5)) - 1
    row_hi = int(np.ceil((1.0 - y + half_extent) * size - 0.5)) + 1
    return slice(max(row_lo, 0), min(row_hi + 1, size)), slice(max(col_lo, 0), min(col_hi + 1, size))
