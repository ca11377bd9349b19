"""
Canny edge extraction: gaussian blur, sobel gradients, non-maximum
suppression and hysteresis. The binary edge map is the domain-invariant input
of the generator.
"""
import math
import logging
from dataclasses import dataclass, field, asdict
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from data import load_image, write_pgm

logger = logging.getLogger(__name__)

# gradient peaks below this are roundoff, not structure
MIN_PEAK = 1e-9

# (dy, dx) of the forward neighbour along each quantized gradient direction;
# rows grow downward, so 45 degrees points down-right.
_DIRECTION_OFFSETS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


class EdgeDetectionError(ValueError):
    pass


@dataclass(frozen=True)
class CannyParams:
    sigma: float = 1.4
    low_ratio: float = 0.10
    high_ratio: float = 0.20
    kernel_radius: Optional[int] = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise EdgeDetectionError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.low_ratio < 1 or not 0 < self.high_ratio <= 1:
            raise EdgeDetectionError(f"threshold ratios out of range: low={self.low_ratio}, high={self.high_ratio}")
        if self.low_ratio >= self.high_ratio:
            raise EdgeDetectionError(f"low_ratio ({self.low_ratio}) must be below high_ratio ({self.high_ratio})")
        if self.kernel_radius is None:
            object.__setattr__(self, "kernel_radius", max(1, math.ceil(3 * self.sigma)))
        elif self.kernel_radius < 1:
            raise EdgeDetectionError(f"kernel_radius must be >= 1, got {self.kernel_radius}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EdgeMap:
    """Binary edge grid with the image and parameters it came from."""
    values: np.ndarray
    source: str = ""
    params: CannyParams = field(default_factory=CannyParams)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def as_float32(self) -> np.ndarray:
        return self.values.astype(np.float32)

    def to_pgm_samples(self) -> np.ndarray:
        return (self.values > 0).astype(np.uint8) * 255


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_blur(image: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    if sigma <= 0:
        raise EdgeDetectionError(f"sigma must be positive, got {sigma}")
    kernel = gaussian_kernel(sigma, radius)
    blurred = ndimage.correlate1d(np.asarray(image, dtype=np.float64), kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(blurred, kernel, axis=1, mode="reflect")


def sobel_gradients(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns gx, gy, magnitude and the direction bin (0, 45, 90, 135 degrees -> 0..3)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] < 3 or image.shape[1] < 3:
        raise EdgeDetectionError(f"sobel needs at least 3x3 pixels, got {image.shape}")
    # separable: the central difference runs first, so flat regions give exactly 0
    gx = ndimage.sobel(image, axis=1, mode="reflect")
    gy = ndimage.sobel(image, axis=0, mode="reflect")
    magnitude = np.sqrt(gx * gx + gy * gy)
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    direction = (np.round(angle / 45.0).astype(np.int64) % 4).astype(np.uint8)
    return gx, gy, magnitude, direction


def _shifted(grid: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """grid[i + dy, j + dx], zero outside."""
    h, w = grid.shape
    out = np.zeros_like(grid)
    out[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)] = \
        grid[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)]
    return out


def non_max_suppression(magnitude: np.ndarray, direction: np.ndarray) -> np.ndarray:
    if magnitude.shape != direction.shape:
        raise EdgeDetectionError(f"magnitude {magnitude.shape} and direction {direction.shape} differ")
    keep = np.zeros(magnitude.shape, dtype=bool)
    for bin_id, (dy, dx) in _DIRECTION_OFFSETS.items():
        ahead = _shifted(magnitude, dy, dx)
        behind = _shifted(magnitude, -dy, -dx)
        keep |= (direction == bin_id) & (magnitude >= ahead) & (magnitude >= behind)
    keep[0, :] = keep[-1, :] = False
    keep[:, 0] = keep[:, -1] = False
    return np.where(keep, magnitude, 0.0)


def hysteresis(suppressed: np.ndarray, low: float, high: float) -> np.ndarray:
    if low >= high:
        raise EdgeDetectionError(f"low threshold ({low}) must be below high threshold ({high})")
    candidates = (suppressed >= low) & (suppressed > 0)
    strong = candidates & (suppressed >= high)
    if not strong.any():
        return np.zeros(suppressed.shape, dtype=np.float32)
    components, _ = ndimage.label(candidates, structure=np.ones((3, 3), dtype=bool))
    anchored = np.unique(components[strong])
    return np.isin(components, anchored[anchored > 0]).astype(np.float32)


def extract_edges(image: np.ndarray, params: CannyParams = CannyParams(), source: str = "") -> EdgeMap:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 3 or image.shape[1] < 3:
        raise EdgeDetectionError(f"edge extraction needs a 2-D image of at least 3x3, got {image.shape}")
    blurred = gaussian_blur(image, params.sigma, params.kernel_radius)
    _, _, magnitude, direction = sobel_gradients(blurred)
    suppressed = non_max_suppression(magnitude, direction)
    peak = float(magnitude.max())
    if peak < MIN_PEAK:
        return EdgeMap(np.zeros(image.shape, dtype=np.float32), source, params)
    values = hysteresis(suppressed, params.low_ratio * peak, params.high_ratio * peak)
    logger.debug("%s: %d edge pixels", source or "image", int(values.sum()))
    return EdgeMap(values, source, params)


def edges_from_file(path, params: CannyParams = CannyParams()) -> EdgeMap:
    return extract_edges(load_image(path), params, source=str(path))


def write_edge_pgm(edge_map: EdgeMap, path):
    """8-bit PGM, 255 on edges and 0 elsewhere."""
    write_pgm(path, edge_map.to_pgm_samples(), 255)
