"""Sobel and Canny edge extraction, and the edge-augmented network input."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import image_to_tensor, round_to_uint8, to_gray

SOBEL_X = np.array([[-1, 0, 1],
                    [-2, 0, 2],
                    [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = np.array([[-1, -2, -1],
                    [0, 0, 0],
                    [1, 2, 1]], dtype=np.float64)
# largest |response| of either kernel on 0-255 input
SOBEL_NORM = 1020.0

# scipy "mirror" == reflect without repeating the edge sample (d c b | a b c d)
_BORDER = "mirror"


@dataclass(frozen=True)
class CannyParams:
    sigma: float = 1.4
    ksize: int = 5
    low: float = 100.0
    high: float = 200.0

    def __post_init__(self):
        if not 0 < self.low <= self.high:
            raise ValueError(f"thresholds must satisfy 0 < low <= high, got {self.low}/{self.high}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.ksize < 3 or self.ksize % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 3, got {self.ksize}")


@dataclass
class EdgeMap:
    mode: str                 # "canny_binary" or "sobel_xy"
    data: np.ndarray          # (H, W) {0,1} uint8, or (2, H, W) float in [-1, 1]
    magnitude: np.ndarray
    direction: np.ndarray


def _check_gray(gray) -> np.ndarray:
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {gray.shape}")
    return gray


def gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    """1-D Gaussian taps, renormalized to sum to 1.

    The 2-D kernel is ``np.outer(k, k)``; sampling the separable factors
    and normalizing each gives the same result as normalizing the 2-D grid.
    """
    if ksize % 2 == 0 or ksize < 1:
        raise ValueError(f"kernel size must be odd, got {ksize}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = np.arange(ksize) - ksize // 2
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(gray, sigma: float = 1.4, ksize: int = 5) -> np.ndarray:
    gray = _check_gray(gray)
    k = gaussian_kernel(sigma, ksize)
    out = ndimage.correlate1d(gray, k, axis=0, mode=_BORDER)
    return ndimage.correlate1d(out, k, axis=1, mode=_BORDER)


def sobel_gradients(gray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlate with the two Sobel kernels exactly as written above."""
    gray = _check_gray(gray)
    return (ndimage.correlate(gray, SOBEL_X, mode=_BORDER),
            ndimage.correlate(gray, SOBEL_Y, mode=_BORDER))


def gradient_polar(gx, gy) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude and full-quadrant direction; direction is 0 where magnitude is 0."""
    gx, gy = np.asarray(gx, dtype=np.float64), np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape:
        raise ValueError(f"gradient shapes differ: {gx.shape} vs {gy.shape}")
    mag = np.hypot(gx, gy)
    theta = np.where(mag == 0, 0.0, np.arctan2(gy, gx))
    return mag, theta


# neighbor offsets (dy, dx) along each quantized gradient direction (y points down)
_DIRECTIONS = {
    0: (0, 1),     # horizontal gradient -> compare left/right
    45: (1, 1),
    90: (1, 0),
    135: (1, -1),
}


def quantize_direction(theta: np.ndarray) -> np.ndarray:
    deg = np.mod(np.degrees(theta), 180.0)
    q = np.full(deg.shape, 0, dtype=np.int16)
    q[(deg >= 22.5) & (deg < 67.5)] = 45
    q[(deg >= 67.5) & (deg < 112.5)] = 90
    q[(deg >= 112.5) & (deg < 157.5)] = 135
    return q


def non_maximum_suppression(mag: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels that are local maxima along the quantized direction.

    A pixel must strictly exceed its neighbor on the negative side and be at
    least equal to the one on the positive side, so a plateau two pixels
    wide keeps exactly one of them.
    """
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="reflect" if min(h, w) > 1 else "edge")
    q = quantize_direction(theta)
    keep = np.zeros(mag.shape, dtype=bool)
    for angle, (dy, dx) in _DIRECTIONS.items():
        ahead = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        behind = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= (q == angle) & (mag > behind) & (mag >= ahead)
    return keep


def hysteresis(strong: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Keep every candidate 8-connected (through candidates) to a strong pixel."""
    labels, n = ndimage.label(candidates, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(candidates.shape, dtype=bool)
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong & candidates])] = True
    seeded[0] = False
    return seeded[labels]


def canny(gray, params: CannyParams = CannyParams()) -> EdgeMap:
    smooth = gaussian_blur(gray, params.sigma, params.ksize)
    gx, gy = sobel_gradients(smooth)
    mag, theta = gradient_polar(gx, gy)
    thin = non_maximum_suppression(mag, theta)
    strong = thin & (mag > params.high)
    candidates = thin & (mag >= params.low)
    edges = hysteresis(strong, candidates)
    return EdgeMap("canny_binary", edges.astype(np.uint8), mag, theta)


def sobel_edges(gray) -> EdgeMap:
    gx, gy = sobel_gradients(gray)
    mag, theta = gradient_polar(gx, gy)
    return EdgeMap("sobel_xy", np.stack([gx, gy]) / SOBEL_NORM, mag, theta)


def build_sr_input(rgb: np.ndarray, mode: str = "canny",
                   params: CannyParams = CannyParams()) -> np.ndarray:
    """RGB/255 in channels 0-2, followed by the edge channel(s) for ``mode``."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {rgb.shape}")
    base = image_to_tensor(rgb)
    if mode == "none":
        return base
    gray = to_gray(rgb)
    if mode == "canny":
        extra = canny(gray, params).data[None].astype(np.float32)
    elif mode == "sobel":
        extra = sobel_edges(gray).data.astype(np.float32)
    else:
        raise ValueError(f"unknown edge mode {mode!r}")
    return np.concatenate([base, extra], axis=0)


def edge_map_to_image(edge: EdgeMap) -> np.ndarray:
    """8-bit rendering: binary map x255, or [G_x | G_y] side by side mapped [-1,1] -> [0,255]."""
    if edge.mode == "canny_binary":
        return (edge.data * 255).astype(np.uint8)
    gx, gy = ((edge.data + 1.0) * 127.5)
    return round_to_uint8(np.concatenate([gx, gy], axis=1))
