"""Seeded synthetic PCB-like images for toy training and smoke tests."""
from __future__ import annotations

import numpy as np

from .imaging import round_to_uint8

_SUBSTRATE = np.array([28.0, 92.0, 48.0])
_COPPER = np.array([196.0, 160.0, 84.0])
_PAD = np.array([220.0, 220.0, 210.0])


def pcb_image(height: int, width: int, seed: int, n_traces: int | None = None) -> np.ndarray:
    """Green substrate with axis-aligned copper traces and round pads, plus mild noise."""
    rng = np.random.default_rng(seed)
    img = np.empty((height, width, 3))
    img[:] = _SUBSTRATE
    yy, xx = np.mgrid[:height, :width]
    n_traces = n_traces if n_traces is not None else max(2, (height * width) // 600)
    for _ in range(n_traces):
        t = int(rng.integers(2, max(3, min(height, width) // 10 + 3)))
        if rng.random() < 0.5:
            y = int(rng.integers(0, height))
            x0, x1 = sorted(rng.integers(0, width, size=2))
            img[max(0, y - t // 2):y + t // 2 + 1, x0:x1 + 1] = _COPPER
        else:
            x = int(rng.integers(0, width))
            y0, y1 = sorted(rng.integers(0, height, size=2))
            img[y0:y1 + 1, max(0, x - t // 2):x + t // 2 + 1] = _COPPER
    for _ in range(max(1, n_traces // 2)):
        cy, cx = rng.integers(0, height), rng.integers(0, width)
        r = rng.uniform(2, max(3, min(height, width) / 8))
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = _PAD
    img += rng.normal(0, 4.0, size=img.shape)
    return round_to_uint8(img)
