"""Resolved run configuration and the LR -> SR image path shared by CLI commands."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .edges import CannyParams, build_sr_input
from .imaging import tensor_to_image
from .nn.network import Network, NetworkConfig


@dataclass
class PipelineConfig:
    edge_mode: str = "canny"
    canny_low: float = 100.0
    canny_high: float = 200.0
    canny_sigma: float = 1.4
    canny_ksize: int = 5
    n_blocks: int = 16
    filters: int = 64
    scale: int = 4
    variant: str = "esrpcb"
    preset: str = "toy"
    fusion_method: str = "wbf"
    iou_thr: float = 0.55
    conf_mode: str = "avg_min"
    soft_sigma: float = 0.5
    soft_mode: str = "gaussian"
    score_floor: float = 0.001
    seed: int = 0
    paths: dict = field(default_factory=dict)

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(n_blocks=self.n_blocks, filters=self.filters, scale=self.scale,
                             edge_mode=self.edge_mode, variant=self.variant)

    @property
    def canny(self) -> CannyParams:
        return CannyParams(sigma=self.canny_sigma, ksize=self.canny_ksize,
                           low=self.canny_low, high=self.canny_high)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        flat = dict(d)
        flat.update(flat.pop("network", {}) or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**flat)


def default_seed() -> int:
    env = os.environ.get("ESRPCB_SEED")
    return int(env) if env not in (None, "") else 0


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """File values first, then non-None ``overrides``; seed falls back to $ESRPCB_SEED."""
    data = {}
    if path:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    if "seed" not in data:
        data["seed"] = default_seed()
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    cfg = PipelineConfig.from_dict(data)
    cfg.network  # validates
    cfg.canny
    return cfg


def super_resolve(net: Network, lr_rgb: np.ndarray, canny: CannyParams = CannyParams()) -> np.ndarray:
    """Edge-augment an 8-bit LR image, run the network and quantize the x4 result."""
    x = build_sr_input(lr_rgb, net.config.edge_mode, canny)
    return tensor_to_image(net.forward(x))


def crop_to_multiple(img: np.ndarray, k: int = 4) -> np.ndarray:
    h, w = img.shape[:2]
    return img[:h - h % k, :w - w % k]
