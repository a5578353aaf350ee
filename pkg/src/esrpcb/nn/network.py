"""Edge-guided super-resolution network: assembly, inference and gradients.

Layout (scale 4)::

    x -> sfe conv3x3 -> F0 -> ResCat x N -> (+ F0) -> [conv3x3 -> shuffle(2)] x 2 -> conv3x3

Each ResCat block computes ``fuse1x1(concat(x, conv2(relu(conv1(x))))) + x``.
The ``edsr`` variant swaps the block for the bias-free EDSR residual block and
adds a conv between the body and the global skip; it exists as the
complexity reference point, not as a training target.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .layers import (concat_channels, conv2d_backward, conv2d_forward, pixel_shuffle,
                     pixel_unshuffle, relu, relu_backward, split_channels)
from .tensor import DTYPE, ShapeError, StateError, ensure_batched

EDGE_CHANNELS = {"none": 0, "canny": 1, "sobel": 2}
VARIANTS = ("esrpcb", "edsr")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    n_blocks: int = 16
    filters: int = 64
    scale: int = 4
    edge_mode: str = "canny"
    variant: str = "esrpcb"

    def __post_init__(self):
        if self.scale != 4:
            raise ConfigError(f"only x4 scale is supported, got {self.scale}")
        if self.edge_mode not in EDGE_CHANNELS:
            raise ConfigError(f"edge_mode must be one of {sorted(EDGE_CHANNELS)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.n_blocks < 1 or self.filters < 1:
            raise ConfigError("n_blocks and filters must be positive")

    @property
    def input_channels(self) -> int:
        return 3 + EDGE_CHANNELS[self.edge_mode]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {k: d[k] for k in ("n_blocks", "filters", "scale", "edge_mode", "variant") if k in d}
        return cls(**known)


class ConvSpec(NamedTuple):
    name: str
    c_in: int
    c_out: int
    ksize: int
    bias: bool
    # spatial size relative to the LR input the layer runs at
    res: int


def conv_specs(config: NetworkConfig) -> list[ConvSpec]:
    """Every convolution in the network, in forward order."""
    f = config.filters
    edsr = config.variant == "edsr"
    specs = [ConvSpec("sfe", config.input_channels, f, 3, True, 1)]
    for i in range(config.n_blocks):
        specs.append(ConvSpec(f"block{i}.conv1", f, f, 3, not edsr, 1))
        specs.append(ConvSpec(f"block{i}.conv2", f, f, 3, not edsr, 1))
        if not edsr:
            specs.append(ConvSpec(f"block{i}.fuse", 2 * f, f, 1, True, 1))
    if edsr:
        specs.append(ConvSpec("body", f, f, 3, True, 1))
    specs += [
        ConvSpec("up1", f, 4 * f, 3, True, 1),
        ConvSpec("up2", f, 4 * f, 3, True, 2),
        ConvSpec("final", f, 3, 3, True, 4),
    ]
    return specs


def param_names(config: NetworkConfig) -> list[str]:
    names = []
    for spec in conv_specs(config):
        names.append(spec.name + ".w")
        if spec.bias:
            names.append(spec.name + ".b")
    return names


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for s in conv_specs(config):
        shapes[s.name + ".w"] = (s.c_out, s.c_in, s.ksize, s.ksize)
        if s.bias:
            shapes[s.name + ".b"] = (s.c_out,)
    return shapes


class Tape:
    """Activations recorded by a training forward pass."""

    def __init__(self):
        self.inputs: dict[str, np.ndarray] = {}
        self.batched = False


class Network:
    """Parameters plus the fixed layer graph described by ``config``.

    ``forward`` never mutates the network, so one instance can serve
    concurrent inference. Training updates ``params`` in place.
    """

    def __init__(self, config: NetworkConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in params:
                raise ConfigError(f"missing parameter tensor {name!r}")
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        extra = set(params) - set(expected)
        if extra:
            raise ConfigError(f"unexpected parameter tensors: {sorted(extra)}")
        self.config = config
        self.params = {name: params[name] for name in expected}

    @property
    def dtype(self):
        return self.params["sfe.w"].dtype

    def astype(self, dtype) -> "Network":
        return Network(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    def zero_(self) -> "Network":
        for v in self.params.values():
            v[...] = 0
        return self

    def _conv(self, name: str, x: np.ndarray, tape: Tape | None) -> np.ndarray:
        if tape is not None:
            tape.inputs[name] = x
        return conv2d_forward(x, self.params[name + ".w"], self.params.get(name + ".b"))

    def _conv_back(self, name: str, tape: Tape, grad: np.ndarray, grads: dict) -> np.ndarray:
        w = self.params[name + ".w"]
        has_bias = name + ".b" in self.params
        gx, gw, gb = conv2d_backward(tape.inputs[name], w, grad, has_bias=has_bias)
        grads[name + ".w"] = gw
        if has_bias:
            grads[name + ".b"] = gb
        return gx

    def _block(self, i: int, x: np.ndarray, tape: Tape | None) -> np.ndarray:
        pre = self._conv(f"block{i}.conv1", x, tape)
        if tape is not None:
            tape.inputs[f"block{i}.relu"] = pre
        branch = self._conv(f"block{i}.conv2", relu(pre), tape)
        if self.config.variant == "edsr":
            return branch + x
        return self._conv(f"block{i}.fuse", concat_channels(x, branch), tape) + x

    def _block_back(self, i: int, tape: Tape, grad: np.ndarray, grads: dict) -> np.ndarray:
        grad_x = grad
        if self.config.variant == "edsr":
            grad_branch = grad
        else:
            grad_cat = self._conv_back(f"block{i}.fuse", tape, grad, grads)
            skip, grad_branch = split_channels(grad_cat, self.config.filters)
            grad_x = grad_x + skip
        grad_r = self._conv_back(f"block{i}.conv2", tape, grad_branch, grads)
        grad_pre = relu_backward(tape.inputs[f"block{i}.relu"], grad_r)
        return grad_x + self._conv_back(f"block{i}.conv1", tape, grad_pre, grads)

    def forward(self, x: np.ndarray, record: bool = False):
        """Run the network on ``x`` (C x H x W or N x C x H x W).

        Returns the 3 x 4H x 4W output, or ``(output, tape)`` when ``record``
        is set so that :meth:`backward` can be called.
        """
        xb, added = ensure_batched(np.asarray(x))
        if xb.shape[1] != self.config.input_channels:
            raise ShapeError(f"network expects {self.config.input_channels} input channels, "
                             f"got {xb.shape[1]}")
        xb = xb.astype(self.dtype, copy=False)
        tape = Tape() if record else None

        f0 = self._conv("sfe", xb, tape)
        h = f0
        for i in range(self.config.n_blocks):
            h = self._block(i, h, tape)
        if self.config.variant == "edsr":
            h = self._conv("body", h, tape)
        h = h + f0
        h = pixel_shuffle(self._conv("up1", h, tape), 2)
        h = pixel_shuffle(self._conv("up2", h, tape), 2)
        y = self._conv("final", h, tape)

        if added:
            y = y[0]
        if tape is not None:
            tape.batched = not added
            return y, tape
        return y

    def backward(self, tape: Tape | None, grad_out: np.ndarray):
        """Reverse-mode pass. Returns ``(param_grads, input_grad)``."""
        if tape is None or not tape.inputs:
            raise StateError("backward requires a tape from forward(..., record=True)")
        g = np.asarray(grad_out, dtype=self.dtype)
        if not tape.batched:
            g = g[None]
        grads: dict[str, np.ndarray] = {}

        g = self._conv_back("final", tape, g, grads)
        g = self._conv_back("up2", tape, pixel_unshuffle(g, 2), grads)
        g_ff = self._conv_back("up1", tape, pixel_unshuffle(g, 2), grads)

        g = g_ff
        if self.config.variant == "edsr":
            g = self._conv_back("body", tape, g, grads)
        for i in reversed(range(self.config.n_blocks)):
            g = self._block_back(i, tape, g, grads)
        g_x = self._conv_back("sfe", tape, g + g_ff, grads)

        ordered = {name: grads[name] for name in self.params}
        return ordered, (g_x if tape.batched else g_x[0])

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.params.items())


def build_network(config: NetworkConfig, seed: int = 0, dtype=DTYPE) -> Network:
    """Allocate a network with Kaiming-uniform (fan-in) weights and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Network(config, params)


def count_params(net_or_config) -> int:
    config = net_or_config.config if isinstance(net_or_config, Network) else net_or_config
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def count_macs(net_or_config, h: int, w: int) -> int:
    """Multiply-accumulates for one ``h x w`` LR input.

    Each conv output element costs ``k*k*C_in`` MACs plus one for the bias,
    evaluated at the resolution the layer actually runs at. Activations,
    shuffles and additions are not counted.
    """
    config = net_or_config.config if isinstance(net_or_config, Network) else net_or_config
    total = 0
    for s in conv_specs(config):
        per_elem = s.ksize * s.ksize * s.c_in + (1 if s.bias else 0)
        total += s.c_out * (h * s.res) * (w * s.res) * per_elem
    return total


def rescat_block_params(filters: int = 64) -> int:
    """Parameter count of one ResCat block (two 3x3 convs + 1x1 fuse, all biased)."""
    conv3 = filters * filters * 9 + filters
    fuse = 2 * filters * filters + filters
    return 2 * conv3 + fuse


def rescat_forward(block_params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Apply one ResCat block given its ``conv1``/``conv2``/``fuse`` weights and biases."""
    xb, added = ensure_batched(np.asarray(x))
    f = block_params["conv1.w"].shape[1]
    if xb.shape[1] != f:
        raise ShapeError(f"ResCat block expects {f} channels, got {xb.shape[1]}")
    pre = conv2d_forward(xb, block_params["conv1.w"], block_params["conv1.b"])
    branch = conv2d_forward(relu(pre), block_params["conv2.w"], block_params["conv2.b"])
    out = conv2d_forward(concat_channels(xb, branch), block_params["fuse.w"], block_params["fuse.b"]) + xb
    return out[0] if added else out
