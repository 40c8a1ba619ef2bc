"""Toy encoder-decoder with CAMB-equipped skip connections, plus Adam."""

import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .camb import CambParams, camb_forward, init_camb
from .errors import ContractError, ParameterError, ShapeError
from .tensor import Tensor, avgpool2, concat, conv2d, relu, upsample_nearest


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    input_channels: int = 3
    reduction: int = 4
    p: float = 3.0
    use_camb: bool = True
    depth_scale: float = 80.0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) < 2:
            raise ParameterError("need at least two encoder stages")
        if not self.depth_scale > 0:
            raise ParameterError("depth_scale must be positive")
        if self.p < 1:
            raise ParameterError(f"p must be >= 1, got {self.p}")
        if self.use_camb:
            for c in self.stage_channels:
                if c % self.reduction:
                    raise ParameterError(f"reduction {self.reduction} does not divide {c} channels")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)


@dataclass
class ModelParams:
    """Flat, ordered registry of named parameter tensors."""

    config: ModelConfig
    registry: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.registry[name]

    def names(self) -> List[str]:
        return list(self.registry)

    def count(self) -> int:
        return sum(t.size for t in self.registry.values())

    def camb(self, stage: int) -> CambParams:
        prefix = f"camb{stage}."
        tensors = {n[len(prefix):]: t for n, t in self.registry.items() if n.startswith(prefix)}
        return CambParams(**tensors, p=self.config.p, reduction=self.config.reduction)

    def with_tensors(self, tensors: Dict[str, Tensor]) -> "ModelParams":
        return ModelParams(self.config, {n: tensors[n] for n in self.registry})


# initial head bias keeps the output relu active at the start of training
HEAD_BIAS_INIT = 0.5


def _stream(seed: int, name: str) -> np.random.Generator:
    # one generator per named group so ablations share every common weight
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _conv_params(rng, k, cin, cout, dtype, bias=0.0):
    limit = np.sqrt(6.0 / (k * k * cin + k * k * cout))
    kernel = Tensor(rng.uniform(-limit, limit, size=(k, k, cin, cout)).astype(dtype), requires_grad=True)
    return kernel, Tensor(np.full(cout, bias, dtype=dtype), requires_grad=True)


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Seeded Glorot-uniform initialisation in a fixed registry order.

    Order: encoder stages, CAMB blocks (shallow to deep), decoder stages
    (deep to shallow), 1x1 head.  Biases start at zero except the head's.
    """
    reg: Dict[str, Tensor] = {}
    chans = config.stage_channels
    cin = config.input_channels
    for s, c in enumerate(chans):
        reg[f"enc{s}.kernel"], reg[f"enc{s}.bias"] = _conv_params(_stream(seed, f"enc{s}"), 3, cin, c, dtype)
        cin = c
    if config.use_camb:
        for s, c in enumerate(chans):
            block = init_camb(c, config.reduction, config.p, rng=_stream(seed, f"camb{s}"), dtype=dtype)
            for name, t in block.tensors().items():
                reg[f"camb{s}.{name}"] = t
    x_ch = chans[-1]
    for s in reversed(range(config.num_stages)):
        reg[f"dec{s}.kernel"], reg[f"dec{s}.bias"] = _conv_params(
            _stream(seed, f"dec{s}"), 3, x_ch + chans[s], chans[s], dtype)
        x_ch = chans[s]
    reg["head.kernel"], reg["head.bias"] = _conv_params(
        _stream(seed, "head"), 1, chans[0], 1, dtype, bias=HEAD_BIAS_INIT)
    return ModelParams(config, reg)


def encoder_forward(image: Tensor, params: ModelParams) -> Tuple[Tensor, List[Tensor]]:
    h, w = image.shape[-3:-1]
    factor = 2 ** params.config.num_stages
    if h % factor or w % factor:
        raise ShapeError(f"image {h}x{w} not divisible by {factor}")
    if image.shape[-1] != params.config.input_channels:
        raise ShapeError(f"image has {image.shape[-1]} channels, model expects "
                         f"{params.config.input_channels}")
    x = image
    skips = []
    for s in range(params.config.num_stages):
        x = relu(conv2d(x, params[f"enc{s}.kernel"], params[f"enc{s}.bias"], stride=1, padding=1))
        skips.append(x)
        x = avgpool2(x)
    return x, skips


def decoder_forward(bottleneck: Tensor, skips: List[Tensor], params: ModelParams) -> Tensor:
    cfg = params.config
    if len(skips) != cfg.num_stages:
        raise ShapeError(f"expected {cfg.num_stages} skips, got {len(skips)}")
    x = bottleneck
    for s in reversed(range(cfg.num_stages)):
        skip = skips[s]
        if skip.shape[-1] != cfg.stage_channels[s]:
            raise ShapeError(f"skip {s} has {skip.shape[-1]} channels, expected {cfg.stage_channels[s]}")
        if cfg.use_camb:
            skip = camb_forward(skip, params.camb(s))
        up = upsample_nearest(x, 2)
        if up.shape[:-1] != skip.shape[:-1]:
            raise ShapeError(f"decoder stage {s}: upsampled {up.shape} vs skip {skip.shape}")
        x = relu(conv2d(concat(up, skip, axis=-1), params[f"dec{s}.kernel"], params[f"dec{s}.bias"],
                        stride=1, padding=1))
    depth = relu(conv2d(x, params["head.kernel"], params["head.bias"]))
    return depth * cfg.depth_scale if cfg.depth_scale != 1.0 else depth


def model_forward(image: Tensor, params: ModelParams) -> Tensor:
    """Image (…, H, W, 3) -> nonnegative depth (…, H, W, 1)."""
    bottleneck, skips = encoder_forward(image, params)
    return decoder_forward(bottleneck, skips, params)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({n: np.zeros_like(t.data) for n, t in params.registry.items()},
                   {n: np.zeros_like(t.data) for n, t in params.registry.items()}, 0)


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    missing = [n for n in params.registry if n not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters: {', '.join(missing)}")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_t, new_m, new_v = {}, {}, {}
    for name, p in params.registry.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = (beta1 * m + (1.0 - beta1) * g).astype(p.dtype)
        v = (beta2 * v + (1.0 - beta2) * (g * g)).astype(p.dtype)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_t[name] = Tensor((p.data - update).astype(p.dtype), requires_grad=True)
        new_m[name], new_v[name] = m, v
    return params.with_tensors(new_t), AdamState(new_m, new_v, t)


def param_grads(params: ModelParams, leaf_grads: Dict[Tensor, np.ndarray]) -> Dict[str, np.ndarray]:
    """Map a leaf-keyed gradient map back to registry names (zeros if unused)."""
    return {n: leaf_grads.get(t, np.zeros_like(t.data)) for n, t in params.registry.items()}


def camb_disabled(config: ModelConfig) -> ModelConfig:
    return replace(config, use_camb=False)
