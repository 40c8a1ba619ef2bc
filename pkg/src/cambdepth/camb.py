"""Convolutional attention mechanism block (CAMB).

Channel attention from globally power-pooled features through a three-layer
MLP, then spatial attention from channel-wise power pooling through a 7x7
convolution; the attended feature is added back onto the input.
"""

from dataclasses import dataclass, fields
from typing import Dict, Optional

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import (Tensor, add, broadcast_mul, conv2d, dense, pap_channel, pap_global,
                     relu, reshape, sigmoid)

SPATIAL_KERNEL = 7


@dataclass
class CambParams:
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    mlp_w3: Tensor
    mlp_b3: Tensor
    spatial_kernel: Tensor
    spatial_bias: Tensor
    p: float = 3.0
    reduction: int = 4

    TENSOR_FIELDS = ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mlp_w3", "mlp_b3",
                     "spatial_kernel", "spatial_bias")

    def __post_init__(self):
        if self.p < 1:
            raise ParameterError(f"power-pooling exponent must be >= 1, got {self.p}")
        c, hidden = self.mlp_w1.shape
        expected = {
            "mlp_w1": (c, hidden), "mlp_b1": (hidden,),
            "mlp_w2": (hidden, hidden), "mlp_b2": (hidden,),
            "mlp_w3": (hidden, c), "mlp_b3": (c,),
            "spatial_kernel": (SPATIAL_KERNEL, SPATIAL_KERNEL, 1, 1), "spatial_bias": (1,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"CambParams.{name}: expected {shape}, got {getattr(self, name).shape}")

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[0]

    def tensors(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.TENSOR_FIELDS}

    def replace(self, **tensors) -> "CambParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(tensors)
        return CambParams(**kw)


def _glorot(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def init_camb(channels: int, reduction: int = 4, p: float = 3.0,
              rng: Optional[np.random.Generator] = None, dtype=np.float64) -> CambParams:
    """Glorot-uniform weights, zero biases."""
    if reduction < 1 or channels % reduction:
        raise ParameterError(f"reduction ratio {reduction} must divide channel count {channels}")
    rng = np.random.default_rng(0) if rng is None else rng
    hidden = channels // reduction
    k = SPATIAL_KERNEL

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    return CambParams(
        mlp_w1=_glorot(rng, channels, hidden, (channels, hidden), dtype), mlp_b1=zeros(hidden),
        mlp_w2=_glorot(rng, hidden, hidden, (hidden, hidden), dtype), mlp_b2=zeros(hidden),
        mlp_w3=_glorot(rng, hidden, channels, (hidden, channels), dtype), mlp_b3=zeros(channels),
        spatial_kernel=_glorot(rng, k * k, k * k, (k, k, 1, 1), dtype), spatial_bias=zeros(1),
        p=p, reduction=reduction,
    )


def channel_attention(F: Tensor, params: CambParams) -> Tensor:
    """Per-channel weights in (0, 1), shape (..., 1, 1, C)."""
    if F.shape[-1] != params.channels:
        raise ShapeError(f"channel_attention: feature has {F.shape[-1]} channels, "
                         f"block expects {params.channels}")
    pooled = pap_global(F, params.p)
    lead = pooled.shape[:-3]
    v = reshape(pooled, lead + (params.channels,))
    v = relu(dense(v, params.mlp_w1, params.mlp_b1))
    v = relu(dense(v, params.mlp_w2, params.mlp_b2))
    v = dense(v, params.mlp_w3, params.mlp_b3)
    return sigmoid(reshape(v, lead + (1, 1, params.channels)))


def spatial_attention(F_sa_in: Tensor, params: CambParams) -> Tensor:
    """Per-position weights in (0, 1), shape (..., H, W, 1)."""
    pooled = pap_channel(F_sa_in, params.p)
    pad = SPATIAL_KERNEL // 2
    return sigmoid(conv2d(pooled, params.spatial_kernel, params.spatial_bias, stride=1, padding=pad))


def camb_forward(F: Tensor, params: CambParams) -> Tensor:
    F_sa_in = broadcast_mul(channel_attention(F, params), F)
    F_am = broadcast_mul(spatial_attention(F_sa_in, params), F_sa_in)
    return add(F_am, F)
