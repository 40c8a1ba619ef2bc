"""Composite depth loss: log-L1 depth term, block-gradient term, SSIM weight.

Every function accepts depth maps shaped (H, W) or batched (N, H, W).  Per-image
quantities are reduced over the last two axes; batch results are averaged.
"""

from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import numpy as np

from .errors import DomainError, ParameterError, ShapeError
from .tensor import Tensor, absolute, as_tensor, clip, log, mean, window_mean


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.8
    theta: float = 0.5
    block_size: int = 2
    depth_range: float = 80.0
    ssim_c1: Optional[float] = None
    ssim_c2: Optional[float] = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha and beta must be nonnegative")
        if not self.theta > 0:
            raise ParameterError("theta must be positive")
        if self.block_size < 1:
            raise ParameterError("block size must be a positive integer")
        if not self.depth_range > 0:
            raise ParameterError("depth range must be positive")

    @property
    def c1(self) -> float:
        return (0.01 * self.depth_range) ** 2 if self.ssim_c1 is None else self.ssim_c1

    @property
    def c2(self) -> float:
        return (0.03 * self.depth_range) ** 2 if self.ssim_c2 is None else self.ssim_c2


@dataclass(frozen=True)
class Ablation:
    """Switches that each remove one component; all False is the full method."""

    no_camb: bool = False
    no_grad_loss: bool = False
    no_diag: bool = False
    no_ssim_weight: bool = False


class GradientMaps(NamedTuple):
    gx: Tensor
    gy: Tensor
    gdiag: Tensor


def _check_pair(y, yhat):
    y, yhat = as_tensor(y), as_tensor(yhat)
    if y.shape != yhat.shape:
        raise ShapeError(f"ground truth {y.shape} and prediction {yhat.shape} differ")
    if y.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (N, H, W) depth maps, got {y.shape}")
    return y, yhat


def f_log(x, theta: float):
    """ln(x + theta) for x >= 0; works on floats and Tensors."""
    if not theta > 0:
        raise ParameterError("theta must be positive")
    if isinstance(x, Tensor):
        if np.any(x.data < 0):
            raise DomainError("f_log argument must be nonnegative")
        return log(x + theta)
    if x < 0:
        raise DomainError(f"f_log argument must be nonnegative, got {x}")
    return float(np.log(x + theta))


def _image_mean(x: Tensor) -> Tensor:
    return mean(x, axis=(-2, -1))


def depth_loss_per_image(y, yhat, theta: float) -> Tensor:
    y, yhat = _check_pair(y, yhat)
    return _image_mean(f_log(absolute(y - yhat), theta))


def depth_loss(y, yhat, theta: float = 0.5) -> Tensor:
    return mean(depth_loss_per_image(y, yhat, theta))


def block_means(img, b: int) -> Tensor:
    """Means of every b x b block, sliding with step 1: (H-b+1) x (W-b+1)."""
    return window_mean(as_tensor(img), b)


def block_gradients(img, b: int) -> GradientMaps:
    """Differences between a block and its right, lower and lower-right neighbours.

    All three maps cover the common valid region of (H-b) x (W-b) anchors.
    """
    img = as_tensor(img)
    h, w = img.shape[-2:]
    if b < 1 or b > min(h, w) - 1:
        raise ShapeError(f"block size {b} leaves no neighbouring blocks in a {h}x{w} map")
    m = block_means(img, b)
    base = m[..., :-1, :-1]
    return GradientMaps(m[..., :-1, 1:] - base, m[..., 1:, :-1] - base, m[..., 1:, 1:] - base)


def grad_loss_per_image(y, yhat, b: int, theta: float, diagonal: bool = True) -> Tensor:
    y, yhat = _check_pair(y, yhat)
    gt, pr = block_gradients(y, b), block_gradients(yhat, b)
    terms = f_log(absolute(gt.gx - pr.gx), theta) + f_log(absolute(gt.gy - pr.gy), theta)
    if diagonal:
        terms = terms + f_log(absolute(gt.gdiag - pr.gdiag), theta)
    return _image_mean(terms)


def grad_loss(y, yhat, b: int = 2, theta: float = 0.5, diagonal: bool = True) -> Tensor:
    return mean(grad_loss_per_image(y, yhat, b, theta, diagonal))


def ssim_per_image(y, yhat, cfg: LossConfig = LossConfig()) -> Tensor:
    """Single-window SSIM from whole-image statistics, clamped to [0, 1]."""
    y, yhat = _check_pair(y, yhat)
    mu_y = mean(y, axis=(-2, -1), keepdims=True)
    mu_p = mean(yhat, axis=(-2, -1), keepdims=True)
    dy, dp = y - mu_y, yhat - mu_p
    var_y = _image_mean(dy * dy)
    var_p = _image_mean(dp * dp)
    cov = _image_mean(dy * dp)
    mu_y, mu_p = _image_mean(mu_y), _image_mean(mu_p)
    c1, c2 = cfg.c1, cfg.c2
    num = (2.0 * mu_y * mu_p + c1) * (2.0 * cov + c2)
    den = (mu_y * mu_y + mu_p * mu_p + c1) * (var_y + var_p + c2)
    return clip(num / den, 0.0, 1.0)


def ssim(y, yhat, cfg: LossConfig = LossConfig()) -> Tensor:
    return mean(ssim_per_image(y, yhat, cfg))


def loss_terms(y, yhat, cfg: LossConfig = LossConfig(),
               toggles: Ablation = Ablation()) -> Dict[str, Tensor]:
    """Per-batch mean of the total loss and its parts (lambda, depth, grad)."""
    y, yhat = _check_pair(y, yhat)
    d = depth_loss_per_image(y, yhat, cfg.theta)
    inner = cfg.alpha * d
    if toggles.no_grad_loss:
        g = None
    else:
        g = grad_loss_per_image(y, yhat, cfg.block_size, cfg.theta, diagonal=not toggles.no_diag)
        inner = inner + cfg.beta * g
    if toggles.no_ssim_weight:
        lam = None
        total = inner
    else:
        lam = 1.0 - ssim_per_image(y, yhat, cfg)
        total = lam * inner
    out = {"total": mean(total), "depth": mean(d)}
    out["grad"] = mean(g) if g is not None else as_tensor(0.0)
    out["lambda"] = mean(lam) if lam is not None else as_tensor(1.0)
    return out


def total_loss(y, yhat, cfg: LossConfig = LossConfig(), toggles: Ablation = Ablation()) -> Tensor:
    return loss_terms(y, yhat, cfg, toggles)["total"]
