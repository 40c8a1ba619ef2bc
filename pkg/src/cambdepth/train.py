"""Training loop and model evaluation over in-memory samples."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import DepthSample, XorShift64Star, augment_flip
from .loss import Ablation, LossConfig, loss_terms
from .metrics import MetricsReport, aggregate, evaluate
from .network import (AdamState, ModelConfig, ModelParams, adam_step, init_model, model_forward,
                      param_grads)
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "total_loss", "lambda", "depth_loss", "grad_loss")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 300
    seed: int = 0
    zeta: float = 0.3
    eta: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def batch_stream(n: int, batch_size: int, rng: XorShift64Star):
    """Endless minibatches of indices: seeded reshuffle each epoch, remainder dropped."""
    if n < 1:
        raise ValueError("no training samples")
    batch_size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def stack(samples: Sequence[DepthSample], dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(dtype)
    depths = np.stack([s.depth for s in samples]).astype(dtype)
    return images, depths


def loss_and_grads(params: ModelParams, images: np.ndarray, depths: np.ndarray,
                   loss_cfg: LossConfig, toggles: Ablation):
    pred = model_forward(Tensor(images), params)
    pred = pred.reshape(pred.shape[:-1])
    terms = loss_terms(Tensor(depths), pred, loss_cfg, toggles)
    grads = param_grads(params, backward(terms["total"]))
    return {k: v.item() for k, v in terms.items()}, grads


def train(samples: Sequence[DepthSample], model_cfg: ModelConfig = ModelConfig(),
          loss_cfg: LossConfig = LossConfig(), toggles: Ablation = Ablation(),
          cfg: TrainConfig = TrainConfig(), params: Optional[ModelParams] = None,
          state: Optional[AdamState] = None,
          on_step: Optional[Callable[[Dict[str, float]], None]] = None):
    """Run ``cfg.steps`` Adam steps; returns (params, state, history).

    ``history`` holds one dict per step with the columns of ``LOG_COLUMNS``.
    """
    if toggles.no_camb and model_cfg.use_camb:
        raise ValueError("toggles.no_camb requires a model config with use_camb=False")
    if params is None:
        params = init_model(model_cfg, seed=cfg.seed)
    if state is None:
        state = AdamState.zeros_like(params)
    rng = XorShift64Star(cfg.seed)
    batches = batch_stream(len(samples), cfg.batch_size, rng)
    history: List[Dict[str, float]] = []
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        batch = [augment_flip(samples[i], cfg.zeta, cfg.eta, rng) for i in idx]
        images, depths = stack(batch)
        terms, grads = loss_and_grads(params, images, depths, loss_cfg, toggles)
        if not all(np.isfinite(v) for v in terms.values()):
            raise FloatingPointError(f"non-finite loss at step {step}: {terms}")
        params, state = adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        row = {"step": step, "total_loss": terms["total"], "lambda": terms["lambda"],
               "depth_loss": terms["depth"], "grad_loss": terms["grad"]}
        history.append(row)
        if on_step is not None:
            on_step(row)
        if step % 50 == 0:
            log.info("step %d total %.5f lambda %.4f", step, row["total_loss"], row["lambda"])
    return params, state, history


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries use what is available."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Depth maps (N, H, W) for images (N, H, W, 3)."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for start in range(0, len(images), batch_size):
        pred = model_forward(Tensor(images[start:start + batch_size]), params)
        out.append(pred.data[..., 0])
    return np.concatenate(out)


def evaluate_model(params: ModelParams, samples: Sequence[DepthSample],
                   min_valid_depth: float = 1e-3) -> Tuple[List[MetricsReport], MetricsReport]:
    images, depths = stack(samples)
    preds = predict(params, images)
    reports = [evaluate(p, d, min_valid_depth) for p, d in zip(preds, depths)]
    return reports, aggregate(reports)
