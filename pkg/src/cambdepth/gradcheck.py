"""Central finite-difference verification of autodiff gradients."""

from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` for the flat ``indices``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(x.copy())).item()
        flat[i] = orig - eps
        lo = f(Tensor(x.copy())).item()
        flat[i] = orig
        out[n] = (hi - lo) / (2 * eps)
    return out


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(xt)
    grads = backward(out)
    return grads.get(xt, np.zeros_like(xt.data))


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6,
               indices: Optional[Sequence[int]] = None) -> float:
    """Worst relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  ``indices`` optionally limits the
    comparison to a subset of flat coordinates of ``x`` (useful for large
    inputs).  The denominator is ``max(|a|, |b|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    a = analytic_gradient(f, x).reshape(-1)
    if indices is not None:
        a = a[np.asarray(indices)]
    n = numeric_gradient(f, x, eps, indices)
    return float(relative_error(a, n).max())


# ---------------------------------------------------------------------------
# registered checks, run by ``cambdepth gradcheck`` and the acceptance suite

OP_TOL = 1e-5
CAMB_TOL = 1e-4
PIPELINE_TOL = 1e-3


class Check(NamedTuple):
    name: str
    tolerance: float
    run: Callable[[], float]


def _positive(rng, shape):
    return rng.uniform(0.2, 2.0, size=shape)


def _op_checks(rng) -> List[Check]:
    from . import tensor as T

    checks = []

    def add(name, f, *shapes, positive=False):
        for shape in shapes:
            x = _positive(rng, shape) if positive else rng.normal(size=shape)
            checks.append(Check(f"{name}{list(shape)}", OP_TOL,
                                lambda f=f, x=x: grad_check(f, x, eps=1e-6)))

    w = {}

    def const(key, shape):
        if key not in w:
            w[key] = T.Tensor(rng.uniform(0.5, 1.5, size=shape))
        return w[key]

    def add_fixed(name, f, x):
        checks.append(Check(f"{name}{list(np.shape(x))}", OP_TOL, lambda: grad_check(f, x, eps=1e-6)))

    for k, cin, cout in ((3, 2, 3), (1, 3, 2), (3, 1, 1)):
        kern = T.Tensor(rng.normal(size=(k, k, cin, cout)))
        bias = T.Tensor(rng.normal(size=cout))
        add(f"conv2d[k{k}]", lambda x, kern=kern, bias=bias: T.tsum(T.conv2d(x, kern, bias, 1, 1) ** 2),
            (5, 5, cin), (2, 4, 6, cin))
        xin = T.Tensor(rng.normal(size=(2, 6, 6, cin)))
        for stride in (1, 2):
            add_fixed(f"conv2d.kernel[stride{stride}]",
                      lambda kk, xin=xin, stride=stride, bias=bias: T.tsum(T.conv2d(xin, kk, bias, stride, 1) ** 2),
                      rng.normal(size=(k, k, cin, cout)))
        add_fixed("conv2d.bias", lambda bb, xin=xin, kern=kern: T.tsum(T.conv2d(xin, kern, bb, 1, 1) ** 2),
                  rng.normal(size=cout))
    add("dense", lambda x: T.tsum(T.sigmoid(T.dense(x, const("d", (4, 3)), const("db", (3,))))),
        (4,), (2, 4), (3, 1, 4))
    for n, m in ((4, 3), (2, 5), (6, 1)):
        xd = T.Tensor(rng.normal(size=(2, n)))
        add_fixed("dense.weights", lambda ww, xd=xd: T.tsum(T.dense(xd, ww) ** 2), rng.normal(size=(n, m)))
        wd = T.Tensor(rng.normal(size=(n, m)))
        add_fixed("dense.bias", lambda bb, xd=xd, wd=wd: T.tsum(T.dense(xd, wd, bb) ** 2), rng.normal(size=m))
    add("sigmoid", lambda x: T.tsum(T.sigmoid(x) ** 2), (3,), (2, 3), (2, 2, 3))
    add("relu", lambda x: T.tsum(T.relu(x) ** 2), (4,), (3, 3), (2, 2, 2))
    add("pap_global", lambda x: T.tsum(T.pap_global(x, 3.0) ** 2), (3, 3, 2), (2, 4, 4, 3), (1, 2, 1),
        positive=True)
    add("pap_channel", lambda x: T.tsum(T.pap_channel(x, 3.0) ** 2), (3, 3, 2), (2, 4, 4, 3), (2, 1, 4),
        positive=True)
    add("broadcast_mul", lambda x: T.tsum((x * const("bm", (1, 1, 3))) ** 2),
        (2, 2, 3), (4, 4, 3), (2, 3, 3, 3), positive=True)
    add("broadcast_mul.small", lambda x: T.tsum((const("bm2", (4, 4, 3)) * x) ** 2), (1, 1, 3), (4, 4, 1), positive=True)
    add("add", lambda x: T.tsum((x + const("ad", (3, 3, 2))) ** 2), (3, 3, 2), (1, 1, 2), (2, 3, 3, 2), positive=True)
    add("concat", lambda x: T.tsum(T.concat(x, T.Tensor(np.ones(x.shape[:-1] + (2,)))) ** 2 * 0.5
                                    + T.tsum(T.concat(x, x) ** 3)),
        (2, 2, 1), (3, 3, 2), (2, 2, 2, 3), positive=True)
    add("upsample_nearest", lambda x: T.tsum(T.upsample_nearest(x) ** 3), (2, 2, 1), (3, 3, 2), (2, 2, 2, 2), positive=True)
    add("avgpool2", lambda x: T.tsum(T.avgpool2(x) ** 3), (2, 2, 1), (4, 4, 2), (2, 4, 6, 2), positive=True)
    add("window_mean", lambda x: T.tsum(T.window_mean(x, 2) ** 3), (3, 3), (4, 5), (2, 4, 4), positive=True)
    add("log", lambda x: T.tsum(T.log(x + 0.5)), (3,), (3, 3), (2, 2, 2), positive=True)
    add("div", lambda x: T.tsum(const("dv", (3, 3)) / x), (3, 3), (1, 3), (2, 3, 3), positive=True)
    add("sub", lambda x: T.tsum((const("sb", (3, 3)) - x) ** 2 - x), (3, 3), (1, 3), (2, 3, 3))
    add("neg", lambda x: T.tsum((-x) ** 3), (3,), (2, 3), (2, 2, 2))
    add("power", lambda x: T.tsum(x ** 2.5), (3,), (3, 3), (2, 2, 3), positive=True)
    add("abs", lambda x: T.tsum(T.absolute(x) * x), (4,), (3, 3), (2, 2, 2))
    add("clip", lambda x: T.tsum(T.clip(x, -0.5, 0.5) ** 2), (4,), (3, 3), (2, 2, 2))
    add("sum", lambda x: T.tsum(T.tsum(x, axis=-1) ** 2), (3, 2), (2, 3, 4), (2, 2, 2, 3))
    add("mean", lambda x: T.tsum(T.mean(x, axis=(-2, -1), keepdims=True) ** 2 * x), (3, 2), (2, 3, 4), (2, 2, 2, 3))
    add("reshape", lambda x: T.tsum(T.reshape(x, (-1,)) ** 3), (2, 3), (3, 2, 2), (4,), positive=True)
    add("getitem", lambda x: T.tsum(x[..., 1:, :-1] ** 3) + T.tsum(x[..., :1, :] ** 2), (3, 3), (2, 4, 5), (2, 2, 2, 2))
    return checks


def _camb_check(rng) -> Check:
    from .camb import camb_forward, init_camb
    from .tensor import tsum

    params = init_camb(8, 4, 3.0, rng=rng, dtype=np.float64)
    x = rng.uniform(0.1, 2.0, size=(6, 6, 8))
    return Check("camb_forward", CAMB_TOL,
                 lambda: grad_check(lambda t: tsum(camb_forward(t, params)), x, eps=1e-6))


def _loss_checks(rng) -> List[Check]:
    from .loss import Ablation, LossConfig, total_loss

    cfg = LossConfig(depth_range=4.0)
    checks = []
    for label, toggles in (("total_loss", Ablation()), ("total_loss[no_ssim_weight]", Ablation(no_ssim_weight=True)),
                           ("total_loss[no_diag]", Ablation(no_diag=True))):
        y = rng.uniform(0.5, 3.0, size=(8, 8))
        yhat = y + rng.normal(scale=0.5, size=(8, 8))
        checks.append(Check(label, OP_TOL, lambda y=y, yhat=yhat, toggles=toggles: grad_check(
            lambda t: total_loss(y, t, cfg, toggles), yhat, eps=1e-6)))
    return checks


def pipeline_error(seed: int = 0, size: int = 16, per_tensor: int = 3, eps: float = 1e-6) -> Dict[str, float]:
    """Worst relative error per registered parameter for model + total loss, 64-bit.

    Uses a narrow four-stage model on a ``size`` x ``size`` input and samples
    ``per_tensor`` coordinates of each parameter tensor plus the input image.
    """
    from .loss import LossConfig, total_loss
    from .network import ModelConfig, init_model, model_forward

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(stage_channels=(4, 4, 8, 8), reduction=2, depth_scale=4.0)
    params = init_model(cfg, seed=seed, dtype=np.float64)
    image = rng.uniform(0.0, 1.0, size=(size, size, 3))
    depth = rng.uniform(0.5, 4.0, size=(size, size))
    loss_cfg = LossConfig(depth_range=4.0)

    def loss_with(name):
        def f(x):
            reg = dict(params.registry)
            reg[name] = x
            pred = model_forward(Tensor(image), params.with_tensors(reg))
            return total_loss(depth, pred.reshape(pred.shape[:-1]), loss_cfg)
        return f

    errors = {}
    for name, t in params.registry.items():
        idx = rng.choice(t.size, size=min(per_tensor, t.size), replace=False)
        errors[name] = grad_check(loss_with(name), t.data, eps=eps, indices=idx)

    def on_image(x):
        pred = model_forward(x, params)
        return total_loss(depth, pred.reshape(pred.shape[:-1]), loss_cfg)

    idx = rng.choice(image.size, size=per_tensor * 4, replace=False)
    errors["<image>"] = grad_check(on_image, image, eps=eps, indices=idx)
    return errors


def default_checks(seed: int = 0) -> List[Check]:
    rng = np.random.default_rng(seed)
    checks = _op_checks(rng) + [_camb_check(rng)] + _loss_checks(rng)
    checks.append(Check("model+total_loss[16x16]", PIPELINE_TOL,
                        lambda: max(pipeline_error(seed).values())))
    return checks
