"""Other ways to produce extra distillation samples around a base sample.

Used to compare boundary supporting samples against random noise, FGSM,
DeepFool and a penalised L2 descent on the same logit-gap loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attack import AttackResult, AttackStatus, _check_classes, _direction, loss_and_gradient
from .models import ClassifierModel

KINDS = ("random-noise", "fgsm", "deepfool", "l2-minimize")


@dataclass(frozen=True)
class GeneratorConfig:
    target_norm: float = 0.1  # random-noise expected perturbation norm
    fgsm_step: float = 0.05
    deepfool_overshoot: float = 0.02
    max_iter: int = 10
    l2_lr: float = 0.3
    l2_penalty: float = 0.1


def expected_gaussian_norm(dim: int) -> float:
    """E||z|| for z ~ N(0, I_dim)."""
    return math.sqrt(2.0) * math.exp(math.lgamma((dim + 1) / 2) - math.lgamma(dim / 2))


def random_noise(x: np.ndarray, target_norm: float, rng: np.random.Generator) -> np.ndarray:
    """Add isotropic Gaussian noise whose expected norm is ``target_norm`` (per row)."""
    x = np.asarray(x, dtype=np.float64)
    dim = int(np.prod(x.shape[1:]))
    sigma = target_norm / expected_gaussian_norm(dim)
    return x + sigma * rng.standard_normal(x.shape)


def fgsm(model: ClassifierModel, x: np.ndarray, base_classes, step: float) -> np.ndarray:
    """One signed-gradient ascent step on the cross-entropy of the base class."""
    x = np.asarray(x, dtype=np.float64)
    b = np.atleast_1d(np.asarray(base_classes, dtype=np.int64))
    xt = ad.Tensor(x, requires_grad=True)
    ce = ad.scale(ad.sum_(ad.take_rows(ad.log_softmax(model.forward(xt)), b)), -1.0)
    g = ad.backward(ce, [xt])[xt]
    return x + step * np.sign(g)


def _result(status, x0, xf, b, k, iters, loss_prev, loss_now) -> AttackResult:
    return AttackResult(status, x0.copy(), xf.copy(), int(b), int(k), iters, float(loss_now), float(loss_prev))


def deepfool(
    model: ClassifierModel,
    x: np.ndarray,
    base_classes,
    target_classes,
    overshoot: float = 0.02,
    max_iter: int = 10,
) -> list[AttackResult]:
    """Pairwise DeepFool: jump to the linearised ``b``/``k`` boundary, scaled by ``1 + overshoot``.

    The accumulated perturbation is re-linearised until the gap turns negative.
    """
    x0 = np.array(x, dtype=np.float64)
    b, k = _check_classes(model, base_classes, target_classes)
    n = x0.shape[0]
    out: list[AttackResult | None] = [None] * n
    rows = np.arange(n)
    total = np.zeros_like(x0)
    cur = x0.copy()
    loss, grad, _ = loss_and_gradient(model, cur, b, k)
    for j in np.flatnonzero(loss <= 0):
        out[j] = _result(AttackStatus.SUCCESS, x0[j], cur[j], b[j], k[j], 0, loss[j], loss[j])
    live = loss > 0
    for i in range(max_iter):
        rows = rows[live]
        if rows.size == 0:
            break
        loss, grad = loss[live], grad[live]
        norms, _ = _direction(grad)
        bad = norms < 1e-12
        for j in np.flatnonzero(bad):
            r = rows[j]
            out[r] = _result(AttackStatus.DEGENERATE, x0[r], cur[r], b[r], k[r], i, loss[j], loss[j])
        rows, loss, grad, norms = rows[~bad], loss[~bad], grad[~bad], norms[~bad]
        if rows.size == 0:
            break
        shape = (-1,) + (1,) * (grad.ndim - 1)
        total[rows] -= (loss / norms**2).reshape(shape) * grad
        cur[rows] = x0[rows] + (1.0 + overshoot) * total[rows]
        prev = loss
        loss, grad, _ = loss_and_gradient(model, cur[rows], b[rows], k[rows])
        done = loss < 0
        for j in np.flatnonzero(done):
            r = rows[j]
            out[r] = _result(AttackStatus.SUCCESS, x0[r], cur[r], b[r], k[r], i + 1, prev[j], loss[j])
        if i + 1 >= max_iter:
            for j in np.flatnonzero(~done):
                r = rows[j]
                out[r] = _result(AttackStatus.MAX_ITER, x0[r], cur[r], b[r], k[r], i + 1, prev[j], loss[j])
        live = ~done
    return out  # type: ignore[return-value]


def l2_minimize(
    model: ClassifierModel,
    x: np.ndarray,
    base_classes,
    target_classes,
    lr: float = 0.3,
    penalty: float = 0.1,
    max_iter: int = 10,
) -> list[AttackResult]:
    """Plain gradient descent on ``L_k(x) + penalty * ||x - x0||^2`` until the gap turns negative."""
    x0 = np.array(x, dtype=np.float64)
    b, k = _check_classes(model, base_classes, target_classes)
    n = x0.shape[0]
    out: list[AttackResult | None] = [None] * n
    rows = np.arange(n)
    cur = x0.copy()
    loss, grad, _ = loss_and_gradient(model, cur, b, k)
    for j in np.flatnonzero(loss <= 0):
        out[j] = _result(AttackStatus.SUCCESS, x0[j], cur[j], b[j], k[j], 0, loss[j], loss[j])
    live = loss > 0
    for i in range(max_iter):
        rows, loss, grad = rows[live], loss[live], grad[live]
        if rows.size == 0:
            break
        cur[rows] = cur[rows] - lr * (grad + 2.0 * penalty * (cur[rows] - x0[rows]))
        prev = loss
        loss, grad, _ = loss_and_gradient(model, cur[rows], b[rows], k[rows])
        done = loss < 0
        for j in np.flatnonzero(done):
            r = rows[j]
            out[r] = _result(AttackStatus.SUCCESS, x0[r], cur[r], b[r], k[r], i + 1, prev[j], loss[j])
        if i + 1 >= max_iter:
            for j in np.flatnonzero(~done):
                r = rows[j]
                out[r] = _result(AttackStatus.MAX_ITER, x0[r], cur[r], b[r], k[r], i + 1, prev[j], loss[j])
        live = ~done
    return out  # type: ignore[return-value]


def generate(
    kind: str,
    model: ClassifierModel,
    x: np.ndarray,
    base_classes,
    target_classes,
    config: GeneratorConfig = GeneratorConfig(),
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Samples of the requested ``kind`` for each row of ``x`` and a per-row usable mask."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "random-noise":
        rng = rng if rng is not None else np.random.default_rng(0)
        return random_noise(x, config.target_norm, rng), np.ones(len(x), dtype=bool)
    if kind == "fgsm":
        return fgsm(model, x, base_classes, config.fgsm_step), np.ones(len(x), dtype=bool)
    if kind == "deepfool":
        res = deepfool(model, x, base_classes, target_classes, config.deepfool_overshoot, config.max_iter)
    elif kind == "l2-minimize":
        res = l2_minimize(model, x, base_classes, target_classes, config.l2_lr, config.l2_penalty, config.max_iter)
    else:
        raise ValueError(f"unknown sample generator {kind!r}; expected one of {KINDS}")
    finals = np.stack([r.final for r in res]) if res else x[:0]
    return finals, np.array([r.success for r in res], dtype=bool)
