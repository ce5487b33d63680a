"""Iterative boundary-crossing attack that produces boundary supporting samples.

Starting from a base sample of class ``b`` the attack descends the logit gap
``L_k(x) = f_b(x) - f_k(x)`` toward target class ``k`` with a normalised step
whose length is ``lr * (L_k(x) + eps)``: long while far from the boundary,
short near it, and still positive (by ``eps``) when the gap reaches zero so
the sample actually crosses. It stops on the first of

* success: the gap changed sign from positive to negative,
* intrusion: some third class now has the strictly largest logit,
* budget: ``max_iter`` steps were taken.

Rows of a batch are attacked independently; the batched driver is the same
recursion applied to every row at once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .models import ClassifierModel

DEGENERATE_NORM = 1e-12


class DegenerateGradient(ArithmeticError):
    """The attack-loss gradient vanished, so the step direction is undefined."""


class AttackStatus(str, Enum):
    SUCCESS = "success"
    INTRUDED = "intruded"
    MAX_ITER = "max_iterations"
    DEGENERATE = "degenerate_gradient"


@dataclass(frozen=True)
class AttackConfig:
    lr: float = 0.3
    eps: float = 0.01
    max_iter: int = 10
    record_trajectory: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"attack learning rate must be positive, got {self.lr}")
        if not self.eps > 0:
            raise ValueError(f"attack offset must be positive, got {self.eps}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")


@dataclass
class AttackResult:
    status: AttackStatus
    base: np.ndarray
    final: np.ndarray
    base_class: int
    target_class: int
    iterations: int
    loss_final: float
    loss_previous: float
    intruded_class: int | None = None
    # base sample already on the target side of the pairwise boundary
    precrossed: bool = False
    losses: list[float] | None = None
    step_norms: list[float] | None = None
    predictions: list[int] | None = None
    points: list[np.ndarray] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.status is AttackStatus.SUCCESS

    @property
    def perturbation(self) -> np.ndarray:
        return self.final - self.base


def _check_classes(model: ClassifierModel, b, k) -> tuple[np.ndarray, np.ndarray]:
    b = np.atleast_1d(np.asarray(b, dtype=np.int64))
    k = np.atleast_1d(np.asarray(k, dtype=np.int64))
    K = model.num_classes
    if ((b < 0) | (b >= K) | (k < 0) | (k >= K)).any():
        raise ValueError(f"class index out of range for {K} classes")
    if (b == k).any():
        raise ValueError("base class and target class must differ")
    return b, k


def loss_and_gradient(model: ClassifierModel, x: np.ndarray, b, k) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attack loss per row, its input gradient, and the logits, for a batch ``x``."""
    xt = ad.Tensor(x, requires_grad=True)
    z = model.forward(xt)
    gap = ad.take_rows(z, b) - ad.take_rows(z, k)
    grad = ad.backward(ad.sum_(gap), [xt])[xt]
    return gap.data, grad, z.data


def attack_loss(model: ClassifierModel, x, b: int, k: int) -> float:
    b_arr, k_arr = _check_classes(model, b, k)
    z = model.forward(ad.Tensor(np.asarray(x, dtype=np.float64)[None])).data[0]
    return float(z[b_arr[0]] - z[k_arr[0]])


def _direction(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = grad.reshape(grad.shape[0], -1)
    norms = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    return norms, grad / np.maximum(norms, DEGENERATE_NORM).reshape((-1,) + (1,) * (grad.ndim - 1))


def attack_step(model: ClassifierModel, x, b: int, k: int, config: AttackConfig) -> np.ndarray:
    """One update ``x - lr * (L_k(x) + eps) * grad / ||grad||``."""
    b_arr, k_arr = _check_classes(model, b, k)
    x = np.asarray(x, dtype=np.float64)
    loss, grad, _ = loss_and_gradient(model, x[None], b_arr, k_arr)
    norms, unit = _direction(grad)
    if norms[0] < DEGENERATE_NORM:
        raise DegenerateGradient(f"attack gradient norm {norms[0]:.3e} below {DEGENERATE_NORM}")
    return x - config.lr * (loss[0] + config.eps) * unit[0]


def find_bss_batch(
    model: ClassifierModel,
    x: np.ndarray,
    base_classes,
    target_classes,
    config: AttackConfig = AttackConfig(),
) -> list[AttackResult]:
    """Attack every row of ``x`` toward its own target class."""
    x = np.array(x, dtype=np.float64)
    n = x.shape[0]
    b, k = _check_classes(model, base_classes, target_classes)
    if b.shape != (n,) or k.shape != (n,):
        raise ValueError("need one base and one target class per row")
    if n == 0:
        return []

    results: list[AttackResult | None] = [None] * n
    record = config.record_trajectory
    hist_loss = [[] for _ in range(n)]
    hist_step = [[] for _ in range(n)]
    hist_pred = [[] for _ in range(n)]
    hist_pts = [[] for _ in range(n)]

    def finish(row, status, final, iters, loss_prev, loss_now, **kw):
        results[row] = AttackResult(
            status=status,
            base=x[row].copy(),
            final=final.copy(),
            base_class=int(b[row]),
            target_class=int(k[row]),
            iterations=iters,
            loss_final=float(loss_now),
            loss_previous=float(loss_prev),
            losses=hist_loss[row] if record else None,
            step_norms=hist_step[row] if record else None,
            predictions=hist_pred[row] if record else None,
            points=hist_pts[row] if record else None,
            **kw,
        )

    rows = np.arange(n)
    cur = x.copy()
    loss, grad, z = loss_and_gradient(model, cur, b, k)
    if record:
        for j, r in enumerate(rows):
            hist_loss[r].append(float(loss[j]))
            hist_step[r].append(0.0)
            hist_pred[r].append(int(np.argmax(z[j])))
            hist_pts[r].append(cur[j].copy())

    pre = loss <= 0
    for j in np.flatnonzero(pre):
        finish(rows[j], AttackStatus.SUCCESS, cur[j], 0, loss[j], loss[j], precrossed=True)
    keep = ~pre
    rows, cur, loss, grad = rows[keep], cur[keep], loss[keep], grad[keep]

    for i in range(config.max_iter):
        if rows.size == 0:
            break
        norms, unit = _direction(grad)
        degenerate = norms < DEGENERATE_NORM
        for j in np.flatnonzero(degenerate):
            finish(rows[j], AttackStatus.DEGENERATE, cur[j], i, loss[j], loss[j])
        live = ~degenerate
        rows, cur, loss, unit = rows[live], cur[live], loss[live], unit[live]
        if rows.size == 0:
            break

        coef = config.lr * (loss + config.eps)
        step = -coef.reshape((-1,) + (1,) * (cur.ndim - 1)) * unit
        nxt = cur + step
        new_loss, new_grad, z = loss_and_gradient(model, nxt, b[rows], k[rows])
        if record:
            for j, r in enumerate(rows):
                hist_loss[r].append(float(new_loss[j]))
                hist_step[r].append(float(np.linalg.norm(nxt[j] - cur[j])))
                hist_pred[r].append(int(np.argmax(z[j])))
                hist_pts[r].append(nxt[j].copy())

        crossed = (new_loss < 0) & (loss > 0)
        zb = z[np.arange(rows.size), b[rows]]
        zk = z[np.arange(rows.size), k[rows]]
        others = z.copy()
        others[np.arange(rows.size), b[rows]] = -np.inf
        others[np.arange(rows.size), k[rows]] = -np.inf
        intruder = np.argmax(others, axis=1)
        intruded = (others.max(axis=1) > np.maximum(zb, zk)) & ~crossed
        exhausted = (i + 1 >= config.max_iter) & ~crossed & ~intruded

        for j in np.flatnonzero(crossed):
            finish(rows[j], AttackStatus.SUCCESS, nxt[j], i + 1, loss[j], new_loss[j])
        for j in np.flatnonzero(intruded):
            finish(rows[j], AttackStatus.INTRUDED, nxt[j], i + 1, loss[j], new_loss[j], intruded_class=int(intruder[j]))
        for j in np.flatnonzero(exhausted):
            finish(rows[j], AttackStatus.MAX_ITER, nxt[j], i + 1, loss[j], new_loss[j])

        going = ~(crossed | intruded | exhausted)
        rows, cur, loss, grad = rows[going], nxt[going], new_loss[going], new_grad[going]

    return results  # type: ignore[return-value]


def find_bss(model: ClassifierModel, x, b: int, k: int, config: AttackConfig = AttackConfig()) -> AttackResult:
    x = np.asarray(x, dtype=np.float64)
    return find_bss_batch(model, x[None], [b], [k], config)[0]


def taylor_residual(model: ClassifierModel, x, b: int, k: int, lr: float, eps: float = 0.01) -> float:
    """Gap between the true post-step loss and its first-order prediction.

    The linearisation of one step predicts
    ``L(x') = L(x) * (1 - lr*|g|) - lr*eps*|g|``.
    """
    b_arr, k_arr = _check_classes(model, b, k)
    x = np.asarray(x, dtype=np.float64)[None]
    loss, grad, _ = loss_and_gradient(model, x, b_arr, k_arr)
    norms, unit = _direction(grad)
    if norms[0] < DEGENERATE_NORM:
        raise DegenerateGradient("attack gradient vanished")
    nxt = x - lr * (loss[0] + eps) * unit
    after, _, _ = loss_and_gradient(model, nxt, b_arr, k_arr)
    g = norms[0]
    predicted = loss[0] * (1.0 - lr * g) - lr * eps * g
    return float(abs(after[0] - predicted))


def write_trajectory_csv(result: AttackResult, path) -> None:
    if result.losses is None:
        raise ValueError("attack was run without record_trajectory")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "step_norm", "predicted_class"])
        for i, (loss, step, pred) in enumerate(zip(result.losses, result.step_norms, result.predictions)):
            w.writerow([i, repr(loss), repr(step), pred])


def out_of_range_fraction(results: Sequence[AttackResult], low: np.ndarray, high: np.ndarray) -> float:
    """Share of coordinates of the final samples that left ``[low, high]``.

    The attack is unconstrained; this is a diagnostic only.
    """
    if not results:
        return 0.0
    finals = np.stack([r.final for r in results])
    return float(np.mean((finals < low) | (finals > high)))


def success_rate(results: Sequence[AttackResult]) -> float:
    return float(np.mean([r.success for r in results])) if results else 0.0
