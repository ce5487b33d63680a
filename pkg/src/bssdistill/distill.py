"""Student training with classification, KD and boundary-supporting losses.

Per step the total loss is::

    L = L_cls + alpha * L_KD + beta * L_BS

``L_cls`` is cross-entropy against hard labels, ``L_KD`` the cross-entropy
between temperature-softened teacher and student outputs on the batch, and
``L_BS`` the same soft cross-entropy evaluated at boundary supporting samples
generated on the teacher from a selection of the batch. One target class is
drawn per base sample from the teacher's off-class probabilities, so the
realised average of ``L_BS`` is a Monte Carlo estimate of the
probability-weighted sum over targets.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import alt_samples
from . import autodiff as ad
from .attack import AttackConfig, find_bss_batch
from .models import ClassifierModel, class_probabilities, logits, predict

log = logging.getLogger(__name__)

SELECTIONS = ("distance", "all", "random")
TARGET_POLICIES = ("teacher", "uniform")
GENERATORS = ("bss",) + alt_samples.KINDS

# method name -> (use KD, use BS, selection, target policy, generator)
METHODS: dict[str, tuple[bool, bool, str, str, str]] = {
    "original": (False, False, "distance", "teacher", "bss"),
    "hinton": (True, False, "distance", "teacher", "bss"),
    "bss": (True, True, "distance", "teacher", "bss"),
    "all-selection": (True, True, "all", "teacher", "bss"),
    "random-selection": (True, True, "random", "teacher", "bss"),
    "random-target": (True, True, "distance", "uniform", "bss"),
    "random-noise": (True, True, "distance", "teacher", "random-noise"),
    "fgsm": (True, True, "distance", "teacher", "fgsm"),
    "deepfool": (True, True, "distance", "teacher", "deepfool"),
    "l2-minimize": (True, True, "distance", "teacher", "l2-minimize"),
}
METHOD_ALIASES = {"proposed": "bss"}


class NoAlternativeClass(ValueError):
    """The teacher puts all probability mass on the base class."""


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class DistillConfig:
    temperature: float = 3.0
    alpha_start: float = 4.0
    alpha_end: float = 1.0
    beta_start: float = 2.0
    beta_zero_at: float = 0.75
    num_base: int = 64
    batch_size: int = 256
    attack_lr: float = 0.3
    attack_eps: float = 0.01
    attack_max_iter: int = 10
    epochs: int = 80
    lr: float = 0.1
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    method: str = "bss"

    def __post_init__(self):
        self.method = METHOD_ALIASES.get(self.method, self.method)
        self.lr_milestones = tuple(float(m) for m in self.lr_milestones)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.beta_zero_at <= 1:
            raise ValueError("beta_zero_at must lie in (0, 1]")
        if self.num_base < 0 or self.batch_size < 1:
            raise ValueError("num_base must be >= 0 and batch_size >= 1")
        if self.num_base > self.batch_size:
            raise ValueError("num_base cannot exceed batch_size")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        AttackConfig(self.attack_lr, self.attack_eps, self.attack_max_iter)

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(self.attack_lr, self.attack_eps, self.attack_max_iter)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BatchSelection:
    eligible: np.ndarray
    chosen: np.ndarray
    distances: np.ndarray
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    target_probs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


@dataclass
class LossBreakdown:
    cls: float
    kd: float
    bs: float
    bs_term: float
    total: float
    alpha: float
    beta: float
    selected: int = 0
    attacked: int = 0
    succeeded: int = 0


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def soft_cross_entropy(target_probs: np.ndarray, student_logits: ad.Tensor, temperature: float = 1.0) -> ad.Tensor:
    """Batch mean of ``-target . log softmax(z / T)``."""
    logp = ad.log_softmax(ad.scale(student_logits, 1.0 / temperature) if temperature != 1.0 else student_logits)
    return ad.scale(ad.sum_(ad.mul(target_probs, logp)), -1.0 / student_logits.shape[0])


def hard_cross_entropy(labels: np.ndarray, student_logits: ad.Tensor) -> ad.Tensor:
    return ad.scale(ad.sum_(ad.take_rows(ad.log_softmax(student_logits), labels)), -1.0 / student_logits.shape[0])


def _check_onehot(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1).all()):
        raise ValueError("labels must be one-hot rows")
    return y


def _batch(x, model: ClassifierModel) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.shape == model.spec.input_shape else x


def classification_loss(student: ClassifierModel, x, y_onehot) -> float:
    y = _check_onehot(y_onehot)
    return soft_cross_entropy(y, student.forward(_batch(x, student))).item()


def kd_loss(teacher: ClassifierModel, student: ClassifierModel, x, temperature: float) -> float:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = _batch(x, student)
    target = class_probabilities(teacher, x, temperature)
    return soft_cross_entropy(target, student.forward(x), temperature).item()


def bs_loss(teacher: ClassifierModel, student: ClassifierModel, x_bss, temperature: float) -> float:
    """Same soft cross-entropy as :func:`kd_loss`, evaluated at boundary supporting samples."""
    return kd_loss(teacher, student, x_bss, temperature)


def distillation_objective(
    student: ClassifierModel,
    params: Sequence[ad.Tensor],
    x: np.ndarray,
    y: np.ndarray,
    teacher_logits: np.ndarray | None,
    x_bss: np.ndarray | None,
    teacher_bss_logits: np.ndarray | None,
    alpha: float,
    beta: float,
    temperature: float,
) -> tuple[ad.Tensor, dict]:
    """Total loss as a graph over ``params``; boundary samples enter as constants."""
    z = student.forward(x, params)
    l_cls = hard_cross_entropy(y, z)
    total = l_cls
    parts = {"cls": l_cls.item(), "kd": 0.0, "bs": 0.0, "bs_term": 0.0}
    if teacher_logits is not None and alpha != 0:
        l_kd = soft_cross_entropy(ad.softmax_np(teacher_logits / temperature), z, temperature)
        parts["kd"] = l_kd.item()
        total = ad.add(total, ad.scale(l_kd, alpha))
    if x_bss is not None and len(x_bss) and beta != 0:
        zb = student.forward(x_bss, params)
        l_bs = soft_cross_entropy(ad.softmax_np(teacher_bss_logits / temperature), zb, temperature)
        parts["bs"] = l_bs.item()
        parts["bs_term"] = beta * parts["bs"]
        total = ad.add(total, ad.scale(l_bs, beta))
    return total, parts


# --------------------------------------------------------------------------
# base samples and targets
# --------------------------------------------------------------------------


def select_from_probs(
    q_teacher: np.ndarray,
    q_student: np.ndarray,
    labels: np.ndarray,
    num_base: int,
    mode: str = "distance",
    rng: np.random.Generator | None = None,
) -> BatchSelection:
    """Eligible rows are those both models classify correctly.

    ``distance`` keeps the ``num_base`` eligible rows with the largest squared
    distance between teacher and student probabilities (stable: ties keep
    batch order); ``all`` keeps every eligible row; ``random`` draws
    ``num_base`` eligible rows uniformly.
    """
    labels = np.asarray(labels)
    eligible = np.flatnonzero((np.argmax(q_teacher, axis=1) == labels) & (np.argmax(q_student, axis=1) == labels))
    dist = ((q_teacher - q_student) ** 2).sum(axis=1)
    if mode == "all" or eligible.size <= num_base:
        chosen = eligible
    elif mode == "distance":
        order = np.argsort(-dist[eligible], kind="stable")
        chosen = np.sort(eligible[order[:num_base]])
    elif mode == "random":
        if rng is None:
            raise ValueError("random selection needs an rng")
        chosen = np.sort(rng.choice(eligible, size=num_base, replace=False))
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return BatchSelection(eligible, chosen, dist)


def select_base_samples(teacher: ClassifierModel, student: ClassifierModel, x, labels, num_base: int, **kw) -> BatchSelection:
    return select_from_probs(class_probabilities(teacher, x), class_probabilities(student, x), labels, num_base, **kw)


def target_probabilities(q_teacher: np.ndarray, base: int) -> np.ndarray:
    """Teacher probabilities renormalised over the non-base classes.

    The off-class mass is summed directly rather than taken as ``1 - q[base]``
    so confident teachers do not lose it to cancellation.
    """
    q = np.asarray(q_teacher, dtype=np.float64)
    p = q.copy()
    p[base] = 0.0
    rest = p.sum()
    if not rest > 0:
        raise NoAlternativeClass(f"teacher assigns all mass to base class {base}")
    p /= rest
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12 or p[base] != 0.0:
        raise AssertionError("target distribution violated its invariants")
    return p


def sample_target_class(q_teacher: np.ndarray, base: int, rng: np.random.Generator) -> int:
    targets, _ = sample_target_classes(np.asarray(q_teacher)[None], np.array([base]), rng)
    return int(targets[0])


def sample_target_classes(q_teacher: np.ndarray, bases: np.ndarray, rng: np.random.Generator, policy: str = "teacher") -> tuple[np.ndarray, np.ndarray]:
    """Draw one target per row; returns targets and the distributions used."""
    n, K = q_teacher.shape
    probs = np.zeros((n, K))
    targets = np.zeros(n, dtype=np.int64)
    for i in range(n):
        if policy == "teacher":
            p = target_probabilities(q_teacher[i], int(bases[i]))
        elif policy == "uniform":
            p = np.full(K, 1.0 / (K - 1))
            p[bases[i]] = 0.0
        else:
            raise ValueError(f"unknown target policy {policy!r}")
        probs[i] = p
        targets[i] = min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), K - 1)
        # guard against round-off landing on a zero-probability class
        while p[targets[i]] == 0.0:
            targets[i] -= 1
    return targets, probs


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------


def schedule(t: float, config: DistillConfig | None = None) -> tuple[float, float]:
    """(alpha, beta) at training progress ``t`` in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"training progress {t} outside [0, 1]")
    c = config or DistillConfig()
    alpha = c.alpha_start + (c.alpha_end - c.alpha_start) * t
    beta = max(0.0, c.beta_start * (1.0 - t / c.beta_zero_at))
    return alpha, beta


def learning_rate(fraction: float, config: DistillConfig) -> float:
    drops = sum(fraction >= m for m in config.lr_milestones)
    return config.lr * config.lr_decay**drops


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: list[np.ndarray], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(params)

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            d = g + self.weight_decay * p if self.weight_decay else g
            buf = self.buffers[i]
            buf = d.copy() if buf is None else self.momentum * buf + d
            self.buffers[i] = buf
            p -= lr * buf


@dataclass
class StepRngs:
    select: np.random.Generator
    target: np.random.Generator
    noise: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "StepRngs":
        a, b, c = np.random.SeedSequence(seed).spawn(3)
        return cls(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c))


def make_boundary_samples(
    teacher: ClassifierModel,
    student: ClassifierModel,
    x: np.ndarray,
    y: np.ndarray,
    config: DistillConfig,
    rngs: StepRngs,
    student_logits: np.ndarray | None = None,
    teacher_logits: np.ndarray | None = None,
) -> tuple[np.ndarray, BatchSelection, int]:
    """Select base samples, draw targets and generate extra samples on the teacher.

    Returns the usable samples, the selection and the number of attacks run.
    """
    _, _, selection_mode, policy, generator = METHODS[config.method]
    zt = logits(teacher, x) if teacher_logits is None else teacher_logits
    zs = logits(student, x) if student_logits is None else student_logits
    qt, qs = ad.softmax_np(zt), ad.softmax_np(zs)
    sel = select_from_probs(qt, qs, y, config.num_base, selection_mode, rngs.select)
    if sel.chosen.size == 0:
        return x[:0], sel, 0

    keep, targets, probs = [], [], []
    for i in sel.chosen:
        try:
            t, p = sample_target_classes(qt[i : i + 1], y[i : i + 1], rngs.target, policy)
        except NoAlternativeClass:
            continue
        keep.append(i)
        targets.append(t[0])
        probs.append(p[0])
    if not keep:
        return x[:0], sel, 0
    keep = np.asarray(keep)
    sel.targets = np.asarray(targets, dtype=np.int64)
    sel.target_probs = np.stack(probs)
    base_x, base_y = x[keep], y[keep]

    results = find_bss_batch(teacher, base_x, base_y, sel.targets, config.attack)
    ok = np.array([r.success and not r.precrossed for r in results], dtype=bool)
    samples = np.stack([r.final for r in results])
    if generator == "bss":
        return samples[ok], sel, len(results)

    norms = np.array([np.linalg.norm(r.perturbation) for r, good in zip(results, ok) if good])
    target_norm = float(norms.mean()) if norms.size else 0.1
    dim = int(np.prod(x.shape[1:]))
    gcfg = alt_samples.GeneratorConfig(
        target_norm=target_norm,
        fgsm_step=target_norm / math.sqrt(dim),
        max_iter=config.attack_max_iter,
        l2_lr=config.attack_lr,
    )
    alt, usable = alt_samples.generate(generator, teacher, base_x, base_y, sel.targets, gcfg, rngs.noise)
    return alt[usable], sel, len(results)


def train_step(
    teacher: ClassifierModel | None,
    student: ClassifierModel,
    optimizer: SGD,
    x: np.ndarray,
    y: np.ndarray,
    config: DistillConfig,
    progress: float,
    lr: float,
    rngs: StepRngs,
) -> LossBreakdown:
    use_kd, use_bs, *_ = METHODS[config.method]
    alpha, beta = schedule(progress, config)
    alpha = alpha if use_kd and teacher is not None else 0.0
    beta = beta if use_bs and teacher is not None else 0.0

    zt = logits(teacher, x) if teacher is not None and (alpha or beta) else None
    x_bss = zt_bss = None
    selected = attacked = succeeded = 0
    if beta > 0:
        x_bss, sel, attacked = make_boundary_samples(
            teacher, student, x, y, config, rngs, student_logits=logits(student, x), teacher_logits=zt
        )
        selected, succeeded = int(sel.chosen.size), int(len(x_bss))
        zt_bss = logits(teacher, x_bss) if len(x_bss) else None

    params = [ad.Tensor(p, requires_grad=True, _checked=True) for p in student.params]
    total, parts = distillation_objective(student, params, x, y, zt, x_bss, zt_bss, alpha, beta, config.temperature)
    grads = ad.backward(total, params)
    optimizer.step([grads[p] for p in params], lr)
    return LossBreakdown(
        cls=parts["cls"],
        kd=parts["kd"],
        bs=parts["bs"],
        bs_term=parts["bs_term"],
        total=total.item(),
        alpha=alpha,
        beta=beta,
        selected=selected,
        attacked=attacked,
        succeeded=succeeded,
    )


@dataclass
class EpochLog:
    epoch: int
    cls: float
    kd: float
    bs_term: float
    alpha: float
    beta: float
    train_acc: float
    test_acc: float
    attack_success: float


LOG_FIELDS = [f.name for f in dataclasses.fields(EpochLog)]


def train(
    teacher: ClassifierModel | None,
    student: ClassifierModel,
    x_train: np.ndarray,
    y_train: np.ndarray,
    config: DistillConfig,
    x_test: np.ndarray | None = None,
    y_test: np.ndarray | None = None,
) -> tuple[ClassifierModel, list[EpochLog]]:
    """Train ``student`` in place; deterministic given ``config.seed``.

    With ``teacher=None`` only the classification loss is used, which is how
    teachers themselves are trained.
    """
    n = len(x_train)
    batch_size = config.batch_size
    if n < batch_size:
        log.warning("batch size %d exceeds training set size %d; using %d", batch_size, n, n)
        batch_size = n
    num_base = min(config.num_base, batch_size)
    if num_base != config.num_base:
        config = dataclasses.replace(config, num_base=num_base, batch_size=batch_size)

    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    rngs = StepRngs.from_seed([config.seed, 2])
    opt = SGD(student.params, config.momentum, config.weight_decay)
    history: list[EpochLog] = []
    for epoch in range(config.epochs):
        progress = epoch / max(config.epochs - 1, 1)
        lr = learning_rate(epoch / config.epochs, config)
        perm = order_rng.permutation(n)
        sums = np.zeros(3)
        attacked = succeeded = 0
        steps = 0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            try:
                parts = train_step(teacher, student, opt, x_train[idx], y_train[idx], config, progress, lr, rngs)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch starting {start}: {exc}") from exc
            sums += (parts.cls, parts.kd, parts.bs_term)
            attacked += parts.attacked
            succeeded += parts.succeeded
            steps += 1
        alpha, beta = schedule(progress, config)
        use_kd, use_bs, *_ = METHODS[config.method]
        try:
            train_acc = float(np.mean(predict(student, x_train) == y_train))
            test_acc = float(np.mean(predict(student, x_test) == y_test)) if x_test is not None and len(x_test) else float("nan")
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value evaluating after epoch {epoch}: {exc}") from exc
        history.append(
            EpochLog(
                epoch=epoch,
                cls=sums[0] / steps,
                kd=sums[1] / steps,
                bs_term=sums[2] / steps,
                alpha=alpha if use_kd and teacher is not None else 0.0,
                beta=beta if use_bs and teacher is not None else 0.0,
                train_acc=train_acc,
                test_acc=test_acc,
                attack_success=succeeded / attacked if attacked else float("nan"),
            )
        )
    return student, history


def write_log_csv(history: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow(dataclasses.asdict(row))
