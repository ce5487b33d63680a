"""Desk-scale experiment recipes: teacher training, distillation grids and sweeps.

Every run is described by an :class:`ExperimentConfig`. Its ``to_dict`` form
is stored in each :class:`ExperimentResult` and is enough to rebuild the run:
dataset, teacher, student initialisation and the training RNG streams are all
derived from seeds inside it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import data as D
from . import models as M
from .attack import AttackConfig, loss_and_gradient
from .distill import DistillConfig, EpochLog, train
from .metrics import compare_classifiers

log = logging.getLogger(__name__)

SEEDS = tuple(range(10))
SWEEP_FRACTIONS = (1.0, 0.8, 0.6, 0.4, 0.2)
MAIN_METHODS = ("original", "hinton", "bss")
ABLATION_METHODS = ("bss", "all-selection", "random-selection", "random-target", "original")
ATTACK_METHODS = ("bss", "random-noise", "fgsm", "deepfool", "l2-minimize")
DATA_KINDS = ("spirals", "gaussians", "glyphs", "idx")


@dataclass
class DataConfig:
    kind: str = "spirals"
    num_classes: int = 2
    samples_per_class: int = 100
    test_per_class: int = 500
    noise: float = 0.05
    seed: int = 0
    images: str | None = None  # idx only
    labels: str | None = None
    test_fraction: float = 0.3  # glyphs / idx only

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {DATA_KINDS}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ValueError("idx datasets need both an images and a labels path")


@dataclass
class NetConfig:
    architecture: str = "mlp"  # mlp | cnn
    hidden: tuple[int, ...] = (32, 32)
    channels: tuple[int, ...] = (4, 8)
    activation: str = "relu"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.channels = tuple(int(c) for c in self.channels)
        if self.architecture not in ("mlp", "cnn"):
            raise ValueError(f"unknown architecture {self.architecture!r}")

    def spec(self, input_shape: tuple[int, ...], num_classes: int) -> M.ClassifierSpec:
        if self.architecture == "cnn":
            return M.tiny_cnn_spec(input_shape, num_classes, self.channels)
        return M.mlp_spec(int(np.prod(input_shape)), self.hidden, num_classes, self.activation)


@dataclass
class TeacherConfig:
    net: NetConfig = field(default_factory=lambda: NetConfig(hidden=(64, 64, 64), channels=(8, 16)))
    epochs: int = 300
    lr: float = 0.1
    batch_size: int = 64
    seed: int = 1000


def _student_distill_defaults() -> DistillConfig:
    return DistillConfig(epochs=400, batch_size=64, num_base=16, lr=0.05)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: NetConfig = field(default_factory=NetConfig)
    distill: DistillConfig = field(default_factory=_student_distill_defaults)
    fraction: float = 1.0
    subsample_seed: int = 0
    # keep the number of SGD steps fixed across fractions
    scale_epochs: bool = True
    # attack lr = ratio / median teacher gradient norm; None keeps distill.attack_lr
    attack_lr_ratio: float | None = 0.5
    similarity_samples: int = 200

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["distill"] = self.distill.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        t = dict(d.get("teacher", {}))
        if "net" in t:
            t["net"] = NetConfig(**t["net"])
        return cls(
            data=DataConfig(**d.pop("data", {})),
            teacher=TeacherConfig(**t),
            student=NetConfig(**d.pop("student", {})),
            distill=DistillConfig.from_dict(d.pop("distill", _student_distill_defaults().to_dict())),
            **{k: v for k, v in d.items() if k != "teacher"},
        )

    def with_(self, method: str | None = None, seed: int | None = None, fraction: float | None = None) -> "ExperimentConfig":
        dist = self.distill
        if method is not None:
            dist = dataclasses.replace(dist, method=method)
        if seed is not None:
            dist = dataclasses.replace(dist, seed=seed)
        return dataclasses.replace(self, distill=dist, fraction=self.fraction if fraction is None else fraction)


@dataclass
class ExperimentResult:
    method: str
    seed: int
    fraction: float
    test_accuracy: float
    teacher_accuracy: float
    magsim: float
    angsim: float
    similarity_pairs: int
    attack_success: float
    attack_lr: float
    runtime: float
    config: dict
    history: list[EpochLog] = field(default_factory=list, repr=False)
    model: M.ClassifierModel | None = field(default=None, repr=False, compare=False)

    def summary(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in ("history", "model")}


# --------------------------------------------------------------------------
# io
# --------------------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_results_json(results: Sequence[ExperimentResult], path, aggregate: dict | None = None) -> None:
    payload = {"runs": [r.summary() for r in results]}
    if aggregate is not None:
        payload["aggregate"] = aggregate
    atomic_write_text(path, json.dumps(payload, indent=2, default=float))


def read_results_json(path) -> list[dict]:
    with open(path) as fh:
        return json.load(fh)["runs"]


# --------------------------------------------------------------------------
# data and teacher
# --------------------------------------------------------------------------


def build_dataset(cfg: DataConfig) -> D.Dataset:
    """The normalised full dataset described by ``cfg``."""
    if cfg.kind == "spirals":
        ds = D.generate_spirals(cfg.num_classes, cfg.samples_per_class, cfg.noise, cfg.seed, cfg.test_per_class)
    elif cfg.kind == "gaussians":
        ds = D.generate_gaussians(cfg.num_classes, cfg.samples_per_class, seed=cfg.seed, test_per_class=cfg.test_per_class)
    else:
        if cfg.kind == "glyphs":
            images, labels = D.generate_glyphs(cfg.samples_per_class, noise=max(cfg.noise, 0.0), seed=cfg.seed)
            x = images[:, None].astype(np.float64) / 255.0
            ds = D.Dataset(x, labels.astype(np.int64), x[:0], labels[:0].astype(np.int64), 4, name="glyphs")
        else:
            ds = D.load_idx(cfg.images, cfg.labels)
        ds = D.train_test_split(ds, cfg.test_fraction, seed=cfg.seed)
    return D.normalize(ds)


def _teacher_key(cfg: ExperimentConfig) -> str:
    blob = json.dumps({"data": dataclasses.asdict(cfg.data), "teacher": dataclasses.asdict(cfg.teacher)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_teacher(cfg: ExperimentConfig, dataset: D.Dataset | None = None) -> M.ClassifierModel:
    ds = build_dataset(cfg.data) if dataset is None else dataset
    tc = cfg.teacher
    model = M.init(tc.net.spec(ds.input_shape, ds.num_classes), tc.seed, run_id=f"teacher-{_teacher_key(cfg)}")
    dcfg = DistillConfig(method="original", epochs=tc.epochs, lr=tc.lr, batch_size=tc.batch_size, num_base=0, seed=tc.seed)
    train(None, model, ds.x_train, ds.y_train, dcfg)
    return model


class TeacherCache:
    """Teachers keyed by their data and training config, in memory and optionally on disk."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._mem: dict[str, M.ClassifierModel] = {}

    def get(self, cfg: ExperimentConfig, dataset: D.Dataset | None = None) -> M.ClassifierModel:
        key = _teacher_key(cfg)
        if key in self._mem:
            return self._mem[key]
        path = self.directory / f"teacher-{key}.npz" if self.directory else None
        if path is not None and path.exists():
            model = M.load(path)
        else:
            log.info("no cached teacher %s; training one", key)
            model = train_teacher(cfg, dataset)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                M.save(model, path)
        self._mem[key] = model
        return model


def calibrated_attack_lr(teacher: M.ClassifierModel, x: np.ndarray, y: np.ndarray, ratio: float) -> float:
    """``ratio`` divided by the median input-gradient norm of the teacher's logit gap.

    The gap is taken toward the runner-up class of each sample.
    """
    z = M.logits(teacher, x)
    masked = z.copy()
    masked[np.arange(len(y)), y] = -np.inf
    runner_up = np.argmax(masked, axis=1)
    _, grad, _ = loss_and_gradient(teacher, x, y, runner_up)
    norms = np.linalg.norm(grad.reshape(len(y), -1), axis=1)
    return float(ratio / np.median(norms))


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------


class _Context:
    """Dataset, teacher and calibrated attack lr shared by the runs of one recipe."""

    def __init__(self, cfg: ExperimentConfig, cache: TeacherCache | None):
        self.dataset = build_dataset(cfg.data)
        self.cache = cache if cache is not None else TeacherCache()
        self.teacher = self.cache.get(cfg, self.dataset)
        self.teacher_accuracy = M.accuracy(self.teacher, self.dataset.x_test, self.dataset.y_test)
        ds = self.dataset
        self.attack_lr = (
            calibrated_attack_lr(self.teacher, ds.x_train, ds.y_train, cfg.attack_lr_ratio)
            if cfg.attack_lr_ratio is not None
            else cfg.distill.attack_lr
        )


def run_single(cfg: ExperimentConfig, cache: TeacherCache | None = None, _ctx: _Context | None = None) -> ExperimentResult:
    """Train one student as described by ``cfg`` and evaluate it."""
    t0 = time.perf_counter()
    ctx = _ctx if _ctx is not None else _Context(cfg, cache)
    ds = ctx.dataset
    sub = D.subsample(ds, cfg.fraction, seed=cfg.subsample_seed)
    epochs = cfg.distill.epochs
    if cfg.scale_epochs:
        epochs = max(1, int(round(epochs / cfg.fraction)))
    dcfg = dataclasses.replace(cfg.distill, epochs=epochs, attack_lr=ctx.attack_lr)
    method = dcfg.method
    student = M.init(cfg.student.spec(ds.input_shape, ds.num_classes), dcfg.seed, run_id=f"{method}-{dcfg.seed}")
    teacher = None if method == "original" else ctx.teacher
    _, history = train(teacher, student, sub.x_train, sub.y_train, dcfg, ds.x_test, ds.y_test)

    mag = ang = float("nan")
    n_pairs = 0
    if cfg.similarity_samples > 0:
        n = min(cfg.similarity_samples, len(ds.x_test))
        rep = compare_classifiers(ctx.teacher, student, ds.x_test[:n], ds.y_test[:n], AttackConfig(ctx.attack_lr, dcfg.attack_eps, dcfg.attack_max_iter))
        mag, ang, n_pairs = rep.magsim, rep.angsim, rep.included
    succ = [h.attack_success for h in history if not np.isnan(h.attack_success)]
    return ExperimentResult(
        method=method,
        seed=dcfg.seed,
        fraction=cfg.fraction,
        test_accuracy=M.accuracy(student, ds.x_test, ds.y_test),
        teacher_accuracy=ctx.teacher_accuracy,
        magsim=mag,
        angsim=ang,
        similarity_pairs=n_pairs,
        attack_success=float(np.mean(succ)) if succ else float("nan"),
        attack_lr=ctx.attack_lr,
        runtime=time.perf_counter() - t0,
        config=cfg.to_dict(),
        history=history,
        model=student,
    )


def replay(result: ExperimentResult | dict, cache: TeacherCache | None = None) -> ExperimentResult:
    cfg = result.config if isinstance(result, ExperimentResult) else result["config"]
    return run_single(ExperimentConfig.from_dict(cfg), cache)


def run_grid(
    cfg: ExperimentConfig,
    methods: Sequence[str],
    seeds: Sequence[int] = SEEDS,
    fractions: Sequence[float] | None = None,
    cache: TeacherCache | None = None,
    progress: Callable[[ExperimentResult], None] | None = None,
) -> list[ExperimentResult]:
    ctx = _Context(cfg, cache)
    out = []
    for frac in fractions if fractions is not None else (cfg.fraction,):
        for method in methods:
            for seed in seeds:
                r = run_single(cfg.with_(method=method, seed=seed, fraction=frac), _ctx=ctx)
                out.append(r)
                if progress is not None:
                    progress(r)
    return out


RECIPES = {
    "main": dict(methods=MAIN_METHODS),
    "sweep": dict(methods=("original", "hinton", "bss"), fractions=SWEEP_FRACTIONS),
    "similarity": dict(methods=MAIN_METHODS),
    "attacks": dict(methods=ATTACK_METHODS),
    "ablation": dict(methods=ABLATION_METHODS),
}


def run_experiment(recipe: str, cfg: ExperimentConfig, seeds: Sequence[int] = SEEDS, cache: TeacherCache | None = None, **overrides) -> list[ExperimentResult]:
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    kw = {**RECIPES[recipe], **overrides}
    return run_grid(cfg, seeds=seeds, cache=cache, **kw)


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


def aggregate(results: Sequence[ExperimentResult], key: str = "test_accuracy") -> dict:
    """Mean, sample std and count of ``key`` per (fraction, method)."""
    groups: dict[tuple[float, str], list[float]] = {}
    for r in results:
        groups.setdefault((r.fraction, r.method), []).append(getattr(r, key))
    out = {}
    for (frac, method), vals in sorted(groups.items(), key=lambda kv: (-kv[0][0], kv[0][1])):
        v = np.asarray(vals, dtype=np.float64)
        out.setdefault(f"{frac:g}", {})[method] = {
            "mean": float(v.mean()),
            "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "n": int(v.size),
        }
    return out


def by_seed(results: Sequence[ExperimentResult], method: str, fraction: float | None = None, key: str = "test_accuracy") -> np.ndarray:
    rows = sorted((r for r in results if r.method == method and (fraction is None or r.fraction == fraction)), key=lambda r: r.seed)
    return np.array([getattr(r, key) for r in rows])


def paired_test(a: np.ndarray, b: np.ndarray, alternative: str = "greater") -> tuple[float, float]:
    """Paired t-test of ``a - b``; returns (mean difference, p-value).

    Identical samples give p = 1 (no evidence of a difference).
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if np.all(d == d[0]):
        if d[0] == 0:
            return 0.0, 1.0
        return float(d[0]), 0.0 if (d[0] > 0) == (alternative == "greater") else 1.0
    res = stats.ttest_rel(a, b, alternative=alternative)
    return float(d.mean()), float(res.pvalue)


# --------------------------------------------------------------------------
# probe grid
# --------------------------------------------------------------------------


def probe_grid(x: np.ndarray, resolution: int = 101, margin: float = 0.25) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Regular 2-D grid covering the data bounding box plus ``margin`` of its span."""
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError("probe grids need 2-D inputs")
    lo, hi = x.min(axis=0), x.max(axis=0)
    pad = margin * (hi - lo)
    gx = np.linspace(lo[0] - pad[0], hi[0] + pad[0], resolution)
    gy = np.linspace(lo[1] - pad[1], hi[1] + pad[1], resolution)
    xx, yy = np.meshgrid(gx, gy)
    return gx, gy, np.stack([xx.ravel(), yy.ravel()], axis=1)


def write_grid_csv(path, points: np.ndarray, models: dict[str, M.ClassifierModel]) -> None:
    """One row per grid point: coordinates followed by each model's logits."""
    cols = ["x0", "x1"]
    blocks = [points]
    for name, model in models.items():
        z = M.logits(model, points)
        cols += [f"{name}_logit{k}" for k in range(z.shape[1])]
        blocks.append(z)
    table = np.concatenate(blocks, axis=1)
    lines = [",".join(cols)] + [",".join(repr(float(v)) for v in row) for row in table]
    atomic_write_text(path, "\n".join(lines) + "\n")
