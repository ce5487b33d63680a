"""Decision-boundary similarity between two classifiers.

Both classifiers are attacked from the same base samples toward the same
target classes. Each successful pair of perturbations contributes the ratio of
their norms (MagSim) and their cosine (AngSim). Cosines are reported raw, so
AngSim can be negative.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attack import AttackConfig, find_bss_batch
from .models import ClassifierModel, predict


@dataclass
class PerturbationPair:
    sample_id: int
    target: int
    teacher: np.ndarray | None
    student: np.ndarray | None
    both_success: bool = True
    reason: str = ""

    @property
    def norms(self) -> tuple[float, float]:
        return float(np.linalg.norm(self.teacher)), float(np.linalg.norm(self.student))

    @property
    def included(self) -> bool:
        return self.both_success and not self.reason

    @property
    def cosine(self) -> float:
        nt, ns = self.norms
        return float(np.vdot(self.teacher, self.student) / (nt * ns))

    @property
    def ratio(self) -> float:
        nt, ns = self.norms
        return min(nt, ns) / max(nt, ns)


def _as_pairs(pairs: Iterable) -> list[PerturbationPair]:
    out = []
    for i, p in enumerate(pairs):
        if not isinstance(p, PerturbationPair):
            t, s = p
            p = PerturbationPair(i, -1, np.asarray(t, dtype=np.float64), np.asarray(s, dtype=np.float64))
        if p.both_success and not p.reason and min(p.norms) == 0.0:
            p.reason = "zero-norm"
        out.append(p)
    return out


def _included(pairs: Iterable) -> list[PerturbationPair]:
    kept = [p for p in _as_pairs(pairs) if p.included]
    if not kept:
        raise ValueError("no usable perturbation pairs")
    return kept


def magsim(pairs: Iterable) -> float:
    """Mean of min/max perturbation-norm ratios over usable pairs."""
    return float(np.mean([p.ratio for p in _included(pairs)]))


def angsim(pairs: Iterable) -> float:
    """Mean cosine between paired perturbations over usable pairs."""
    return float(np.mean([p.cosine for p in _included(pairs)]))


@dataclass
class SimilarityReport:
    magsim: float
    angsim: float
    attempted: int
    included: int
    exclusions: dict[str, int]
    per_class: dict[int, dict[str, float]]
    pairs: list[PerturbationPair] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {
            "magsim": self.magsim,
            "angsim": self.angsim,
            "pairs_attempted": self.attempted,
            "pairs_included": self.included,
            "exclusions": self.exclusions,
            "per_class": {str(k): v for k, v in self.per_class.items()},
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_pairs_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "target", "norm_teacher", "norm_student", "cosine", "included", "reason"])
            for p in self.pairs:
                if p.teacher is not None and p.student is not None:
                    nt, ns = p.norms
                    cos = p.cosine if min(nt, ns) > 0 else float("nan")
                else:
                    nt = ns = cos = float("nan")
                w.writerow([p.sample_id, p.target, repr(nt), repr(ns), repr(cos), int(p.included), p.reason])


def _summarise(pairs: list[PerturbationPair]) -> SimilarityReport:
    pairs = _as_pairs(pairs)
    kept = [p for p in pairs if p.included]
    reasons = Counter(p.reason for p in pairs if not p.included)
    per_class: dict[int, dict[str, float]] = {}
    for k in sorted({p.target for p in kept}):
        sub = [p for p in kept if p.target == k]
        per_class[k] = {
            "magsim": float(np.mean([p.ratio for p in sub])),
            "angsim": float(np.mean([p.cosine for p in sub])),
            "pairs": len(sub),
        }
    return SimilarityReport(
        magsim=float(np.mean([p.ratio for p in kept])) if kept else float("nan"),
        angsim=float(np.mean([p.cosine for p in kept])) if kept else float("nan"),
        attempted=len(pairs),
        included=len(kept),
        exclusions=dict(sorted(reasons.items())),
        per_class=per_class,
        pairs=pairs,
    )


def compare_classifiers(
    model_a: ClassifierModel,
    model_b: ClassifierModel,
    x: np.ndarray,
    y: np.ndarray,
    config: AttackConfig = AttackConfig(),
    targets: Sequence[int] | None = None,
) -> SimilarityReport:
    """Attack both models from every sample both classify correctly, toward every other class.

    ``model_a`` plays the teacher role in the report. ``targets`` restricts the
    swept classes; by default all non-base classes are used.
    """
    if model_a.spec.input_shape != model_b.spec.input_shape or model_a.num_classes != model_b.num_classes:
        raise ValueError("models differ in input shape or class count")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    K = model_a.num_classes
    ok = np.flatnonzero((predict(model_a, x) == y) & (predict(model_b, x) == y))
    classes = range(K) if targets is None else targets
    ids = [(int(i), int(k)) for i in ok for k in classes if k != y[i]]
    if not ids:
        return _summarise([])
    rows = np.array([i for i, _ in ids])
    ks = np.array([k for _, k in ids])
    res_a = find_bss_batch(model_a, x[rows], y[rows], ks, config)
    res_b = find_bss_batch(model_b, x[rows], y[rows], ks, config)
    pairs = []
    for (i, k), ra, rb in zip(ids, res_a, res_b):
        reason = ""
        if not ra.success:
            reason = f"teacher-{ra.status.value}"
        elif not rb.success:
            reason = f"student-{rb.status.value}"
        pairs.append(PerturbationPair(i, k, ra.perturbation, rb.perturbation, ra.success and rb.success, reason))
    return _summarise(pairs)
