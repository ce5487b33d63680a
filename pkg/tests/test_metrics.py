import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bssdistill import models as M
from bssdistill.attack import AttackConfig
from bssdistill.metrics import PerturbationPair, angsim, compare_classifiers, magsim

vec = arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_identity_examples():
    v = np.array([1.0, -2.0, 0.5])
    assert magsim([(v, v)]) == 1.0 and angsim([(v, v)]) == pytest.approx(1.0, abs=1e-15)
    assert magsim([(2 * v, v)]) == pytest.approx(0.5, abs=1e-15)
    assert angsim([(2 * v, v)]) == pytest.approx(1.0, abs=1e-15)
    assert angsim([(v, -v)]) == pytest.approx(-1.0, abs=1e-15)
    assert angsim([(np.array([1.0, 0.0]), np.array([0.0, 3.0]))]) == 0.0


def test_mean_over_pairs():
    pairs = [(np.array([1.0, 0.0]), np.array([2.0, 0.0])), (np.array([1.0, 0.0]), np.array([0.0, 1.0]))]
    assert magsim(pairs) == pytest.approx(0.75)
    assert angsim(pairs) == pytest.approx(0.5)


def test_zero_norm_and_failed_pairs_excluded():
    v = np.array([1.0, 1.0])
    pairs = [
        PerturbationPair(0, 1, v, np.zeros(2)),
        PerturbationPair(1, 1, v, 3 * v, both_success=False, reason="student-intruded"),
        PerturbationPair(2, 1, v, 2 * v),
    ]
    assert magsim(pairs) == 0.5
    assert pairs[0].reason == "zero-norm" and not pairs[0].included
    with pytest.raises(ValueError):
        magsim(pairs[:2])


@settings(max_examples=60, deadline=None)
@given(vec, vec, st.floats(0.01, 100))
def test_symmetry_and_scaling(a, b, c):
    assert magsim([(a, b)]) == pytest.approx(magsim([(b, a)]), rel=1e-12)
    assert angsim([(a, b)]) == pytest.approx(angsim([(b, a)]), rel=1e-12, abs=1e-12)
    assert angsim([(c * a, b)]) == pytest.approx(angsim([(a, b)]), rel=1e-9, abs=1e-9)
    assert 0 < magsim([(a, b)]) <= 1
    assert -1 - 1e-12 <= angsim([(a, b)]) <= 1 + 1e-12


def test_magsim_not_scale_invariant():
    v = np.array([1.0, 2.0])
    assert magsim([(3 * v, v)]) != magsim([(v, v)])


def _pair_of_nets(seed):
    return M.init(M.mlp_spec(10, [32], 3), 2 * seed), M.init(M.mlp_spec(10, [32], 3), 2 * seed + 1)


def test_self_comparison(gaussian_teacher):
    m, ds = gaussian_teacher
    rep = compare_classifiers(m, m, ds.x_test[:60], ds.y_test[:60], AttackConfig())
    assert rep.included > 0
    assert rep.magsim == pytest.approx(1.0, abs=1e-6) and rep.angsim == pytest.approx(1.0, abs=1e-6)


def test_untrained_pairs_have_small_angsim():
    # measured: mean 0.12, per-pair spread 0.11 over these 10 seed pairs
    vals = []
    for s in range(10):
        a, b = _pair_of_nets(s)
        x = np.random.default_rng(100 + s).standard_normal((200, 10))
        rep = compare_classifiers(a, b, x, M.predict(a, x), AttackConfig(max_iter=20))
        vals.append(rep.angsim)
    assert -0.05 <= np.mean(vals) <= 0.25


def test_report_counts_and_outputs(tmp_path):
    a, b = _pair_of_nets(0)
    x = np.random.default_rng(100).standard_normal((60, 10))
    rep = compare_classifiers(a, b, x, M.predict(a, x), AttackConfig())
    assert rep.included <= rep.attempted
    assert rep.attempted - rep.included == sum(rep.exclusions.values())
    assert all(p.reason for p in rep.pairs if not p.included)
    assert sum(v["pairs"] for v in rep.per_class.values()) == rep.included
    rep.write_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["pairs_included"] == rep.included and d["magsim"] == rep.magsim
    rep.write_pairs_csv(tmp_path / "p.csv")
    rows = list(csv.DictReader((tmp_path / "p.csv").open()))
    assert len(rows) == rep.attempted
    assert sum(int(r["included"]) for r in rows) == rep.included


def test_only_samples_correct_for_both_are_attacked():
    a, b = _pair_of_nets(1)
    x = np.random.default_rng(5).standard_normal((40, 10))
    y = M.predict(a, x)
    both = int(np.sum(M.predict(b, x) == y))
    rep = compare_classifiers(a, b, x, y, AttackConfig())
    assert rep.attempted == 2 * both


def test_mismatched_models_rejected():
    with pytest.raises(ValueError):
        compare_classifiers(M.init(M.mlp_spec(2, [4], 2), 0), M.init(M.mlp_spec(3, [4], 2), 0), np.zeros((1, 2)), [0])
