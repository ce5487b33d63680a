"""Command line entry point: ``bssdistill <command>``.

Training flags default to the reference hyper-parameters (batch 256, 80
epochs, attack lr 0.3, ...). ``--preset desk`` switches every flag that was
not given explicitly to the small-scale settings used for the spiral studies.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import experiments as E
from . import models as M
from .attack import AttackConfig
from .distill import METHODS, METHOD_ALIASES, DistillConfig, write_log_csv
from .metrics import compare_classifiers

_REFERENCE = DistillConfig()
_DESK = E.ExperimentConfig()

# DistillConfig fields exposed as flags, with their click types
_DISTILL_FLAGS = {
    "temperature": float,
    "alpha_start": float,
    "alpha_end": float,
    "beta_start": float,
    "beta_zero_at": float,
    "num_base": int,
    "batch_size": int,
    "attack_lr": float,
    "attack_eps": float,
    "attack_max_iter": int,
    "epochs": int,
    "lr": float,
    "lr_decay": float,
    "momentum": float,
    "weight_decay": float,
}


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _seed_list(text: str) -> tuple[int, ...]:
    """``0-9`` or ``0,3,5``."""
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return tuple(range(int(lo), int(hi) + 1))
    return _csv_ints(text)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _methods(text: str) -> tuple[str, ...]:
    out = []
    for m in text.split(","):
        m = METHOD_ALIASES.get(m.strip(), m.strip())
        if m not in METHODS:
            raise click.BadParameter(f"unknown method {m!r}; choose from {sorted(METHODS)}")
        out.append(m)
    return tuple(out)


def experiment_options(fn):
    """Data, network and DistillConfig flags shared by every training command."""
    opts = [
        click.option("--preset", type=click.Choice(["reference", "desk"]), default="reference", show_default=True,
                     help="Baseline for flags not given explicitly."),
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="ExperimentConfig JSON; explicit flags override it."),
        click.option("--dataset", type=click.Choice(E.DATA_KINDS), default="spirals", show_default=True),
        click.option("--num-classes", type=int, default=2, show_default=True),
        click.option("--samples-per-class", type=int, default=100, show_default=True),
        click.option("--test-per-class", type=int, default=500, show_default=True),
        click.option("--noise", type=float, default=0.05, show_default=True),
        click.option("--data-seed", type=int, default=0, show_default=True),
        click.option("--images", type=click.Path(exists=True, dir_okay=False)),
        click.option("--labels", type=click.Path(exists=True, dir_okay=False)),
        click.option("--architecture", type=click.Choice(["mlp", "cnn"]), default="mlp", show_default=True),
        click.option("--teacher-hidden", default="64,64,64", show_default=True),
        click.option("--teacher-epochs", type=int, default=300, show_default=True),
        click.option("--teacher-lr", type=float, default=0.1, show_default=True),
        click.option("--teacher-seed", type=int, default=1000, show_default=True),
        click.option("--student-hidden", default="32,32", show_default=True),
        click.option("--fraction", type=float, default=1.0, show_default=True, help="Share of the training split kept."),
        click.option("--attack-lr-ratio", type=float, default=None,
                     help="Calibrate the attack lr as RATIO / median teacher gradient norm."),
        click.option("--scale-epochs/--no-scale-epochs", default=False, show_default=True,
                     help="Divide epochs by --fraction so the step count stays fixed."),
        click.option("--teacher-cache", type=click.Path(file_okay=False), default=".bssdistill-cache", show_default=True),
        click.option("-v", "--verbose", is_flag=True),
    ]
    for name, typ in _DISTILL_FLAGS.items():
        opts.append(click.option(f"--{name.replace('_', '-')}", name, type=typ, default=getattr(_REFERENCE, name), show_default=True))
    for opt in reversed(opts):
        fn = opt(fn)

    @functools.wraps(fn)
    def wrapper(**kw):
        logging.basicConfig(level=logging.INFO if kw.pop("verbose") else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        try:
            return fn(**kw)
        except (ValueError, M.ModelFormatError) as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _explicit(ctx: click.Context, name: str) -> bool:
    src = ctx.get_parameter_source(name)
    return src is not None and src.name not in ("DEFAULT", "DEFAULT_MAP")


def build_config(ctx: click.Context, kw: dict, method: str = "bss", seed: int = 0) -> E.ExperimentConfig:
    """ExperimentConfig from preset, optional JSON file and explicitly passed flags."""
    if kw.get("config_path"):
        base = E.ExperimentConfig.from_dict(json.loads(Path(kw["config_path"]).read_text()))
        layered = True
    elif kw["preset"] == "desk":
        base, layered = _DESK, True
    else:
        base, layered = E.ExperimentConfig(distill=DistillConfig(), attack_lr_ratio=None, scale_epochs=False), False

    def pick(flag, current):
        return kw[flag] if (not layered or _explicit(ctx, flag)) else current

    data = E.DataConfig(
        kind=pick("dataset", base.data.kind),
        num_classes=pick("num_classes", base.data.num_classes),
        samples_per_class=pick("samples_per_class", base.data.samples_per_class),
        test_per_class=pick("test_per_class", base.data.test_per_class),
        noise=pick("noise", base.data.noise),
        seed=pick("data_seed", base.data.seed),
        images=kw.get("images") or base.data.images,
        labels=kw.get("labels") or base.data.labels,
    )
    arch = pick("architecture", base.student.architecture)
    teacher = dataclasses.replace(
        base.teacher,
        net=dataclasses.replace(base.teacher.net, architecture=arch, hidden=_csv_ints(pick("teacher_hidden", ",".join(map(str, base.teacher.net.hidden))))),
        epochs=pick("teacher_epochs", base.teacher.epochs),
        lr=pick("teacher_lr", base.teacher.lr),
        seed=pick("teacher_seed", base.teacher.seed),
    )
    student = dataclasses.replace(base.student, architecture=arch, hidden=_csv_ints(pick("student_hidden", ",".join(map(str, base.student.hidden)))))
    dist = {name: pick(name, getattr(base.distill, name)) for name in _DISTILL_FLAGS}
    distill = dataclasses.replace(base.distill, method=method, seed=seed, **dist)
    return dataclasses.replace(
        base,
        data=data,
        teacher=teacher,
        student=student,
        distill=distill,
        fraction=pick("fraction", base.fraction),
        attack_lr_ratio=pick("attack_lr_ratio", base.attack_lr_ratio),
        scale_epochs=pick("scale_epochs", base.scale_epochs),
    )


def _echo_run(r: E.ExperimentResult) -> None:
    click.echo(f"{r.method:>16} frac={r.fraction:<4g} seed={r.seed} acc={r.test_accuracy:.4f} "
               f"magsim={r.magsim:.3f} angsim={r.angsim:.3f} ({r.runtime:.1f}s)", err=True)


def _finish(results, out: str | None) -> None:
    agg = E.aggregate(results)
    agg_sim = {"angsim": E.aggregate(results, "angsim"), "magsim": E.aggregate(results, "magsim")}
    summary = {"test_accuracy": agg, **agg_sim}
    if out:
        E.write_results_json(results, out, summary)
    click.echo(json.dumps(summary, indent=2))


@click.group()
def main():
    """Knowledge distillation with boundary supporting samples."""


@main.command("train-teacher")
@experiment_options
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Where to write the teacher (.npz).")
def train_teacher_cmd(out, **kw):
    """Train a teacher on the configured dataset and save it."""
    cfg = build_config(click.get_current_context(), kw)
    ds = E.build_dataset(cfg.data)
    model = E.train_teacher(cfg, ds)
    M.save(model, out)
    click.echo(json.dumps({"path": out, "test_accuracy": M.accuracy(model, ds.x_test, ds.y_test), "config": cfg.to_dict()}, indent=2))


@main.command()
@experiment_options
@click.option("--method", default="bss", show_default=True, help=f"One of {', '.join(sorted(METHODS))}.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="runs", show_default=True)
def distill(method, seed, out_dir, **kw):
    """Train one student and write its JSON summary, epoch log and weights."""
    (method,) = _methods(method)
    cfg = build_config(click.get_current_context(), kw, method=method, seed=seed)
    r = E.run_single(cfg, E.TeacherCache(kw["teacher_cache"]))
    _echo_run(r)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{method}-seed{seed}"
    E.write_results_json([r], out / f"{stem}.json")
    write_log_csv(r.history, out / f"{stem}-epochs.csv")
    M.save(r.model, out / f"{stem}.npz")
    click.echo(json.dumps(r.summary(), indent=2, default=float))


def _recipe_command(name: str, recipe: str, methods_default: str, doc: str, fractions: bool = False):
    @experiment_options
    @click.option("--methods", default=methods_default, show_default=True)
    @click.option("--seeds", default="0-9", show_default=True)
    @click.option("--out", type=click.Path(dir_okay=False), help="JSON file for all runs and the aggregate.")
    def cmd(methods, seeds, out, fractions="", **kw):
        cfg = build_config(click.get_current_context(), kw)
        extra = {"fractions": _floats(fractions)} if fractions else {}
        results = E.run_experiment(recipe, cfg, seeds=_seed_list(seeds), cache=E.TeacherCache(kw["teacher_cache"]),
                                   methods=_methods(methods), progress=_echo_run, **extra)
        _finish(results, out)

    cmd.__doc__ = doc
    if fractions:
        cmd = click.option("--fractions", default="1.0,0.8,0.6,0.4,0.2", show_default=True)(cmd)
    main.command(name)(cmd)


_recipe_command("sweep", "sweep", "original,hinton,bss", "Accuracy versus share of training data kept.", fractions=True)
_recipe_command("compare-attacks", "attacks", ",".join(E.ATTACK_METHODS), "Distil with other kinds of extra samples.")
_recipe_command("ablate", "ablation", ",".join(E.ABLATION_METHODS), "Base-sample selection and target-class ablation.")


@main.command()
@experiment_options
@click.option("--models", "model_paths", nargs=2, type=click.Path(exists=True, dir_okay=False),
              help="Compare two saved models (teacher first) instead of training students.")
@click.option("--methods", default="original,hinton,bss", show_default=True)
@click.option("--seeds", default="0-9", show_default=True)
@click.option("--samples", type=int, default=200, show_default=True, help="Test samples used as attack bases.")
@click.option("--out", type=click.Path(dir_okay=False), help="JSON report.")
@click.option("--pairs-csv", type=click.Path(dir_okay=False), help="Per-pair rows (two-model mode).")
def similarity(model_paths, methods, seeds, samples, out, pairs_csv, **kw):
    """MagSim / AngSim between teacher and student decision boundaries."""
    cfg = build_config(click.get_current_context(), kw)
    cfg = dataclasses.replace(cfg, similarity_samples=samples)
    if model_paths:
        a, b = (M.load(p) for p in model_paths)
        ds = E.build_dataset(cfg.data)
        d = cfg.distill
        rep = compare_classifiers(a, b, ds.x_test[:samples], ds.y_test[:samples], AttackConfig(d.attack_lr, d.attack_eps, d.attack_max_iter))
        if out:
            rep.write_json(out)
        if pairs_csv:
            rep.write_pairs_csv(pairs_csv)
        click.echo(json.dumps(rep.to_dict(), indent=2))
        return
    results = E.run_experiment("similarity", cfg, seeds=_seed_list(seeds), cache=E.TeacherCache(kw["teacher_cache"]),
                               methods=_methods(methods), progress=_echo_run)
    _finish(results, out)


@main.command("grid-dump")
@experiment_options
@click.option("--methods", default="original,bss", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--resolution", type=int, default=101, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="CSV of grid points and logits.")
def grid_dump(methods, seed, resolution, out, **kw):
    """Teacher and student logits over a 2-D probe grid, for external plotting."""
    cfg = build_config(click.get_current_context(), kw, seed=seed)
    cache = E.TeacherCache(kw["teacher_cache"])
    ds = E.build_dataset(cfg.data)
    if ds.input_shape != (2,):
        raise click.ClickException("grid-dump needs a 2-D dataset")
    teacher = cache.get(cfg, ds)
    students = {}
    for m in _methods(methods):
        r = E.run_single(cfg.with_(method=m, seed=seed), cache)
        _echo_run(r)
        students[m] = r.model
    _, _, pts = E.probe_grid(np.concatenate([ds.x_train, ds.x_test]), resolution)
    E.write_grid_csv(out, pts, {"teacher": teacher, **students})
    click.echo(out)


if __name__ == "__main__":
    sys.exit(main())
