"""Command-line pipeline: teach, distill, eval, analyze.

Every command reads one config file, derives all randomness from the master
seed, writes its artifacts under a per-run output directory, and records a
manifest tying artifacts to the config hash that produced them.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 failed
acceptance threshold in ``eval --assert`` mode.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import config as cfgmod
from . import data as datamod
from . import distill as distmod
from . import evaluate as evalmod
from . import models as modmod
from . import trajectories as trajmod
from .errors import ConfigError, DistillkitError
from .models import ArchSpec


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="distillkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("teach", "pretrain teacher networks and store their trajectories"),
        ("distill", "run the distillation loop against stored trajectories"),
        ("eval", "train fresh students on distilled/random/original data"),
        ("analyze", "summarize per-dimension gaps against final weights"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="path to the config file")
        p.add_argument("--out", default=None, help="output directory (default runs/<hash12>)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--mode", choices=distmod.MODES, default=None,
                       help="override distill.mode")
        if name == "eval":
            p.add_argument("--assert", dest="assert_gain", action="store_true",
                           help="exit 3 unless distilled beats random by the "
                                "configured margin")
    return parser


def _load_settings(args) -> tuple[cfgmod.Settings, str]:
    settings = cfgmod.load_config(args.config)
    if args.seed is not None:
        settings.run.seed = args.seed
    if args.mode is not None:
        settings.distill.mode = args.mode
    settings.validate()
    return settings, cfgmod.config_hash(settings)


def _out_dir(args, cfg_hash: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / cfg_hash[:12]
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_precision(settings) -> None:
    ad.set_default_dtype(np.float32 if settings.run.precision == "f32" else np.float64)


def _build_data(settings):
    """Returns (train, test, raw_train_hash); applies ZCA when enabled."""
    d = settings.data
    if d.kind == "synthetic":
        train, test = datamod.synthetic_split(
            d.classes, d.train_per_class, d.test_per_class, d.image_size,
            d.channels, d.cluster_std, settings.seeds()["data"],
        )
    else:
        train, _ = datamod.load_dataset(d.path)
        if d.test_path:
            test, _ = datamod.load_dataset(d.test_path)
        else:
            test = None
    raw_hash = datamod.dataset_hash(train)
    if d.zca:
        transform = datamod.zca_fit(train, d.zca_lambda)
        train = datamod.whiten_dataset(transform, train)
        if test is not None:
            test = datamod.whiten_dataset(transform, test)
    return train, test, raw_hash


def _arch(settings, train) -> ArchSpec:
    return ArchSpec(
        kind=settings.model.kind,
        depth=settings.model.depth,
        width=settings.model.width,
        input_shape=train.image_shape,
        classes=train.classes,
    )


def _teacher_opt(settings) -> trajmod.TeacherOptConfig:
    t = settings.teacher
    return trajmod.TeacherOptConfig(t.lr, t.momentum, t.weight_decay, t.batch_size)


def _teacher_seeds(settings) -> list[int]:
    base = settings.seeds()["teachers"]
    children = np.random.SeedSequence(base).spawn(settings.teacher.count)
    return [int(c.generate_state(1)[0]) for c in children]


def _write_manifest(out: Path, command: str, settings, cfg_hash: str,
                    dataset_hash: str, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config_hash": cfg_hash,
        "tool_version": __version__,
        "dataset_hash": dataset_hash,
        "seeds": settings.seeds(),
        "master_seed": settings.run.seed,
        "mode": settings.distill.mode,
        "precision": settings.run.precision,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "cpu_count": os.cpu_count(),
        "omp_num_threads": os.environ.get("OMP_NUM_THREADS"),
        "outputs": outputs,
    }
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _write_csv(path: Path, cfg_hash: str, header: list[str], rows) -> None:
    lines = [f"# manifest: {cfg_hash}", ",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _read_csv(path: Path):
    header, rows = None, []
    for line in path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if header is None:
            header = line.split(",")
        else:
            rows.append(line.split(","))
    if header is None:
        raise DistillkitError(f"{path} contains no table")
    return header, rows


# ---------------------------------------------------------------------------
# commands


def cmd_teach(args) -> int:
    settings, cfg_hash = _load_settings(args)
    _apply_precision(settings)
    out = _out_dir(args, cfg_hash)
    train, _, raw_hash = _build_data(settings)
    spec = _arch(settings, train)
    paths, teach_hash, reused = trajmod.ensure_teachers(
        out / "teachers", train, raw_hash, spec, settings.teacher.count,
        settings.teacher.epochs, _teacher_opt(settings), _teacher_seeds(settings),
    )
    if reused:
        print(f"reused {len(paths)} trajectories ({teach_hash[:16]})")
    else:
        print(f"trained {len(paths)} teachers x {settings.teacher.epochs} epochs "
              f"({teach_hash[:16]})")
    _write_manifest(out, "teach", settings, cfg_hash, raw_hash, [str(p) for p in paths])
    return 0


def _require_teachers(out: Path, settings, train, raw_hash, spec):
    teach_hash = trajmod.teacher_config_hash(
        raw_hash, spec, settings.teacher.count, settings.teacher.epochs,
        _teacher_opt(settings), _teacher_seeds(settings),
    )
    root = out / "teachers" / teach_hash[:16]
    if not (root / "manifest.json").exists():
        found = sorted(p.name for p in (out / "teachers").glob("*/")) \
            if (out / "teachers").exists() else []
        raise DistillkitError(
            f"no trajectories for config hash {teach_hash[:16]} under {out / 'teachers'}"
            + (f" (found stores: {', '.join(found)})" if found else "")
            + "; run `distillkit teach` first"
        )
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["config_hash"] != teach_hash:
        raise DistillkitError(
            f"trajectory store hash {manifest['config_hash']} != expected {teach_hash}"
        )
    paths = sorted(root.glob("teacher_*.traj"))
    return [trajmod.load_trajectory(p) for p in paths]


def _distill_config(settings) -> distmod.DistillConfig:
    d = settings.distill
    return distmod.DistillConfig(
        iterations=d.iterations,
        student_steps=d.student_steps,
        teacher_window=d.teacher_window,
        start_bound=d.start_bound,
        alpha_init=d.alpha_init,
        alpha_lr=d.alpha_lr,
        weight_lr=d.weight_lr,
        image_lr=d.image_lr,
        mode=d.mode,
        prune_threshold=d.prune_threshold,
        ipc=d.ipc,
        batch_size=d.batch_size,
        augment_policy=d.augment,
        seed=settings.seeds()["distill"],
        checkpoint_interval=d.checkpoint_interval,
    )


def _save_bundle(dir_path: Path, state_alpha, weights, distilled, iteration, cfg_hash):
    dir_path.mkdir(parents=True, exist_ok=True)
    manifest = {"config_hash": cfg_hash, "iteration": iteration}
    datamod.save_distilled(dir_path / "distilled.tds", distilled, manifest)
    distmod.save_weights(dir_path / "weights.wadp", weights)
    (dir_path / "meta.json").write_text(
        json.dumps(
            {"alpha": state_alpha, "iteration": iteration, "config_hash": cfg_hash},
            indent=2, sort_keys=True,
        )
    )


def cmd_distill(args) -> int:
    settings, cfg_hash = _load_settings(args)
    _apply_precision(settings)
    out = _out_dir(args, cfg_hash)
    train, _, raw_hash = _build_data(settings)
    spec = _arch(settings, train)
    trajectories = _require_teachers(out, settings, train, raw_hash, spec)
    cfg = _distill_config(settings)

    run_dir = out / "distill"
    run_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(state, iteration):
        _save_bundle(run_dir / f"checkpoint_{iteration:06d}", state.alpha,
                     state.weights, state.distilled, iteration, cfg_hash)

    result = distmod.run_distillation(cfg, trajectories, train, spec,
                                      checkpoint_fn=checkpoint)

    _save_bundle(run_dir / "final", result.alpha, result.weights,
                 result.distilled, cfg.iterations, cfg_hash)
    _write_csv(
        run_dir / "report.csv", cfg_hash,
        ["iteration", "loss", "numerator", "denominator", "alpha",
         "w_mean", "w_std", "w_min", "w_max"],
        ([r.iteration, r.loss, r.numerator, r.denominator, r.alpha,
          r.w_mean, r.w_std, r.w_min, r.w_max] for r in result.report),
    )
    outputs = [str(run_dir / "report.csv"), str(run_dir / "final")]
    if settings.distill.analysis:
        names = modmod.build_layout(spec).names_per_dim()
        _write_csv(
            run_dir / "analysis.csv", cfg_hash,
            ["dimension", "layer", "mean_abs_diff", "final_weight"],
            ((i, names[i], result.mean_abs_diff[i], result.weights[i])
             for i in range(len(result.weights))),
        )
        outputs.append(str(run_dir / "analysis.csv"))
    _write_manifest(out, "distill", settings, cfg_hash, raw_hash, outputs)
    final_loss = result.report[-1].loss if result.report else float("nan")
    print(f"distilled {cfg.iterations} iterations ({result.aborted} aborted), "
          f"final loss {final_loss:.6g}, alpha {result.alpha:.6g}")
    return 0


def cmd_eval(args) -> int:
    settings, cfg_hash = _load_settings(args)
    _apply_precision(settings)
    out = _out_dir(args, cfg_hash)
    train, test, raw_hash = _build_data(settings)
    if test is None:
        raise ConfigError("evaluation needs a test split (data.test_path for file data)")
    spec = _arch(settings, train)

    final_dir = out / "distill" / "final"
    if not (final_dir / "distilled.tds").exists():
        raise DistillkitError(f"no distilled checkpoint at {final_dir}; run distill first")
    distilled, _ = datamod.load_distilled(final_dir / "distilled.tds", settings.distill.ipc)
    meta = json.loads((final_dir / "meta.json").read_text())
    learned_alpha = meta["alpha"] if settings.eval.use_learned_alpha else None

    e = settings.eval
    eval_cfg = evalmod.EvalConfig(
        trials=e.trials, epochs=e.epochs, lr=e.lr, momentum=e.momentum,
        batch_size=e.batch_size,
        augment_policy=e.augment if e.augment else settings.distill.augment,
        seed=settings.seeds()["eval"],
    )
    archs = [spec] + [
        ArchSpec(k, d, w, train.image_shape, train.classes)
        for k, d, w in map(cfgmod.parse_arch_token, e.architectures)
    ]

    reports = []
    for arch in archs:
        reports.extend(
            evalmod.cross_arch_eval(
                distilled.images, distilled.labels_onehot, [arch], test, eval_cfg,
                learned_alpha=learned_alpha,
                dataset_label=f"distilled ipc={settings.distill.ipc}",
            )
        )
        reports.append(evalmod.baseline_random(train, settings.distill.ipc, arch,
                                               test, eval_cfg))
        reports.append(
            evalmod.train_eval_student(
                train.images, datamod.one_hot(train.labels, train.classes),
                arch, test, eval_cfg, dataset_label="full original",
            )
        )

    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(
        eval_dir / "reports.csv", cfg_hash,
        ["dataset", "architecture", "mean", "std", "trials", "failures", "accuracies"],
        ([r.dataset_label, r.arch_label, r.mean, r.std, r.trials, r.failures,
          ";".join(f"{a:.6f}" for a in r.accuracies)] for r in reports),
    )
    print(f"{'dataset':>24s}  {'architecture':<14s}  accuracy")
    for r in reports:
        print(r.summary())
    _write_manifest(out, "eval", settings, cfg_hash, raw_hash,
                    [str(eval_dir / "reports.csv")])

    if getattr(args, "assert_gain", False):
        distilled_mean = reports[0].mean
        random_mean = reports[1].mean
        gain = 100 * (distilled_mean - random_mean)
        if not np.isfinite(gain) or gain < e.assert_min_gain:
            print(f"ASSERT FAILED: gain {gain:.2f} points < required "
                  f"{e.assert_min_gain:.2f}", file=sys.stderr)
            return 3
        print(f"assert ok: gain {gain:.2f} points >= {e.assert_min_gain:.2f}")
    return 0


def cmd_analyze(args) -> int:
    settings, cfg_hash = _load_settings(args)
    out = _out_dir(args, cfg_hash)
    analysis_path = out / "distill" / "analysis.csv"
    if not analysis_path.exists():
        raise DistillkitError(
            f"no analysis dump at {analysis_path}; rerun distill with "
            "distill.analysis = true"
        )
    header, rows = _read_csv(analysis_path)
    diffs = np.array([float(r[2]) for r in rows])
    weights = np.array([float(r[3]) for r in rows])
    order = np.argsort(diffs)
    deciles = np.array_split(order, 10)

    analyze_dir = out / "analysis"
    analyze_dir.mkdir(parents=True, exist_ok=True)
    out_rows = []
    for d, idx in enumerate(deciles, start=1):
        out_rows.append([d, len(idx), float(diffs[idx].mean()), float(weights[idx].mean())])
    _write_csv(analyze_dir / "deciles.csv", cfg_hash,
               ["decile_by_abs_diff", "dimensions", "mean_abs_diff", "mean_weight"],
               out_rows)
    print("decile  dims  mean|diff|   mean weight")
    for d, n, md, mw in out_rows:
        print(f"{d:>6d}  {n:>4d}  {md:10.6f}  {mw:12.6f}")
    low, high = out_rows[0][3], out_rows[-1][3]
    print(f"bottom-decile mean weight {low:.6f}, top-decile mean weight {high:.6f}")
    _write_manifest(out, "analyze", settings, cfg_hash, "", [str(analyze_dir / "deciles.csv")])
    return 0


_COMMANDS = {"teach": cmd_teach, "distill": cmd_distill, "eval": cmd_eval,
             "analyze": cmd_analyze}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DistillkitError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
