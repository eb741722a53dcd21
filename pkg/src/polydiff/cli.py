"""Command-line entry point.

Subcommands: gen-data, train-diffusion, sample, run, sweep, analyze,
repro-fig1, repro-fig2.  Every command resolves its settings from an
optional YAML config file plus flag overrides, writes a metadata record
(config hash, seed, version) into the output directory before any results,
and exits nonzero with a stage-tagged message on failure.

The default output root is the POLYDIFF_OUT environment variable, falling
back to ./out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import (
    constant_field_check,
    contraction_battery,
    distribution_diagnostics,
    fixed_point_report,
    mean_policy_loglik,
    save_report,
)
from .diffusion import (
    heun_sample,
    load_checkpoint,
    model_denoise_fn,
    save_checkpoint,
    save_loss_curve,
)
from .games import (
    GameKind,
    TrajectoryLayout,
    gen_dataset,
    load_dataset,
    multiplication,
    save_dataset,
    twin_peaks,
)
from .guidance import (
    GuidanceHook,
    GuidanceMode,
    cfg_denoise_fn,
    make_classifier_guide,
)
from .marl import JointPolicy, LearnerConfig
from .pipeline import (
    RunConfig,
    Variant,
    config_from_dict,
    config_hash,
    config_to_dict,
    run,
    save_run_log,
    sweep,
)
from .plotting import fig_dataset_scatter, fig_policy_paths, fig_return_curves
from .transforms import cdf_inverse

OUT_ENV = "POLYDIFF_OUT"

SAMPLE_COLUMNS = ("obs_x", "obs_y", "ax", "ay", "reward")


@contextmanager
def _stage(name: str):
    """Re-raise any failure with the pipeline stage prepended."""
    try:
        yield
    except Exception as exc:
        raise RuntimeError(f"[{name}] {exc}") from exc


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "out"))


def _load_config(args) -> RunConfig:
    obj = {}
    if args.config:
        obj = yaml.safe_load(Path(args.config).read_text()) or {}
    config = config_from_dict(obj)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None):
        overrides["variant"] = Variant(args.variant)
    if getattr(args, "alpha", None) is not None:
        overrides["alpha"] = args.alpha
    if getattr(args, "lambda_scale", None) is not None:
        overrides["guidance"] = GuidanceHook(
            mode=GuidanceMode.CLASSIFIER if args.lambda_scale > 0 else config.guidance.mode,
            lam=args.lambda_scale,
            w=config.guidance.w,
            schedule=config.guidance.schedule,
            surrogate_std=config.guidance.surrogate_std,
        )
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    return config


def _write_metadata(outdir: Path, command: str, config: RunConfig) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "version": __version__,
        "config": config_to_dict(config),
    }
    (outdir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")


def _write_config_echo(outdir: Path, config: RunConfig) -> None:
    (outdir / "config.yaml").write_text(
        yaml.safe_dump(config_to_dict(config), sort_keys=False)
    )


def _save_samples(rows: np.ndarray, path: Path) -> None:
    lines = ["\t".join(SAMPLE_COLUMNS)]
    lines += ["\t".join(f"{v:.17g}" for v in row) for row in np.atleast_2d(rows)]
    path.write_text("\n".join(lines) + "\n")


def _load_samples(path: Path) -> np.ndarray:
    rows = Path(path).read_text().strip().split("\n")[1:]
    return np.array([[float(v) for v in row.split("\t")] for row in rows])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    config = _load_config(args)
    outdir = _out_root(args) / "dataset"
    _write_metadata(outdir, "gen-data", config)
    with _stage("dataset"):
        ds = gen_dataset(config.game, config.n_data, config.seed,
                         law=config.data_law, mean=config.data_mean,
                         std=config.data_std)
        save_dataset(ds, outdir / "dataset.tsv")
    print(f"wrote {len(ds)}-row dataset under {outdir}")
    return 0


def cmd_train_diffusion(args) -> int:
    from .pipeline import _train_prior  # shared conditioning rules
    from .transforms import cdf_fit, cdf_forward

    config = _load_config(args)
    outdir = _out_root(args) / "diffusion"
    _write_metadata(outdir, "train-diffusion", config)
    with _stage("dataset"):
        ds = gen_dataset(config.game, config.n_data, config.seed,
                         law=config.data_law, mean=config.data_mean,
                         std=config.data_std)
        save_dataset(ds, outdir / "dataset.tsv")
        matrix = ds.as_matrix()
        normalizer = cdf_fit(matrix)
        data_z = cdf_forward(normalizer, matrix)
    with _stage("diffusion"):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
        model, losses = _train_prior(config, ds, normalizer, data_z, rng)
        save_checkpoint(model, outdir / "checkpoint.npz", normalizer)
        save_loss_curve(losses, outdir / "loss_curve.tsv")
    print(f"checkpoint and loss curve written under {outdir} "
          f"(final loss {losses[-1]:.4f})")
    return 0


def cmd_sample(args) -> int:
    config = _load_config(args)
    outdir = _out_root(args) / "samples"
    _write_metadata(outdir, "sample", config)
    with _stage("sampling"):
        model, normalizer = load_checkpoint(args.checkpoint)
        if normalizer is None:
            raise ValueError("checkpoint has no normalizer sidecar")
        layout = TrajectoryLayout(horizon=model.d_tau // TrajectoryLayout.BLOCK)
        theta = (args.theta_x, args.theta_y)
        policy = JointPolicy(theta[0], theta[1])
        guide_fn = None
        if model.cond_dim == 2:
            denoise_fn = cfg_denoise_fn(model, np.array(theta), config.guidance.w)
        elif model.cond_dim == 1:
            if args.condition is None:
                raise ValueError("a return-conditioned model needs --condition")
            denoise_fn = cfg_denoise_fn(model, np.array([args.condition]),
                                        config.guidance.w)
        else:
            denoise_fn = model_denoise_fn(model)
            if config.guidance.lam > 0:
                guide_fn = make_classifier_guide(config.guidance, policy,
                                                 layout, normalizer)
        rng = np.random.default_rng(config.seed)
        z = heun_sample(denoise_fn, layout.dim, config.schedule, args.n, rng,
                        guide_fn=guide_fn)
        rows = cdf_inverse(normalizer, z)
        _save_samples(rows, outdir / "samples.tsv")
    print(f"wrote {args.n} samples under {outdir}")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    outdir = _out_root(args) / f"run-{config.variant.value}-s{config.seed}"
    _write_metadata(outdir, "run", config)
    _write_config_echo(outdir, config)
    with _stage("run"):
        log = run(config)
        save_run_log(log, outdir)
        save_dataset(log.dataset, outdir / "dataset.tsv")
        if log.diffusion_losses is not None:
            save_loss_curve(log.diffusion_losses, outdir / "loss_curve.tsv")
    print(f"{config.variant.value} seed {config.seed}: "
          f"final return {log.final_return:.4f} -> {outdir}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    raw = {}
    if args.config:
        raw = yaml.safe_load(Path(args.config).read_text()) or {}
    variants = [Variant(v) for v in raw.get("variants", [config.variant.value])]
    seeds = [int(s) for s in raw.get("seeds", [config.seed])]
    outdir = _out_root(args) / "sweep"
    _write_metadata(outdir, "sweep", config)
    with _stage("sweep"):
        from dataclasses import replace

        configs = [replace(config, variant=v, seed=s) for v in variants for s in seeds]
        result = sweep(configs)
        (outdir / "rows.tsv").write_text(result.to_text() + "\n")
        agg = result.aggregate()
        lines = ["variant\tn\tmean_return\tstderr"]
        lines += [f"{r['variant']}\t{r['n']}\t{r['mean_return']:.17g}\t{r['stderr']:.17g}"
                  for r in agg]
        (outdir / "aggregate.tsv").write_text("\n".join(lines) + "\n")
    print(f"swept {len(configs)} runs -> {outdir}")
    return 0


def cmd_analyze(args) -> int:
    config = _load_config(args)
    outdir = _out_root(args) / "analysis"
    _write_metadata(outdir, "analyze", config)
    sections: list[str] = []
    with _stage("analysis"):
        battery = contraction_battery(
            [-0.5, 0.0, 0.1, 0.5, 1.0, 1.5, 2.0, 2.5], trials=100, seed=config.seed
        )
        save_report(battery, outdir / "contraction.tsv")
        sections.append("# contraction battery\n" + battery.to_text())
        if args.dataset:
            ds = load_dataset(args.dataset)
            if ds.game.kind is GameKind.MULTIPLICATION:
                field_report = constant_field_check(ds.game, ds, seed=config.seed)
                save_report(field_report, outdir / "constant_field.tsv")
                sections.append("# constant gradient field\n" + field_report.to_text())
            if (ds.game.kind is GameKind.TWIN_PEAKS
                    and args.theta_x is not None and args.theta_y is not None):
                fp = fixed_point_report(ds.game, ds,
                                        np.array([args.theta_x, args.theta_y]))
                save_report(fp, outdir / "fixed_point.tsv")
                sections.append("# twin-peaks fixed point\n" + fp.to_text())
            if args.samples:
                rows = _load_samples(args.samples)
                diag = distribution_diagnostics(rows, ds.as_matrix())
                save_report(diag, outdir / "distribution.tsv")
                sections.append("# distribution diagnostics\n" + diag.to_text())
                layout = ds.layout
                actions = layout.actions_from_flat(rows)
                policy = JointPolicy(args.theta_x or 0.0, args.theta_y or 0.0)
                ll = mean_policy_loglik(actions, policy, config.guidance.surrogate_std)
                sections.append(f"# mean policy log-likelihood\nloglik\t{ll:.17g}")
        (outdir / "analysis.txt").write_text("\n\n".join(sections) + "\n")
    print(f"analysis written under {outdir}")
    return 0


# ---------------------------------------------------------------------------
# Figure reproduction
# ---------------------------------------------------------------------------

FIG_VARIANTS = (Variant.BASELINE, Variant.UNCOND_AUG, Variant.QCOND_AUG,
                Variant.POLICY_CFG)


def report_config(game_name: str, variant: Variant, seed: int) -> RunConfig:
    """Shipped per-variant settings for the two report experiments.

    The multiplication game uses the stock mini-batch learner on a plain
    uniform dataset.  The twin-peaks game uses full-batch updates on an
    antithetically symmetrized dataset so the converged baseline matches the
    closed-form stationary point exactly, and takes many short policy bursts
    between generation rounds: with its strong cross-agent coupling, long
    bursts against a one-round-old synthetic pool make the two agents chase
    each other's stale actions and oscillate between the off-diagonal
    quadrants instead of settling on a peak.
    """
    if game_name == "multiplication":
        game = multiplication()
        data_law = "uniform"
        learner = LearnerConfig()
        pacing = {}
    elif game_name == "twin_peaks":
        game = twin_peaks(1.0, 4.0, 5.0)
        data_law = "uniform_symmetric"
        learner = LearnerConfig(batch=None)
        pacing = {"n_epochs": 60, "n_policy": 2}
    else:
        raise ValueError(f"unknown report game {game_name!r}")
    guidance = {
        Variant.BASELINE: GuidanceHook(),
        Variant.UNCOND_AUG: GuidanceHook(),
        Variant.QCOND_AUG: GuidanceHook(mode=GuidanceMode.QCOND, w=1.0),
        Variant.POLICY_CFG: GuidanceHook(mode=GuidanceMode.CFG, w=1.0),
        Variant.POLICY_CLASSIFIER: GuidanceHook(mode=GuidanceMode.CLASSIFIER,
                                                lam=0.5),
    }[variant]
    return RunConfig(variant=variant, game=game, seed=seed, data_law=data_law,
                     learner=learner, guidance=guidance, **pacing)


def _quick_overrides(config: RunConfig) -> RunConfig:
    """Shrink a report config to smoke-test scale (seconds, not minutes)."""
    from dataclasses import replace

    return replace(config, n_data=1000, diff_epochs=600, n_epochs=6,
                   syn_batch=200)


def _repro_figure(args, game_name: str, tag: str) -> int:
    seed = args.seed if args.seed is not None else 0
    outdir = _out_root(args) / tag
    _write_metadata(outdir, tag, report_config(game_name, Variant.BASELINE, seed))
    runs = {}
    dataset = None
    for variant in FIG_VARIANTS:
        config = report_config(game_name, variant, seed)
        if args.quick:
            config = _quick_overrides(config)
        with _stage(variant.value):
            log = run(config, dataset=dataset)
            dataset = log.dataset  # one shared offline dataset for all variants
            save_run_log(log, outdir / "runs" / variant.value)
            runs[variant.value] = log.steps
        print(f"  {variant.value}: final return {log.final_return:.4f}")
    with _stage("plotting"):
        save_dataset(dataset, outdir / "dataset.tsv")
        game = dataset.game
        fig_dataset_scatter(dataset, outdir / f"{tag}_dataset.svg")
        fig_policy_paths(game, runs, outdir / f"{tag}_paths.svg")
        fig_return_curves(runs, outdir / f"{tag}_returns.svg")
    print(f"figure panels and data written under {outdir}")
    return 0


def cmd_repro_fig1(args) -> int:
    return _repro_figure(args, "multiplication", "fig1")


def cmd_repro_fig2(args) -> int:
    return _repro_figure(args, "twin_peaks", "fig2")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polydiff",
        description="Trajectory diffusion with policy-guided sampling for "
                    "two-player polynomial games",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", type=str, default=None,
                       help=f"output root (default ${OUT_ENV} or ./out)")

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-diffusion", help="train a diffusion prior")
    common(p)
    p.add_argument("--variant", type=str, default=None,
                   help="variant whose conditioning to train for")
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("sample", help="sample from a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--lambda", dest="lambda_scale", type=float, default=None,
                   help="classifier guidance scale")
    p.add_argument("--theta-x", type=float, default=0.0)
    p.add_argument("--theta-y", type=float, default=0.0)
    p.add_argument("--condition", type=float, default=None,
                   help="scalar condition for return-conditioned models")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("run", help="run one experiment variant end to end")
    common(p)
    p.add_argument("--variant", type=str, default=None,
                   choices=[v.value for v in Variant])
    p.add_argument("--lambda", dest="lambda_scale", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of variants and seeds")
    common(p)
    p.add_argument("--variant", type=str, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="closed-form checks and diagnostics")
    common(p)
    p.add_argument("--dataset", type=str, default=None, help="dataset TSV path")
    p.add_argument("--samples", type=str, default=None, help="samples TSV path")
    p.add_argument("--theta-x", type=float, default=None)
    p.add_argument("--theta-y", type=float, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("repro-fig1",
                       help="reproduce the multiplication-game report")
    common(p)
    p.add_argument("--quick", action="store_true",
                   help="smoke-test scale (much smaller prior and fewer epochs)")
    p.set_defaults(func=cmd_repro_fig1)

    p = sub.add_parser("repro-fig2", help="reproduce the twin-peaks report")
    common(p)
    p.add_argument("--quick", action="store_true",
                   help="smoke-test scale (much smaller prior and fewer epochs)")
    p.set_defaults(func=cmd_repro_fig2)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single exit point with stage tag
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
