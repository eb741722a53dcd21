"""Experiment orchestration: train a trajectory-diffusion prior on the
offline data, then alternate synthetic generation and best-response policy
updates under one of five variants.

Variants
--------
* baseline           — no generation; plain best-response training on the
                       offline data.
* uncond             — unconditional synthetic pool, generated once and
                       reused every epoch (the static-augmentation control).
* qcond              — return-conditioned pool via classifier-free guidance
                       toward the dataset's best recorded return; also static.
* policy-cfg         — classifier-free guidance with the current policy
                       parameters as the condition; regenerated every epoch.
* policy-classifier  — classifier guidance from the joint-policy score toward
                       the current policy; regenerated every epoch.

All randomness derives from one seed through named child streams, so a run
is fully reproducible from its config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import guidance as gd
from .analysis import mean_policy_loglik
from .diffusion import (
    DenoiserModel,
    NoiseSchedule,
    TrainNoiseLaw,
    estimate_sigma_data,
    heun_sample,
    model_denoise_fn,
    train,
)
from .games import GameSpec, OfflineDataset, gen_dataset, multiplication, twin_peaks
from .guidance import GuidanceHook, GuidanceMode, ScheduleKind
from .marl import (
    JointPolicy,
    LearnerConfig,
    StepRecord,
    brud_gradient,
    evaluate,
    save_policy_log,
    train_brud,
    update,
)
from .transforms import cdf_fit, cdf_forward, cdf_inverse

__all__ = [
    "Variant",
    "RunConfig",
    "EpochRecord",
    "RunLog",
    "run",
    "sweep",
    "config_to_dict",
    "config_from_dict",
    "config_hash",
    "save_run_log",
]


class Variant(Enum):
    BASELINE = "baseline"
    UNCOND_AUG = "uncond"
    QCOND_AUG = "qcond"
    POLICY_CFG = "policy-cfg"
    POLICY_CLASSIFIER = "policy-classifier"


ON_POLICY_VARIANTS = (Variant.POLICY_CFG, Variant.POLICY_CLASSIFIER)
STATIC_VARIANTS = (Variant.UNCOND_AUG, Variant.QCOND_AUG)


@dataclass(frozen=True)
class RunConfig:
    variant: Variant = Variant.BASELINE
    game: GameSpec = field(default_factory=multiplication)
    seed: int = 0
    # offline dataset
    n_data: int = 4000
    data_law: str = "uniform"
    data_mean: tuple[float, float] | None = None
    data_std: float | None = None
    # policy learning
    learner: LearnerConfig = LearnerConfig()
    n_epochs: int = 20
    n_policy: int = 10
    syn_batch: int = 1000  # B, synthetic trajectories per generation round
    alpha: float = 1.0  # synthetic fraction of the per-epoch training pool
    gen_every: int = 1  # epochs between generation rounds for on-policy variants
    guidance: GuidanceHook = GuidanceHook()
    # diffusion prior
    diff_epochs: int = 10000
    diff_batch: int = 1000
    diff_lr: float = 1e-2
    cond_dropout: float = 0.1
    hidden: tuple[int, ...] = (64, 64)
    schedule: NoiseSchedule = NoiseSchedule()
    noise_law: TrainNoiseLaw = TrainNoiseLaw()
    q_quantile: float | None = None  # None = condition on the max return

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.variant is not Variant.BASELINE and self.syn_batch < 1:
            raise ValueError("augmenting variants need syn_batch >= 1")

    @property
    def total_steps(self) -> int:
        return self.n_epochs * self.n_policy


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    theta_x: float
    theta_y: float
    ret: float
    syn_loglik: float  # mean policy log-likelihood of the epoch's pool, nan if none
    syn_mean_ax: float
    syn_mean_ay: float
    syn_std_ax: float
    syn_std_ay: float


@dataclass
class RunLog:
    variant: Variant
    seed: int
    steps: list[StepRecord]
    epochs: list[EpochRecord]
    final_policy: JointPolicy
    final_return: float
    dataset: OfflineDataset
    diffusion_losses: np.ndarray | None = None
    syn_pools: list[np.ndarray | None] = field(default_factory=list)  # actions per epoch


def _needs_model(variant: Variant) -> bool:
    return variant is not Variant.BASELINE


def _child_rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("diffusion", "generation", "policy")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


def _train_prior(config: RunConfig, dataset: OfflineDataset, normalizer,
                 data_z: np.ndarray, rng: np.random.Generator):
    """Train the variant's diffusion prior; returns (model, cond labels, losses)."""
    if config.variant is Variant.QCOND_AUG:
        cond, _ = gd.q_condition_labels(dataset, config.q_quantile)
    elif config.variant is Variant.POLICY_CFG:
        cond = gd.cfg_condition_labels(dataset)
    else:  # uncond / policy-classifier use an unconditional prior
        cond = None
    model = DenoiserModel(
        d_tau=data_z.shape[1],
        cond_dim=0 if cond is None else cond.shape[1],
        hidden=config.hidden,
        sigma_data=estimate_sigma_data(data_z),
        seed=config.seed,
    )
    losses = train(
        model,
        data_z,
        config.noise_law,
        rng,
        epochs=config.diff_epochs,
        batch=config.diff_batch,
        lr=config.diff_lr,
        cond=cond,
        cond_dropout=config.cond_dropout,
    )
    return model, losses


def _generate_pool(config: RunConfig, model: DenoiserModel, dataset: OfflineDataset,
                   normalizer, policy: JointPolicy, rng: np.random.Generator) -> np.ndarray:
    """One synthetic generation round; returns de-normalized (B, d_tau) rows."""
    layout = dataset.layout
    guide_fn = None
    if config.variant is Variant.UNCOND_AUG:
        denoise_fn = model_denoise_fn(model)
    elif config.variant is Variant.QCOND_AUG:
        _, target = gd.q_condition_labels(dataset, config.q_quantile)
        denoise_fn = gd.cfg_denoise_fn(model, target, config.guidance.w)
    elif config.variant is Variant.POLICY_CFG:
        denoise_fn = gd.cfg_denoise_fn(model, policy.theta, config.guidance.w)
    elif config.variant is Variant.POLICY_CLASSIFIER:
        denoise_fn = model_denoise_fn(model)
        guide_fn = gd.make_classifier_guide(config.guidance, policy, layout, normalizer)
    else:
        raise ValueError(f"variant {config.variant} does not generate")
    z = heun_sample(
        denoise_fn,
        d_tau=layout.dim,
        schedule=config.schedule,
        n=config.syn_batch,
        rng=rng,
        guide_fn=guide_fn,
    )
    return cdf_inverse(normalizer, z)


def _pool_actions(config: RunConfig, syn_actions: np.ndarray,
                  dataset: OfflineDataset, rng: np.random.Generator) -> np.ndarray:
    """Mix ratio alpha : (1 - alpha) of synthetic vs offline joint actions."""
    n_syn = int(round(config.alpha * config.syn_batch))
    n_off = config.syn_batch - n_syn
    parts = []
    if n_syn:
        parts.append(syn_actions[:n_syn])
    if n_off:
        parts.append(dataset.actions[rng.integers(0, len(dataset), size=n_off)])
    return np.concatenate(parts)


def run(config: RunConfig, dataset: OfflineDataset | None = None,
        model: DenoiserModel | None = None) -> RunLog:
    """Execute one full experiment per the configured variant.

    `dataset` and `model` can be injected to reuse expensive artifacts; both
    default to being built from the config (the model is trained from
    scratch on the config's diffusion stream).
    """
    rngs = _child_rngs(config.seed)
    if dataset is None:
        dataset = gen_dataset(
            config.game, config.n_data, config.seed,
            law=config.data_law, mean=config.data_mean, std=config.data_std,
        )
    layout = dataset.layout

    if config.variant is Variant.BASELINE:
        learner = replace(config.learner, steps=config.total_steps)
        steps = train_brud(config.game, dataset, learner, rngs["policy"])
        epochs = _epochs_from_steps(config, steps)
        final = JointPolicy(steps[-1].theta_x, steps[-1].theta_y,
                            config.game.action_low, config.game.action_high)
        return RunLog(config.variant, config.seed, steps, epochs, final,
                      steps[-1].ret, dataset, None, [None] * config.n_epochs)

    data_matrix = dataset.as_matrix()
    normalizer = cdf_fit(data_matrix)
    data_z = cdf_forward(normalizer, data_matrix)
    losses = None
    if model is None:
        model, losses = _train_prior(config, dataset, normalizer, data_z,
                                     rngs["diffusion"])

    policy = JointPolicy(*config.learner.init,
                         config.game.action_low, config.game.action_high).clipped()
    rng_policy = rngs["policy"]
    steps: list[StepRecord] = []
    epochs: list[EpochRecord] = []
    pools: list[np.ndarray | None] = []

    # Burn-in: sample offline batches without updating, as the plain learner does.
    for k in range(config.learner.burn_in):
        batch = _draw_batch(dataset.actions, config.learner.batch, rng_policy)
        grad = brud_gradient(config.game, batch, policy)
        steps.append(StepRecord(k, policy.theta_x, policy.theta_y,
                                evaluate(policy, config.game), grad[0], grad[1]))

    syn_rows: np.ndarray | None = None
    step_idx = config.learner.burn_in
    for epoch in range(1, config.n_epochs + 1):
        regenerate = syn_rows is None or (
            config.variant in ON_POLICY_VARIANTS
            and (epoch - 1) % config.gen_every == 0
        )
        if regenerate:
            syn_rows = _generate_pool(config, model, dataset, normalizer,
                                      policy, rngs["generation"])
        syn_actions = layout.actions_from_flat(syn_rows)[:, 0, :]
        syn_loglik = mean_policy_loglik(syn_actions, policy,
                                        config.guidance.surrogate_std)
        pools.append(syn_actions.copy())

        pool = _pool_actions(config, syn_actions, dataset, rng_policy)
        for _ in range(config.n_policy):
            batch = _draw_batch(pool, config.learner.batch, rng_policy)
            grad = brud_gradient(config.game, batch, policy)
            policy = update(policy, grad, config.learner)
            steps.append(StepRecord(step_idx, policy.theta_x, policy.theta_y,
                                    evaluate(policy, config.game), grad[0], grad[1]))
            step_idx += 1

        epochs.append(EpochRecord(
            epoch, policy.theta_x, policy.theta_y, evaluate(policy, config.game),
            syn_loglik,
            float(syn_actions[:, 0].mean()), float(syn_actions[:, 1].mean()),
            float(syn_actions[:, 0].std()), float(syn_actions[:, 1].std()),
        ))

    return RunLog(config.variant, config.seed, steps, epochs, policy,
                  evaluate(policy, config.game), dataset, losses, pools)


def _draw_batch(actions: np.ndarray, batch: int | None,
                rng: np.random.Generator) -> np.ndarray:
    if batch is None:
        return actions
    return actions[rng.integers(0, len(actions), size=batch)]


def _epochs_from_steps(config: RunConfig, steps: list[StepRecord]) -> list[EpochRecord]:
    """Baseline epoch summaries: every n_policy-th update, no generation stats."""
    out = []
    updates = steps[config.learner.burn_in:]
    for e in range(1, config.n_epochs + 1):
        r = updates[e * config.n_policy - 1]
        out.append(EpochRecord(e, r.theta_x, r.theta_y, r.ret,
                               float("nan"), float("nan"), float("nan"),
                               float("nan"), float("nan")))
    return out


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    variant: str
    seed: int
    final_return: float
    theta_x: float
    theta_y: float
    error: str = ""


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def aggregate(self) -> list[dict]:
        """Mean and standard error of the final return per variant."""
        groups: dict[str, list[float]] = {}
        for r in self.rows:
            if not r.error:
                groups.setdefault(r.variant, []).append(r.final_return)
        out = []
        for variant, vals in groups.items():
            arr = np.array(vals)
            se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
            out.append({"variant": variant, "n": len(arr),
                        "mean_return": float(arr.mean()), "stderr": se})
        return out

    def to_text(self) -> str:
        lines = ["variant\tseed\tfinal_return\ttheta_x\ttheta_y\terror"]
        for r in self.rows:
            lines.append(f"{r.variant}\t{r.seed}\t{r.final_return:.17g}\t"
                         f"{r.theta_x:.17g}\t{r.theta_y:.17g}\t{r.error}")
        return "\n".join(lines)


def sweep(configs: list[RunConfig]) -> SweepResult:
    """Run every config, recording failures without stopping the sweep."""
    if not configs:
        raise ValueError("sweep needs at least one config")
    rows = []
    for cfg in configs:
        try:
            log = run(cfg)
            rows.append(SweepRow(cfg.variant.value, cfg.seed, log.final_return,
                                 log.final_policy.theta_x, log.final_policy.theta_y))
        except Exception as exc:  # noqa: BLE001 - sweep must survive bad runs
            rows.append(SweepRow(cfg.variant.value, cfg.seed,
                                 float("nan"), float("nan"), float("nan"), str(exc)))
    return SweepResult(rows)


# ---------------------------------------------------------------------------
# Config serialization and run-log output
# ---------------------------------------------------------------------------

def config_to_dict(config: RunConfig) -> dict:
    from .games import _game_to_json  # shared record format

    return {
        "variant": config.variant.value,
        "game": _game_to_json(config.game),
        "seed": config.seed,
        "dataset": {
            "n": config.n_data,
            "law": config.data_law,
            "mean": list(config.data_mean) if config.data_mean else None,
            "std": config.data_std,
        },
        "learner": {
            "lr": config.learner.lr,
            "grad_clip": config.learner.grad_clip,
            "batch": config.learner.batch,
            "init": list(config.learner.init),
            "burn_in": config.learner.burn_in,
        },
        "pipeline": {
            "n_epochs": config.n_epochs,
            "n_policy": config.n_policy,
            "syn_batch": config.syn_batch,
            "alpha": config.alpha,
            "gen_every": config.gen_every,
            "q_quantile": config.q_quantile,
        },
        "guidance": {
            "mode": config.guidance.mode.value,
            "lambda": config.guidance.lam,
            "w": config.guidance.w,
            "schedule": config.guidance.schedule.value,
            "surrogate_std": config.guidance.surrogate_std,
        },
        "diffusion": {
            "epochs": config.diff_epochs,
            "batch": config.diff_batch,
            "lr": config.diff_lr,
            "cond_dropout": config.cond_dropout,
            "hidden": list(config.hidden),
            "schedule": {
                "sigma_min": config.schedule.sigma_min,
                "sigma_max": config.schedule.sigma_max,
                "rho": config.schedule.rho,
                "steps": config.schedule.steps,
            },
            "noise_law": {
                "mu_log": config.noise_law.mu_log,
                "sigma_log": config.noise_law.sigma_log,
            },
        },
    }


def config_from_dict(obj: dict) -> RunConfig:
    from .games import _game_from_json

    ds = obj.get("dataset", {})
    ln = obj.get("learner", {})
    pp = obj.get("pipeline", {})
    gu = obj.get("guidance", {})
    df = obj.get("diffusion", {})
    sched = df.get("schedule", {})
    law = df.get("noise_law", {})
    raw_game = obj.get("game", "multiplication")
    if isinstance(raw_game, str):
        try:
            game = {"multiplication": multiplication,
                    "twin_peaks": twin_peaks}[raw_game]()
        except KeyError:
            raise ValueError(
                f"unknown game name {raw_game!r}: use 'multiplication', "
                f"'twin_peaks', or a full game record"
            ) from None
    else:
        game = _game_from_json(raw_game)
    defaults = RunConfig()
    return RunConfig(
        variant=Variant(obj.get("variant", "baseline")),
        game=game,
        seed=int(obj.get("seed", 0)),
        n_data=int(ds.get("n", defaults.n_data)),
        data_law=ds.get("law", defaults.data_law),
        data_mean=tuple(ds["mean"]) if ds.get("mean") else None,
        data_std=ds.get("std"),
        learner=LearnerConfig(
            lr=float(ln.get("lr", 0.1)),
            grad_clip=float(ln.get("grad_clip", 1.0)),
            batch=ln.get("batch", 64),
            init=tuple(ln.get("init", (-0.64, 0.65))),
            burn_in=int(ln.get("burn_in", 2)),
        ),
        n_epochs=int(pp.get("n_epochs", defaults.n_epochs)),
        n_policy=int(pp.get("n_policy", defaults.n_policy)),
        syn_batch=int(pp.get("syn_batch", defaults.syn_batch)),
        alpha=float(pp.get("alpha", defaults.alpha)),
        gen_every=int(pp.get("gen_every", defaults.gen_every)),
        q_quantile=pp.get("q_quantile"),
        guidance=GuidanceHook(
            mode=GuidanceMode(gu.get("mode", "none")),
            lam=float(gu.get("lambda", 0.0)),
            w=float(gu.get("w", 1.0)),
            schedule=ScheduleKind(gu.get("schedule", "cosine")),
            surrogate_std=float(gu.get("surrogate_std", 1.0)),
        ),
        diff_epochs=int(df.get("epochs", defaults.diff_epochs)),
        diff_batch=int(df.get("batch", defaults.diff_batch)),
        diff_lr=float(df.get("lr", defaults.diff_lr)),
        cond_dropout=float(df.get("cond_dropout", defaults.cond_dropout)),
        hidden=tuple(df.get("hidden", defaults.hidden)),
        schedule=NoiseSchedule(
            sigma_min=float(sched.get("sigma_min", 0.002)),
            sigma_max=float(sched.get("sigma_max", 80.0)),
            rho=float(sched.get("rho", 7.0)),
            steps=int(sched.get("steps", 40)),
        ),
        noise_law=TrainNoiseLaw(
            mu_log=float(law.get("mu_log", -1.2)),
            sigma_log=float(law.get("sigma_log", 1.2)),
            sigma_min=float(sched.get("sigma_min", 0.002)),
            sigma_max=float(sched.get("sigma_max", 80.0)),
        ),
    )


def config_hash(config: RunConfig) -> str:
    payload = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


EPOCH_COLUMNS = ("epoch", "theta_x", "theta_y", "return", "syn_loglik",
                 "syn_mean_ax", "syn_mean_ay", "syn_std_ax", "syn_std_ay")


def save_run_log(log: RunLog, outdir: str | Path) -> Path:
    """Write the delimited step/epoch curves plus a summary record."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_policy_log(log.steps, outdir / "steps.tsv")
    lines = ["\t".join(EPOCH_COLUMNS)]
    for e in log.epochs:
        lines.append("\t".join([str(e.epoch)] + [
            f"{v:.17g}" for v in (e.theta_x, e.theta_y, e.ret, e.syn_loglik,
                                  e.syn_mean_ax, e.syn_mean_ay,
                                  e.syn_std_ax, e.syn_std_ay)
        ]))
    (outdir / "epochs.tsv").write_text("\n".join(lines) + "\n")
    summary = {
        "variant": log.variant.value,
        "seed": log.seed,
        "final_theta_x": log.final_policy.theta_x,
        "final_theta_y": log.final_policy.theta_y,
        "final_return": log.final_return,
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return outdir
