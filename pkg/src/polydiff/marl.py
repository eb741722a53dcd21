"""Stateless deterministic two-agent learner with offline best-response updates.

Each agent holds a single scalar action parameter.  The update for agent x
ascends the analytic reward gradient evaluated at its own parameter while the
teammate's action is drawn from the data batch (and symmetrically for y) —
so the learning signal depends on the dataset, never on the teammate's
current parameter.  No critic is learned: in the stateless setting the critic
reduces to the known reward.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .games import GameSpec, OfflineDataset, reward_grad_values, reward_values

__all__ = [
    "JointPolicy",
    "LearnerConfig",
    "StepRecord",
    "brud_gradient",
    "update",
    "evaluate",
    "train_brud",
    "save_policy_log",
    "load_policy_log",
]


@dataclass(frozen=True)
class JointPolicy:
    theta_x: float
    theta_y: float
    low: float = -1.0
    high: float = 1.0

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.theta_x, self.theta_y])

    def means(self, obs=None) -> np.ndarray:
        """Deterministic joint action; the observation is ignored."""
        return self.theta

    def clipped(self) -> "JointPolicy":
        return JointPolicy(
            float(np.clip(self.theta_x, self.low, self.high)),
            float(np.clip(self.theta_y, self.low, self.high)),
            self.low,
            self.high,
        )


@dataclass(frozen=True)
class LearnerConfig:
    lr: float = 0.1
    grad_clip: float = 1.0
    batch: int | None = 64  # None = full-batch updates
    init: tuple[float, float] = (-0.64, 0.65)
    burn_in: int = 2
    steps: int = 100

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch must be at least 1")


@dataclass(frozen=True)
class StepRecord:
    step: int
    theta_x: float
    theta_y: float
    ret: float
    grad_x: float
    grad_y: float


def brud_gradient(game: GameSpec, batch: np.ndarray, policy: JointPolicy) -> tuple[float, float]:
    """Batch-mean reward gradient with the teammate's action from the data.

    x component: mean_k dR/da^x (theta_x, a^y_k); y component symmetric.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if len(batch) == 0:
        raise ValueError("brud_gradient needs a non-empty batch")
    gx, _ = reward_grad_values(game, policy.theta_x, batch[:, 1])
    _, gy = reward_grad_values(game, batch[:, 0], policy.theta_y)
    return float(gx.mean()), float(gy.mean())


def update(policy: JointPolicy, grad: tuple[float, float], cfg: LearnerConfig) -> JointPolicy:
    """Ascent step with gradient-norm clipping and bound clipping."""
    g = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite policy gradient")
    norm = float(np.linalg.norm(g))
    if norm > cfg.grad_clip and norm > 0.0:
        g = g * (cfg.grad_clip / norm)
    theta = policy.theta + cfg.lr * g
    return JointPolicy(float(theta[0]), float(theta[1]), policy.low, policy.high).clipped()


def evaluate(policy: JointPolicy, game: GameSpec) -> float:
    """Deterministic return R(theta_x, theta_y)."""
    p = policy.clipped()
    return float(reward_values(game, p.theta_x, p.theta_y))


def _action_source(data) -> np.ndarray:
    if isinstance(data, OfflineDataset):
        return data.actions
    return np.atleast_2d(np.asarray(data, dtype=float))


def train_brud(
    game: GameSpec,
    data,
    cfg: LearnerConfig,
    rng: np.random.Generator,
) -> list[StepRecord]:
    """Run burn-in plus cfg.steps best-response updates; one record per iteration.

    Batches are drawn uniformly with replacement (cfg.batch = None uses the
    whole dataset every iteration).  Burn-in iterations sample data and log
    but do not move the parameters.
    """
    actions = _action_source(data)
    n = len(actions)
    policy = JointPolicy(*cfg.init, game.action_low, game.action_high).clipped()
    records: list[StepRecord] = []
    for k in range(cfg.burn_in + cfg.steps):
        if cfg.batch is None:
            batch = actions
        else:
            batch = actions[rng.integers(0, n, size=cfg.batch)]
        grad = brud_gradient(game, batch, policy)
        if k >= cfg.burn_in:
            policy = update(policy, grad, cfg)
        records.append(
            StepRecord(k, policy.theta_x, policy.theta_y,
                       evaluate(policy, game), grad[0], grad[1])
        )
    return records


LOG_COLUMNS = ("step", "theta_x", "theta_y", "return", "grad_x", "grad_y")


def save_policy_log(records: list[StepRecord], path: str | Path) -> Path:
    path = Path(path)
    lines = ["\t".join(LOG_COLUMNS)]
    for r in records:
        lines.append(
            f"{r.step}\t{r.theta_x:.17g}\t{r.theta_y:.17g}\t"
            f"{r.ret:.17g}\t{r.grad_x:.17g}\t{r.grad_y:.17g}"
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def load_policy_log(path: str | Path) -> list[StepRecord]:
    rows = Path(path).read_text().strip().split("\n")[1:]
    out = []
    for row in rows:
        vals = row.split("\t")
        out.append(StepRecord(int(vals[0]), *(float(v) for v in vals[1:])))
    return out
