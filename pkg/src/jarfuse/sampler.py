"""Loss-proportional adaptive task sampling for multi-task training mixtures.

Each task keeps an exponentially smoothed loss; a task's sampling weight is
its smoothed loss divided by the sum over all tasks, so harder tasks are
sampled more.  A per-task floor guarantees a minimum share after projection
back onto the simplex.  Decay 0 recovers the raw last-observed-loss rule.
"""

from __future__ import annotations

import io
import math

import numpy as np

from .fusion import ConfigError
from .tensor import ContractError, seeded_rng


class TaskMixState:
    """Smoothed per-task losses and the derived sampling weights."""

    def __init__(self, tasks: list[str], decay: float = 0.99, floor: float = 0.0):
        if not tasks:
            raise ConfigError("need at least one task")
        if len(set(tasks)) != len(tasks):
            raise ConfigError(f"duplicate task names: {tasks}")
        if not (0.0 <= decay < 1.0):
            raise ConfigError(f"decay must be in [0, 1), got {decay}")
        if not (0.0 <= floor <= 1.0 / len(tasks)):
            raise ConfigError(
                f"floor {floor} infeasible for {len(tasks)} tasks (max {1.0 / len(tasks):.4f})"
            )
        self.tasks = list(tasks)
        self.decay = decay
        self.floor = floor
        self.ema_losses = {t: 0.0 for t in tasks}

    def update_loss(self, task: str, loss: float) -> "TaskMixState":
        """Fold one observed loss into the task's smoothed loss."""
        if task not in self.ema_losses:
            raise ConfigError(f"unknown task {task!r}; known: {self.tasks}")
        if not math.isfinite(loss) or loss < 0.0:
            raise ContractError(f"observed loss must be finite and >= 0, got {loss}")
        self.ema_losses[task] = self.decay * self.ema_losses[task] + (1.0 - self.decay) * loss
        return self

    def compute_weights(self) -> np.ndarray:
        """Loss shares projected onto the floored simplex (sums to one)."""
        losses = np.array([self.ema_losses[t] for t in self.tasks])
        total = losses.sum()
        if total == 0.0:
            # Nothing observed yet (or all tasks fully solved): uniform.
            weights = np.full(len(self.tasks), 1.0 / len(self.tasks))
        else:
            weights = losses / total
        return _project_floor(weights, self.floor)

    def sample_batch_composition(self, batch_size: int, seed: int) -> np.ndarray:
        """Multinomial per-task counts for one batch, deterministic in the seed.

        The floor acts on the weights, guaranteeing every task a minimum
        expected share of batch_size * floor samples.
        """
        if self.floor > 0.0 and batch_size < len(self.tasks):
            raise ConfigError(
                f"batch size {batch_size} below task count {len(self.tasks)} "
                f"with an active floor"
            )
        if batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {batch_size}")
        weights = self.compute_weights()
        return seeded_rng(seed).multinomial(batch_size, weights)


def _project_floor(weights: np.ndarray, floor: float) -> np.ndarray:
    """Clamp below-floor weights up to the floor, renormalizing the rest.

    Clamping shrinks the free mass, which can push further weights below the
    floor, so the clamp set grows until stable.
    """
    if floor <= 0.0:
        return weights
    w = weights.astype(np.float64).copy()
    clamped = np.zeros(len(w), dtype=bool)
    for _ in range(len(w)):
        newly = (~clamped) & (w < floor)
        if not newly.any():
            break
        clamped |= newly
        w[clamped] = floor
        free = ~clamped
        free_mass = 1.0 - floor * clamped.sum()
        free_sum = w[free].sum()
        if free_sum > 0.0:
            w[free] = w[free] * (free_mass / free_sum)
    return w


def write_weight_log(path, rows: list[tuple[int, str, float, float]]) -> None:
    """Write the weight trajectory CSV: step,task,ema_loss,weight."""
    with open(path, "w", newline="\n") as fh:
        fh.write(weight_log_csv(rows))


def weight_log_csv(rows: list[tuple[int, str, float, float]]) -> str:
    out = io.StringIO()
    out.write("step,task,ema_loss,weight\n")
    for step, task, ema, weight in rows:
        out.write(f"{step},{task},{ema!r},{weight!r}\n")
    return out.getvalue()
