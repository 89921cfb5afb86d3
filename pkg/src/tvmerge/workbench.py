"""Analytic testbed for the bounded-forgetting and scaling claims.

Tasks are quadratics ``L_i(theta) = ||theta - t_i||^2`` whose fine-tuned
optimum is the target itself, so "fine-tuning" is a closed-form construction
and every merge strategy can be evaluated without a single gradient. The
general task is the same quadratic centered on the base parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError
from .merge import MergeConfig, merge
from .task_vector import TaskVector, extract
from .tensor_store import ParameterSet

THETA = "theta"


@dataclass
class QuadraticTask:
    """One synthetic capability: reaching the target minimizes the task loss."""

    label: str
    target: np.ndarray

    def loss(self, theta: np.ndarray) -> float:
        d = theta.astype(np.float64) - self.target.astype(np.float64)
        return float(np.dot(d, d))


@dataclass
class WorkbenchConfig:
    dim: int = 8
    k: int = 4
    general_target: np.ndarray | None = None
    radius: float = 1.0
    strategies: tuple[str, ...] = ("average", "ta", "ties", "dare")
    p: float = 0.5
    seed: int = 0
    orthogonal_targets: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("task count must be at least 1")
        if self.dim < 1:
            raise ConfigError("dimension must be at least 1")
        if self.orthogonal_targets and self.k > self.dim:
            raise ConfigError("orthogonal targets need k <= dim")
        if not (self.radius > 0) or not math.isfinite(self.radius):
            raise ConfigError("spread radius must be positive and finite")
        if self.general_target is None:
            self.general_target = np.zeros(self.dim, dtype=np.float32)
        else:
            self.general_target = np.asarray(self.general_target, dtype=np.float32)
            if self.general_target.shape != (self.dim,):
                raise ConfigError(
                    f"general target has shape {self.general_target.shape}, expected ({self.dim},)"
                )


@dataclass
class ForgettingReport:
    strategy: str
    p: float | None
    general_loss_base: float
    general_loss_ft: float
    general_loss_merged: float
    epsilon: float
    per_task_loss_base: list[float]
    per_task_loss_merged: list[float]
    closed_form_epsilon: float | None = None


@dataclass
class ScalingRow:
    k: int
    strategy: str
    mean_task_loss: float
    general_loss: float
    epsilon: float


@dataclass
class World:
    """A synthesized instance: base model, tasks and their exact fine-tunes."""

    base: ParameterSet
    tasks: list[QuadraticTask]
    tuned: list[ParameterSet]
    vectors: list[TaskVector] = field(default_factory=list)

    def general_loss(self, model: ParameterSet) -> float:
        base_theta = self.base.values(THETA)
        d = model.values(THETA).astype(np.float64) - base_theta.astype(np.float64)
        return float(np.dot(d, d))

    def task_loss(self, model: ParameterSet, index: int) -> float:
        return self.tasks[index].loss(model.values(THETA))


def synthesize(cfg: WorkbenchConfig) -> World:
    """Build base = general target and tuned_i = task target, all closed form.

    Task targets sit on the sphere of the configured radius around the general
    target, in directions drawn deterministically from the seed.
    """
    rng = np.random.default_rng(cfg.seed)
    base = ParameterSet.from_arrays({THETA: cfg.general_target})
    if cfg.orthogonal_targets:
        q, _ = np.linalg.qr(rng.standard_normal((cfg.dim, cfg.k)))
        directions = [q[:, i] for i in range(cfg.k)]
    else:
        directions = []
        for _ in range(cfg.k):
            d = rng.standard_normal(cfg.dim)
            directions.append(d / np.linalg.norm(d))
    tasks = []
    tuned = []
    for i, direction in enumerate(directions):
        target = (cfg.general_target + (cfg.radius * direction).astype(np.float32)).astype(
            np.float32
        )
        label = f"task-{i:02d}"
        tasks.append(QuadraticTask(label=label, target=target))
        tuned.append(ParameterSet.from_arrays({THETA: target}))
    world = World(base=base, tasks=tasks, tuned=tuned)
    world.vectors = [
        extract(base, model, task.label) for task, model in zip(tasks, tuned)
    ]
    return world


def _merge_config(strategy: str, p: float, seed: int) -> MergeConfig:
    return MergeConfig(strategy=strategy, alphas=None, p=p, seed=seed)


def _closed_form_ta(world: World, alphas: list[float]) -> np.ndarray:
    g = world.base.values(THETA).astype(np.float64)
    theta = g.copy()
    for a, task in zip(alphas, world.tasks):
        theta += a * (task.target.astype(np.float64) - g)
    return theta


def run_forgetting(
    cfg: WorkbenchConfig, world: World | None = None, workers: int = 1
) -> list[ForgettingReport]:
    """Merge all K vectors per strategy and measure general-task degradation.

    For task arithmetic the measured merged parameters are checked against the
    closed form g + sum_i alpha_i (t_i - g); disagreement means a merge bug and
    raises.
    """
    if world is None:
        world = synthesize(cfg)
    k = len(world.vectors)
    loss_base = world.general_loss(world.base)
    loss_ft = max(world.general_loss(m) for m in world.tuned)
    per_task_base = [world.task_loss(world.base, i) for i in range(k)]

    reports = []
    for strategy in cfg.strategies:
        p = cfg.p if strategy in ("ties", "dare") else None
        merge_cfg = _merge_config(strategy, cfg.p, cfg.seed)
        merged, _ = merge(world.base, world.vectors, merge_cfg, workers=workers)
        loss_merged = world.general_loss(merged)
        epsilon = abs(loss_merged - loss_base)
        closed_form_epsilon = None
        if strategy == "ta":
            alphas = merge_cfg.resolved_alphas(k)
            theta_cf = _closed_form_ta(world, alphas)
            measured = merged.values(THETA).astype(np.float64)
            if not np.allclose(measured, theta_cf, rtol=1e-5, atol=1e-6):
                raise ValidationError(
                    "task-arithmetic merge disagrees with its closed form"
                )
            g = world.base.values(THETA).astype(np.float64)
            closed_form_epsilon = float(np.dot(theta_cf - g, theta_cf - g))
        reports.append(
            ForgettingReport(
                strategy=strategy,
                p=p,
                general_loss_base=loss_base,
                general_loss_ft=loss_ft,
                general_loss_merged=loss_merged,
                epsilon=epsilon,
                per_task_loss_base=per_task_base,
                per_task_loss_merged=[
                    world.task_loss(merged, i) for i in range(k)
                ],
                closed_form_epsilon=closed_form_epsilon,
            )
        )
    return reports


def run_scaling(
    cfg: WorkbenchConfig, world: World | None = None, workers: int = 1
) -> list[ScalingRow]:
    """Merge the first K vectors for K = 1..k and record mean per-task loss."""
    if world is None:
        world = synthesize(cfg)
    rows = []
    for k in range(1, len(world.vectors) + 1):
        subset = world.vectors[:k]
        for strategy in cfg.strategies:
            merge_cfg = _merge_config(strategy, cfg.p, cfg.seed)
            merged, _ = merge(world.base, subset, merge_cfg, workers=workers)
            mean_loss = float(
                np.mean([world.task_loss(merged, i) for i in range(k)])
            )
            general = world.general_loss(merged)
            rows.append(
                ScalingRow(
                    k=k,
                    strategy=strategy,
                    mean_task_loss=mean_loss,
                    general_loss=general,
                    epsilon=abs(general - world.general_loss(world.base)),
                )
            )
    return rows


def scaling_csv_lines(rows: list[ScalingRow]) -> list[str]:
    lines = ["K,strategy,mean_task_loss,general_loss,epsilon"]
    for r in rows:
        lines.append(
            f"{r.k},{r.strategy},{r.mean_task_loss:.9g},{r.general_loss:.9g},{r.epsilon:.9g}"
        )
    return lines


def forgetting_csv_lines(reports: list[ForgettingReport]) -> list[str]:
    lines = [
        "strategy,p,general_loss_base,general_loss_ft,general_loss_merged,epsilon"
    ]
    for r in reports:
        p = "" if r.p is None else f"{r.p:g}"
        lines.append(
            f"{r.strategy},{p},{r.general_loss_base:.9g},{r.general_loss_ft:.9g},"
            f"{r.general_loss_merged:.9g},{r.epsilon:.9g}"
        )
    return lines
