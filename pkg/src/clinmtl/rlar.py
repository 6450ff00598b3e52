"""Representation-level adversarial gradient-alignment regularization.

Each task loss yields a normalized adversarial direction in a shared
representation; the penalty is the batch/pair mean of absolute cosine
similarities between per-sample task directions. Directions are probes
only: the representation is never perturbed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TASKS = ("seg", "cls", "clin")
HOOK_MODES = ("bottleneck", "last_encoder", "mid_encoder", "mean_last3")
COS_GUARD = 1e-12


class RlarError(Exception):
    pass


@dataclass(frozen=True)
class RlarConfig:
    epsilon: float = 1.0
    norm_guard: float = 1e-8
    lambda_adv: float = 0.1
    tasks: tuple[str, ...] = TASKS
    hook_mode: str = "bottleneck"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise RlarError("epsilon must be positive")
        if self.norm_guard <= 0:
            raise RlarError("norm_guard must be positive")
        if self.lambda_adv < 0:
            raise RlarError("lambda_adv must be non-negative")
        if len(self.tasks) < 2:
            raise RlarError("need at least 2 tasks")
        if self.hook_mode not in HOOK_MODES:
            raise RlarError(f"hook_mode must be one of {HOOK_MODES}")

    def pairs(self) -> list[tuple[str, str]]:
        return list(combinations(self.tasks, 2))


@dataclass
class ConflictReport:
    """Per-sample absolute cosine similarities for each unordered task pair."""

    per_sample: dict[tuple[str, str], Tensor] = field(default_factory=dict)

    def batch_means(self) -> dict[tuple[str, str], float]:
        return {pair: float(t.data.mean()) for pair, t in self.per_sample.items()}

    def mean_abs_cos(self) -> Tensor:
        """Mean over pairs of per-sample |cos|, then over the batch (scalar)."""
        pairs = list(self.per_sample.values())
        acc = pairs[0]
        for t in pairs[1:]:
            acc = ad.add(acc, t)
        return ad.mean(ad.mul(acc, 1.0 / len(pairs)))


def unit_directions(task_losses: dict[str, Tensor], rep: Tensor, cfg: RlarConfig,
                    create_graph: bool = True) -> dict[str, Tensor]:
    """Guard-normalized task gradients w.r.t. ``rep`` (the directions at unit scale).

    The adversarial direction of Eq-style probing is ``epsilon`` times these;
    cosine geometry is computed on the unit versions so the common positive
    scale cancels exactly.
    """
    dirs = {}
    for task in cfg.tasks:
        if task not in task_losses:
            raise RlarError(f"missing loss for task '{task}'")
        g = ad.grad(task_losses[task], [rep], create_graph=create_graph,
                    on_unreachable="raise")[0]
        n = ad.norm(g)
        if not np.isfinite(n.data):
            raise RlarError(f"non-finite gradient norm for task '{task}'")
        dirs[task] = ad.mul(g, ad.div(1.0, n, guard=cfg.norm_guard))
    return dirs


def adversarial_directions(task_losses: dict[str, Tensor], rep: Tensor, cfg: RlarConfig,
                           create_graph: bool = True) -> dict[str, Tensor]:
    """Normalized adversarial probes scaled to magnitude ``epsilon``."""
    units = unit_directions(task_losses, rep, cfg, create_graph=create_graph)
    return {t: ad.mul(u, cfg.epsilon) for t, u in units.items()}


def pairwise_abs_cos(dirs: dict[str, Tensor]) -> ConflictReport:
    """Per-sample |cosine| for every unordered pair of direction tensors."""
    if len(dirs) < 2:
        raise RlarError("need at least 2 direction tensors")
    shapes = {t.shape for t in dirs.values()}
    if len(shapes) > 1:
        raise RlarError(f"direction shapes differ: {shapes}")
    flat = {name: ad.flatten(t, 1) for name, t in dirs.items()}
    norms = {name: ad.norm_per_sample(f) for name, f in flat.items()}
    report = ConflictReport()
    for a, b in combinations(dirs.keys(), 2):
        dot = ad.sum_axes(ad.mul(flat[a], flat[b]), (1,))
        cos = ad.div(dot, ad.mul(norms[a], norms[b]), guard=COS_GUARD)
        report.per_sample[(a, b)] = ad.absval(cos)
    return report


def rlar_loss(dirs: dict[str, Tensor], cfg: RlarConfig) -> tuple[Tensor, ConflictReport]:
    """Alignment penalty: lambda_adv times the batch/pair mean |cos|."""
    report = pairwise_abs_cos(dirs)
    return ad.mul(report.mean_abs_cos(), cfg.lambda_adv), report


def rlar_penalty(task_losses: dict[str, Tensor], reps: list[Tensor], cfg: RlarConfig,
                 create_graph: bool = True) -> tuple[Tensor, ConflictReport]:
    """Full pipeline over one or more hooked representations.

    With several representations (hook_mode mean_last3) the per-layer
    penalties are averaged; layer shapes differ so directions themselves
    cannot be averaged. The returned report covers the first (primary)
    representation.
    """
    losses = []
    primary_report = None
    for rep in reps:
        units = unit_directions(task_losses, rep, cfg, create_graph=create_graph)
        loss, report = rlar_loss(units, cfg)
        losses.append(loss)
        if primary_report is None:
            primary_report = report
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    return ad.mul(total, 1.0 / len(losses)), primary_report


def hook_names(cfg: RlarConfig) -> list[str]:
    """Representation hook tags probed under the configured mode."""
    if cfg.hook_mode == "mean_last3":
        return ["mid_encoder", "enc3", "last_encoder"]
    return [cfg.hook_mode]
