"""Elastic inference: early-exit cascades and budget-driven subnet choice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ConfigError, ModelConfig, ModelParams, SubnetConfig, forward, predict
from .profiler import model_macs


@dataclass
class CascadePolicy:
    stages: list[SubnetConfig]
    threshold: float

    def validate(self, mc: ModelConfig) -> "CascadePolicy":
        if not self.stages:
            raise ConfigError("cascade needs at least one stage")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        costs = [model_macs(mc, sc).total_macs for sc in self.stages]
        if any(a > b for a, b in zip(costs, costs[1:])):
            raise ConfigError(f"cascade stages must be ordered by ascending MACs, got {costs}")
        return self

    def stage_macs(self, mc: ModelConfig) -> list[int]:
        return [model_macs(mc, sc).total_macs for sc in self.stages]


def default_cascade(mc: ModelConfig, threshold: float = 0.9) -> CascadePolicy:
    """Smallest grid at the lowest keep rate, then the largest grid at the
    second keep rate."""
    second = mc.keep_rates[1] if mc.M > 1 else mc.keep_rates[0]
    return CascadePolicy([SubnetConfig(1, mc.keep_rates[-1]), SubnetConfig(mc.G, second)], threshold)


@dataclass
class CascadeResult:
    label: int
    confidence: float
    macs: int
    stage: int  # 1-based stage that produced the answer


def cascade_infer(image: np.ndarray, policy: CascadePolicy, params: ModelParams) -> CascadeResult:
    """Run stages cheapest first; exit once max probability reaches the threshold."""
    mc = params.config
    costs = policy.stage_macs(mc)
    spent = 0
    with nx.no_grad():
        for i, sc in enumerate(policy.stages, start=1):
            probs, _ = forward(np.asarray(image)[None], sc, params)
            p = probs.data[0]
            spent += costs[i - 1]
            conf = float(p.max())
            if conf >= policy.threshold or i == len(policy.stages):
                return CascadeResult(int(p.argmax()), conf, spent, i)
    raise AssertionError("unreachable")


def exit_stages(stage_probs: list[np.ndarray], threshold: float) -> np.ndarray:
    """1-based exit stage per sample given every stage's probabilities."""
    n = stage_probs[0].shape[0]
    last = len(stage_probs)
    stage = np.full(n, last, dtype=np.int64)
    pending = np.ones(n, dtype=bool)
    for i, p in enumerate(stage_probs[:-1], start=1):
        done = pending & (p.max(axis=1) >= threshold)
        stage[done] = i
        pending &= ~done
    return stage


@dataclass
class SweepPoint:
    threshold: float
    mean_macs: float
    accuracy: float
    stage_fractions: list[float]

    @property
    def mean_gmacs(self) -> float:
        return self.mean_macs / 1e9


def sweep_threshold(images: np.ndarray, labels: np.ndarray, policy: CascadePolicy,
                    thresholds: list[float], params: ModelParams) -> list[SweepPoint]:
    """Accuracy / mean-MAC curve of the cascade, one point per threshold."""
    if len(labels) == 0:
        raise ValueError("cannot sweep an empty dataset")
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    mc = params.config
    costs = np.cumsum(policy.stage_macs(mc))
    stage_probs = [predict(images, sc, params) for sc in policy.stages]
    preds = np.stack([p.argmax(axis=1) for p in stage_probs])
    labels = np.asarray(labels)
    rows = np.arange(len(labels))
    points = []
    for tau in thresholds:
        stage = exit_stages(stage_probs, tau)
        chosen = preds[stage - 1, rows]
        fractions = [float(np.mean(stage == i)) for i in range(1, len(policy.stages) + 1)]
        points.append(SweepPoint(float(tau), float(costs[stage - 1].mean()),
                                 float(np.mean(chosen == labels)), fractions))
    return points


# -- budget selection --------------------------------------------------------

@dataclass
class BudgetPolicy:
    budget_macs: float
    accuracy: dict[SubnetConfig, float]  # any hashable subnet key works
    cost: dict[SubnetConfig, float]

    def validate(self) -> "BudgetPolicy":
        if set(self.accuracy) != set(self.cost):
            raise ConfigError("accuracy and cost tables cover different subnets")
        if not self.accuracy:
            raise ConfigError("empty subnet tables")
        return self


@dataclass
class Selection:
    subnet: SubnetConfig | None  # None when nothing fits the budget
    accuracy: float | None = None
    macs: float | None = None

    @property
    def feasible(self) -> bool:
        return self.subnet is not None


def select_for_budget(bp: BudgetPolicy) -> Selection:
    """Most accurate subnet within budget; ties go to the cheaper one."""
    bp.validate()
    best = None
    for sc in sorted(bp.cost, key=lambda s: (bp.cost[s], repr(s))):
        c, a = bp.cost[sc], bp.accuracy[sc]
        if c > bp.budget_macs:
            continue
        if best is None or a > best[1]:
            best = (sc, a, c)
    if best is None:
        return Selection(None)
    return Selection(*best)
