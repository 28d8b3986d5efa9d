"""Supernet objective, subnet sampling and the optimisation loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import numerics as nx
from .model import ConfigError, ModelConfig, ModelParams, SubnetConfig, forward, init_params, predict
from .numerics import Tensor

SCHEMES = ("four", "all", "single")
OPTIMIZERS = ("adamw", "sgd")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    lr: float = 2e-3
    weight_decay: float = 0.05
    optimizer: str = "adamw"
    warmup_epochs: int = 2
    min_lr: float = 1e-5
    grad_clip: float | None = 1.0  # global L2 norm; None disables
    sample_scheme: str = "four"
    detach_teacher: bool = True
    num_classes: int = 4
    precision: str = "standard"
    # only read by the "single" scheme: the (g, m) subnet trained alone
    subnet: tuple[int, int] | None = None

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.sample_scheme not in SCHEMES:
            raise ConfigError(f"sample_scheme must be one of {SCHEMES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.precision not in nx.PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(nx.PRECISIONS)}")
        if self.sample_scheme == "single" and self.subnet is None:
            raise ConfigError("sample_scheme 'single' needs a subnet [g, m]")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")
        return self

    @property
    def dtype(self):
        return nx.PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["subnet"] is not None:
            d["subnet"] = list(d["subnet"])
        return d


@dataclass
class LossBreakdown:
    parts: dict[tuple[int, int], float]
    kinds: dict[tuple[int, int], str]
    total: float

    def to_dict(self) -> dict:
        return {"total": self.total,
                "parts": [{"g": g, "m": m, "kind": self.kinds[(g, m)], "loss": v}
                          for (g, m), v in sorted(self.parts.items())]}


def supernet_loss(preds: dict[tuple[int, int], Tensor], labels,
                  detach_teacher: bool = True) -> tuple[Tensor, LossBreakdown]:
    """Cross-entropy on every full-token prediction plus KL(student, teacher)
    for every pruned prediction of the same grid."""
    for g, m in preds:
        if m > 1 and (g, 1) not in preds and len(preds) > 1:
            raise ConfigError(f"prediction (g={g}, m={m}) has no (g={g}, m=1) teacher")
    parts: dict[tuple[int, int], Tensor] = {}
    kinds = {}
    # a lone prediction is a subnet trained on its own: plain cross-entropy
    alone = len(preds) == 1
    for key in sorted(preds):
        g, m = key
        if m == 1 or alone:
            parts[key] = nx.cross_entropy(preds[key], labels)
            kinds[key] = "CE"
        else:
            teacher = preds[(g, 1)]
            if detach_teacher:
                teacher = teacher.detach()
            parts[key] = nx.kl_divergence(preds[key], teacher)
            kinds[key] = "KL"
    total = None
    for key in sorted(parts):
        total = parts[key] if total is None else nx.add(total, parts[key])
    if total is None:
        raise ConfigError("no predictions to form a loss from")
    bd = LossBreakdown({k: float(v.data) for k, v in parts.items()}, kinds, float(total.data))
    return total, bd


def sample_subnets(step: int, rng: np.random.Generator, mc: ModelConfig) -> list[tuple[int, int]]:
    """Sandwich rule: largest and smallest subnets plus two random others.

    Returns (g, m) index pairs.  ``step`` is accepted for schedule hooks; the
    draw depends only on ``rng``.
    """
    largest, smallest = (mc.G, 1), (1, mc.M)
    pool = [(g, m) for g in range(1, mc.G + 1) for m in range(1, mc.M + 1)
            if (g, m) not in (largest, smallest)]
    if len(pool) <= 2:
        return [largest, smallest] + pool
    picks = rng.choice(len(pool), size=2, replace=False)
    return [largest, smallest] + [pool[i] for i in sorted(picks)]


def with_teachers(subnets: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Add the (g, 1) teacher for every pruned (g, m) that lacks one."""
    out = list(dict.fromkeys(subnets))
    for g, m in list(out):
        if m > 1 and (g, 1) not in out:
            out.append((g, 1))
    return sorted(out)


def forward_set(step: int, rng: np.random.Generator, mc: ModelConfig, tc: TrainConfig) -> list[tuple[int, int]]:
    if tc.sample_scheme == "all":
        return [(g, m) for g in range(1, mc.G + 1) for m in range(1, mc.M + 1)]
    if tc.sample_scheme == "single":
        return [tuple(tc.subnet)]
    return with_teachers(sample_subnets(step, rng, mc))


# -- optimisers ------------------------------------------------------------

def _decays(name: str, t: Tensor) -> bool:
    return t.ndim == 2 and name.endswith("weight")


class AdamW:
    """Adam with decoupled weight decay on weight matrices only."""

    def __init__(self, params: ModelParams, weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and _decays(name, p):
                update = update + self.wd * p.data
            p.data -= (lr * update).astype(p.dtype)


class SGD:
    def __init__(self, params: ModelParams, weight_decay: float, momentum: float = 0.9):
        self.params = params
        self.wd = weight_decay
        self.momentum = momentum
        self.buf = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.wd * p.data if _decays(name, p) else p.grad
            b = self.buf[name]
            b *= self.momentum
            b += g
            p.data -= (lr * b).astype(p.dtype)


def make_optimizer(params: ModelParams, tc: TrainConfig):
    if tc.optimizer == "adamw":
        return AdamW(params, tc.weight_decay)
    return SGD(params, tc.weight_decay)


def cosine_lr(step: int, total: int, tc: TrainConfig, steps_per_epoch: int) -> float:
    warm = tc.warmup_epochs * steps_per_epoch
    if warm and step < warm:
        return tc.lr * (step + 1) / warm
    span = max(1, total - warm)
    frac = min(1.0, (step - warm) / span)
    lo = min(tc.min_lr, tc.lr)
    return lo + 0.5 * (tc.lr - lo) * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    grads = [t.grad for _, t in params.items() if t.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# -- steps and loops -------------------------------------------------------

def train_step(images: np.ndarray, labels: np.ndarray, subnets: list[tuple[int, int]],
               params: ModelParams, optimizer, lr: float,
               detach_teacher: bool = True, grad_clip: float | None = None) -> LossBreakdown:
    """Forward every subnet on the same batch, one backward, one update."""
    mc = params.config
    x = Tensor(np.asarray(images, dtype=params.dtype))
    preds = {}
    for g, m in subnets:
        preds[(g, m)], _ = forward(x, mc.subnet(g, m), params)
    total, bd = supernet_loss(preds, labels, detach_teacher)
    for key, value in bd.parts.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite {bd.kinds[key]} loss {value} at (g={key[0]}, m={key[1]})")
    params.zero_grad()
    nx.backward(total)
    if grad_clip is not None:
        clip_grad_norm(params, grad_clip)
    optimizer.step(lr)
    return bd


def evaluate(images: np.ndarray, labels: np.ndarray, sc: SubnetConfig, params: ModelParams,
             batch_size: int = 250) -> float:
    """Top-1 accuracy of one subnet."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict(images, sc, params, batch_size)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def accuracy_table(images, labels, params: ModelParams) -> dict[tuple[int, int], float]:
    mc = params.config
    return {mc.index_of(sc): evaluate(images, labels, sc, params) for sc in mc.subnets()}


@dataclass
class TrainResult:
    params: ModelParams
    records: list[dict] = field(default_factory=list)
    steps: int = 0


def train(mc: ModelConfig, tc: TrainConfig, train_x: np.ndarray, train_y: np.ndarray,
          val_x: np.ndarray | None = None, val_y: np.ndarray | None = None,
          params: ModelParams | None = None,
          on_epoch: Callable[[int, ModelParams, list[dict]], None] | None = None,
          extra: dict | None = None) -> TrainResult:
    """Run ``tc.epochs`` epochs and return the trained parameters and metric records.

    One record per (epoch, subnet): the mean loss part over the steps where
    that subnet was forwarded (``None`` if it never was) and its validation
    accuracy.
    """
    mc.validate()
    tc.validate()
    if tc.sample_scheme == "single":
        mc.subnet(*tc.subnet)
    rng = np.random.default_rng(tc.seed)
    if params is None:
        params = init_params(mc, seed=tc.seed, dtype=tc.dtype)
    opt = make_optimizer(params, tc)
    n = len(train_y)
    steps_per_epoch = max(1, math.ceil(n / tc.batch_size))
    total_steps = steps_per_epoch * tc.epochs
    x_all = np.asarray(train_x, dtype=params.dtype)
    y_all = np.asarray(train_y, dtype=np.int64)
    result = TrainResult(params)
    step = 0
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        sums: dict[tuple[int, int], float] = {}
        counts: dict[tuple[int, int], int] = {}
        kinds: dict[tuple[int, int], str] = {}
        for start in range(0, n, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            subnets = forward_set(step, rng, mc, tc)
            lr = cosine_lr(step, total_steps, tc, steps_per_epoch)
            bd = train_step(x_all[idx], y_all[idx], subnets, params, opt, lr, tc.detach_teacher,
                            tc.grad_clip)
            for key, v in bd.parts.items():
                sums[key] = sums.get(key, 0.0) + v
                counts[key] = counts.get(key, 0) + 1
                kinds[key] = bd.kinds[key]
            step += 1
        records = []
        for sc in mc.subnets():
            key = mc.index_of(sc)
            acc = None if val_x is None else evaluate(val_x, val_y, sc, params)
            rec = {"epoch": epoch, "g": key[0], "m": key[1],
                   "grid": mc.grids[key[0] - 1], "rate": sc.keep_rate,
                   "loss_kind": kinds.get(key, "CE" if key[1] == 1 else "KL"),
                   "loss": sums[key] / counts[key] if key in counts else None,
                   "steps": counts.get(key, 0), "accuracy": acc}
            if extra:
                rec.update(extra)
            records.append(rec)
        result.records.extend(records)
        if on_epoch is not None:
            on_epoch(epoch, params, records)
    result.steps = step
    return result

