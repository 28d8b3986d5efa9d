"""Analytic MAC counting and wall-clock throughput."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

from .model import ModelConfig, ModelParams, SubnetConfig, token_trajectory

# One reported FLOP is one multiply-accumulate throughout.
MAC_CONVENTION = "1 FLOP = 1 multiply-accumulate; layer-norm, softmax, GELU and bias adds excluded"
PRUNE_LOCATION = "between MHSA and FFN of each drop block; keep count ceil(rate * current patch tokens)"
RESIZE_CONVENTION = "bilinear, half-pixel centres, edge clamp; resize cost excluded"


def mhsa_macs(n: int, d: int) -> int:
    """Q/K/V/output projections (4ND^2) plus the two attention products (2N^2D)."""
    if n < 1 or d < 1:
        raise ValueError("mhsa_macs needs N, D >= 1")
    return 4 * n * d * d + 2 * n * n * d


def ffn_macs(n: int, d: int, d_ff: int) -> int:
    return 2 * n * d * d_ff


def embed_macs(mc: ModelConfig, g: int) -> int:
    n = mc.grids[g - 1] ** 2
    return n * mc.base_patch * mc.base_patch * mc.channels * mc.dim


def head_macs(mc: ModelConfig) -> int:
    return mc.dim * mc.num_classes


def parameter_count(mc: ModelConfig) -> int:
    total = 0
    for shape in ModelParams.shapes(mc).values():
        n = 1
        for s in shape:
            n *= s
        total += n
    return total


@dataclass
class CostReport:
    grid: int
    keep_rate: float
    grid_index: int
    tokens: list[tuple[int, int]]
    embed_macs: int
    mhsa_macs: int
    ffn_macs: int
    head_macs: int
    total_macs: int
    parameters: int
    metadata: dict = field(default_factory=dict)

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokens"] = [{"mhsa": a, "ffn": f} for a, f in self.tokens]
        d["gmacs"] = self.gmacs
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def model_macs(mc: ModelConfig, sc: SubnetConfig) -> CostReport:
    mc.validate(geometry=False)
    g, _ = mc.index_of(sc)
    traj = token_trajectory(mc, sc)
    attn = sum(mhsa_macs(n_attn, mc.dim) for n_attn, _ in traj)
    mlp = sum(ffn_macs(n_ffn, mc.dim, mc.mlp_dim) for _, n_ffn in traj)
    emb = embed_macs(mc, g)
    head = head_macs(mc)
    return CostReport(
        grid=mc.grids[g - 1], keep_rate=sc.keep_rate, grid_index=g, tokens=traj,
        embed_macs=emb, mhsa_macs=attn, ffn_macs=mlp, head_macs=head,
        total_macs=emb + attn + mlp + head, parameters=parameter_count(mc),
        metadata={"attn_scale": mc.attn_scale, "attn_scale_value": mc.scale,
                  "prune_location": PRUNE_LOCATION, "prune_policy": mc.prune_policy,
                  "drop_blocks": list(mc.drop_blocks), "mac_convention": MAC_CONVENTION,
                  "resize": RESIZE_CONVENTION},
    )


def cost_table(mc: ModelConfig) -> dict[SubnetConfig, CostReport]:
    return {sc: model_macs(mc, sc) for sc in mc.subnets()}


# -- reference dimensions -----------------------------------------------

def deit_config(variant: str = "small", drop_blocks=(4, 7, 10), **overrides) -> ModelConfig:
    """DeiT-S / DeiT-T sized supernet (224 px, 16 px base patch, 1000 classes)."""
    dims = {"small": (384, 6, 1536), "tiny": (192, 3, 768)}[variant]
    kw = dict(depth=12, dim=dims[0], heads=dims[1], mlp_dim=dims[2], num_classes=1000,
              image_side=224, channels=3, grids=(8, 10, 12, 14), base_patch=16,
              keep_rates=(1.0, 0.7, 0.5), drop_blocks=tuple(drop_blocks))
    kw.update(overrides)
    return ModelConfig(**kw)


# -- throughput ------------------------------------------------------------

@dataclass
class ThroughputReport:
    images_per_second: float
    batch_size: int
    repeats: int
    total_seconds: float
    warmup: int

    def to_dict(self) -> dict:
        return asdict(self)


def throughput_bench(fn: Callable[[], object], batch_size: int, repeats: int,
                     warmup: int = 3, clock: Callable[[], float] = time.perf_counter) -> ThroughputReport:
    """Time ``repeats`` calls of ``fn`` after ``warmup`` untimed calls;
    throughput is batch * repeats / total time."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        fn()
    start = clock()
    for _ in range(repeats):
        fn()
    total = clock() - start
    return ThroughputReport(batch_size * repeats / total if total > 0 else float("inf"),
                            batch_size, repeats, total, warmup)
