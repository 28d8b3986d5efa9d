"""Multi-granularity vision transformer with class-attention token pruning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ConfigError(ValueError):
    pass


ATTN_SCALES = ("head_dim", "model_dim")
PRUNE_POLICIES = ("high", "mixed")


@dataclass(frozen=True)
class SubnetConfig:
    grid_index: int  # 1-based into ModelConfig.grids
    keep_rate: float

    def label(self, mc: "ModelConfig") -> str:
        s = mc.grids[self.grid_index - 1]
        return f"{s}x{s}@{self.keep_rate:g}"


@dataclass
class ModelConfig:
    depth: int = 6
    dim: int = 64
    heads: int = 4
    mlp_dim: int = 128
    num_classes: int = 4
    image_side: int = 40
    channels: int = 3
    grids: tuple[int, ...] = (4, 5, 8)
    base_patch: int = 8
    keep_rates: tuple[float, ...] = (1.0, 0.7, 0.5)
    drop_blocks: tuple[int, ...] = (2, 4)
    attn_scale: str = "head_dim"
    prune_policy: str = "high"

    def __post_init__(self):
        self.grids = tuple(int(s) for s in self.grids)
        self.keep_rates = tuple(float(r) for r in self.keep_rates)
        self.drop_blocks = tuple(int(b) for b in self.drop_blocks)

    def validate(self, geometry: bool = True) -> "ModelConfig":
        """Reject inconsistent settings.

        ``geometry=False`` skips the image-divisibility check, which the
        analytic cost model does not need (224 px is not divisible by 10
        or 12, yet those grids appear in the reference cost tables).
        """
        for name in ("depth", "dim", "heads", "mlp_dim", "num_classes", "image_side",
                     "channels", "base_patch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not self.grids or list(self.grids) != sorted(set(self.grids)) or self.grids[0] < 1:
            raise ConfigError(f"grids must be strictly increasing positive ints: {self.grids}")
        r = self.keep_rates
        if not r or r[0] != 1.0:
            raise ConfigError("keep_rates must start with 1.0")
        if any(not (0.0 < x < 1.0) for x in r[1:]) or any(a <= b for a, b in zip(r, r[1:])):
            raise ConfigError(f"keep_rates must be 1.0 > ... > 0 and strictly decreasing: {r}")
        if any(b < 1 or b > self.depth for b in self.drop_blocks) or \
                len(set(self.drop_blocks)) != len(self.drop_blocks):
            raise ConfigError(f"drop_blocks must be distinct and within [1, {self.depth}]")
        if self.attn_scale not in ATTN_SCALES:
            raise ConfigError(f"attn_scale must be one of {ATTN_SCALES}")
        if self.prune_policy not in PRUNE_POLICIES:
            raise ConfigError(f"prune_policy must be one of {PRUNE_POLICIES}")
        if geometry:
            bad = [s for s in self.grids if self.image_side % s]
            if bad:
                raise ConfigError(f"image_side {self.image_side} not divisible by grids {bad}")
        return self

    # -- subnet bookkeeping ------------------------------------------------
    @property
    def G(self) -> int:
        return len(self.grids)

    @property
    def M(self) -> int:
        return len(self.keep_rates)

    def subnet(self, g: int, m: int) -> SubnetConfig:
        if not (1 <= g <= self.G and 1 <= m <= self.M):
            raise ConfigError(f"subnet index (g={g}, m={m}) outside {self.G}x{self.M}")
        return SubnetConfig(g, self.keep_rates[m - 1])

    def index_of(self, sc: SubnetConfig) -> tuple[int, int]:
        if not 1 <= sc.grid_index <= self.G:
            raise ConfigError(f"grid_index {sc.grid_index} outside [1, {self.G}]")
        for m, r in enumerate(self.keep_rates, start=1):
            if math.isclose(r, sc.keep_rate, rel_tol=0, abs_tol=1e-12):
                return sc.grid_index, m
        raise ConfigError(f"keep_rate {sc.keep_rate} not in {self.keep_rates}")

    def subnets(self) -> list[SubnetConfig]:
        return [self.subnet(g, m) for g in range(1, self.G + 1) for m in range(1, self.M + 1)]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def scale(self) -> float:
        d = self.head_dim if self.attn_scale == "head_dim" else self.dim
        return 1.0 / math.sqrt(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("grids", "keep_rates", "drop_blocks"):
            d[k] = list(d[k])
        return d


def kept_count(n_patch: int, rate: float) -> int:
    """Patch tokens surviving one pruning step: ceil(rate * n), at least one."""
    if rate >= 1.0:
        return n_patch
    # rounding guards products such as 0.7 * 10 = 7.000000000000001
    return max(1, math.ceil(round(rate * n_patch, 9)))


def token_trajectory(mc: ModelConfig, sc: SubnetConfig) -> list[tuple[int, int]]:
    """Per block (1..L): token count seen by MHSA and by FFN, class token included."""
    n = mc.grids[sc.grid_index - 1] ** 2 + 1
    drops = set(mc.drop_blocks) if sc.keep_rate < 1.0 else set()
    out = []
    for block in range(1, mc.depth + 1):
        n_attn = n
        if block in drops:
            n = kept_count(n - 1, sc.keep_rate) + 1
        out.append((n_attn, n))
    return out


# -- parameters ------------------------------------------------------------

class ModelParams:
    """Named learnable tensors for one supernet."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                         for k, v in self.tensors.items()})

    @staticmethod
    def shapes(mc: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, f, c = mc.dim, mc.mlp_dim, mc.channels
        shapes: dict[str, tuple[int, ...]] = {
            "embed.weight": (mc.base_patch * mc.base_patch * c, d),
            "embed.bias": (d,),
            "cls_token": (d,),
        }
        for g, s in enumerate(mc.grids, start=1):
            shapes[f"pos.{g}"] = (s * s + 1, d)
        for l in range(1, mc.depth + 1):
            p = f"blocks.{l}."
            shapes.update({
                p + "norm1.gamma": (d,), p + "norm1.beta": (d,),
                p + "attn.qkv.weight": (d, 3 * d), p + "attn.qkv.bias": (3 * d,),
                p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
                p + "norm2.gamma": (d,), p + "norm2.beta": (d,),
                p + "mlp.fc1.weight": (d, f), p + "mlp.fc1.bias": (f,),
                p + "mlp.fc2.weight": (f, d), p + "mlp.fc2.bias": (d,),
            })
        shapes.update({"norm.gamma": (d,), "norm.beta": (d,),
                       "head.weight": (d, mc.num_classes), "head.bias": (mc.num_classes,)})
        return shapes


def init_params(mc: ModelConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> ModelParams:
    """Truncated-normal weights, zero biases, unit layer-norm gains."""
    mc.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in ModelParams.shapes(mc).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".beta"):
            arr = np.zeros(shape)
        else:
            arr = np.clip(rng.standard_normal(shape), -2.0, 2.0) * std
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return ModelParams(mc, tensors)


# -- token containers ------------------------------------------------------

@dataclass
class TokenBatch:
    tokens: Tensor  # B x N_cur x D, class token at index 0
    kept_index: np.ndarray  # B x N_cur original sequence positions (0 = class token)
    attention_records: list[np.ndarray] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


# -- pipeline stages -------------------------------------------------------

def split_patches(images, side: int) -> Tensor:
    """Cut ``images[B, S, S, C]`` (or a single ``[S, S, C]``) into ``side*side``
    non-overlapping patches in row-major order: ``[B, N, P, P, C]``."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    b, h, w, c = x.shape
    if h != w or h % side:
        raise ConfigError(f"image side {h}x{w} not divisible into a {side}x{side} grid")
    p = h // side
    x = x.reshape(b, side, p, side, p, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, side * side, p, p, c)
    return x[0] if single else x


def align_and_embed(patches: Tensor, g: int, params: ModelParams) -> TokenBatch:
    """Resize patches to the shared size, embed, prepend class token, add positions."""
    mc = params.config
    if not 1 <= g <= mc.G:
        raise ConfigError(f"unknown grid index {g}")
    if patches.ndim == 4:
        patches = patches.reshape((1,) + patches.shape)
    b, n, p, _, c = patches.shape
    if n != mc.grids[g - 1] ** 2:
        raise ConfigError(f"grid {g} expects {mc.grids[g - 1] ** 2} patches, got {n}")
    bp = mc.base_patch
    if p != bp:
        patches = nx.bilinear_resize(patches, bp, bp)
    flat = patches.reshape(b, n, bp * bp * c)
    x = nx.linear(flat, params["embed.weight"], params["embed.bias"])
    cls = nx.add(Tensor(np.zeros((b, 1, mc.dim), dtype=x.dtype)), params["cls_token"])
    x = nx.concat([cls, x], axis=1)
    x = nx.add(x, params[f"pos.{g}"])
    kept = np.broadcast_to(np.arange(n + 1), (b, n + 1)).copy()
    return TokenBatch(x, kept)


def mhsa(x: Tensor, block: int, params: ModelParams) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention; also returns class attention summed over heads."""
    mc = params.config
    b, n, d = x.shape
    h, dh = mc.heads, mc.head_dim
    pre = f"blocks.{block}.attn."
    qkv = nx.linear(x, params[pre + "qkv.weight"], params[pre + "qkv.bias"])
    qkv = qkv.reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = nx.matmul(q, k.transpose(0, 1, 3, 2)) * mc.scale
    attn = nx.softmax_lastaxis(logits)
    out = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = nx.linear(out, params[pre + "proj.weight"], params[pre + "proj.bias"])
    a_cls = attn.data[:, :, 0, :].sum(axis=1)
    return out, a_cls


def ffn(x: Tensor, block: int, params: ModelParams) -> Tensor:
    pre = f"blocks.{block}.mlp."
    hidden = nx.gelu(nx.linear(x, params[pre + "fc1.weight"], params[pre + "fc1.bias"]))
    return nx.linear(hidden, params[pre + "fc2.weight"], params[pre + "fc2.bias"])


def _norm(x: Tensor, name: str, params: ModelParams) -> Tensor:
    return nx.layer_norm(x, params[name + ".gamma"], params[name + ".beta"])


def encoder_block(x: Tensor, block: int, params: ModelParams) -> tuple[Tensor, np.ndarray]:
    y, a_cls = _attention_half(x, block, params)
    return _ffn_half(y, block, params), a_cls


def _attention_half(x, block, params):
    attn_out, a_cls = mhsa(_norm(x, f"blocks.{block}.norm1", params), block, params)
    return nx.add(x, attn_out), a_cls


def _ffn_half(y, block, params):
    return nx.add(y, ffn(_norm(y, f"blocks.{block}.norm2", params), block, params))


def select_tokens(scores: np.ndarray, rate: float, policy: str = "high") -> np.ndarray:
    """Sorted positions (into ``scores``) of the patch tokens to keep.

    ``policy="high"`` keeps the highest-scoring tokens.  ``"mixed"`` drops
    80% of the removal quota from the lowest scores and 20% from the highest.
    Ties resolve toward the lower position.
    """
    n = scores.shape[0]
    k = kept_count(n, rate)
    order = np.argsort(-scores, kind="stable")
    if policy == "high":
        keep = order[:k]
    else:
        n_drop = n - k
        n_high = int(round(0.2 * n_drop))
        n_low = n_drop - n_high
        keep = order[n_high:n - n_low]
    return np.sort(keep)


def prune_tokens(tb: TokenBatch, a_cls: np.ndarray, rate: float, policy: str = "high") -> TokenBatch:
    """Keep the class token plus the most-attended patch tokens, order preserved."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"keep rate must lie in (0, 1], got {rate}")
    if rate >= 1.0:
        return tb
    b, n = a_cls.shape
    if n != tb.n_tokens:
        raise nx.ShapeError(f"score length {n} does not match {tb.n_tokens} tokens")
    patch_keep = np.stack([select_tokens(a_cls[i, 1:], rate, policy) for i in range(b)]) + 1
    idx = np.concatenate([np.zeros((b, 1), dtype=patch_keep.dtype), patch_keep], axis=1)
    tokens = nx.gather_tokens(tb.tokens, idx)
    kept = np.take_along_axis(tb.kept_index, idx, axis=1)
    return TokenBatch(tokens, kept, list(tb.attention_records))


def forward(images, sc: SubnetConfig, params: ModelParams) -> tuple[Tensor, TokenBatch]:
    """Class probabilities ``[B, K]`` of one subnet plus the token trace."""
    mc = params.config
    g, _ = mc.index_of(sc)
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=params.dtype))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.shape[1:] != (mc.image_side, mc.image_side, mc.channels):
        raise ConfigError(f"expected images [B, {mc.image_side}, {mc.image_side}, {mc.channels}], "
                          f"got {list(x.shape)}")
    tb = align_and_embed(split_patches(x, mc.grids[g - 1]), g, params)
    drops = set(mc.drop_blocks) if sc.keep_rate < 1.0 else set()
    for block in range(1, mc.depth + 1):
        y, a_cls = _attention_half(tb.tokens, block, params)
        tb.attention_records.append(a_cls)
        tb = TokenBatch(y, tb.kept_index, tb.attention_records)
        if block in drops:
            tb = prune_tokens(tb, a_cls, sc.keep_rate, mc.prune_policy)
        tb = TokenBatch(_ffn_half(tb.tokens, block, params), tb.kept_index, tb.attention_records)
    cls = _norm(tb.tokens, "norm", params)[:, 0]
    logits = nx.linear(cls, params["head.weight"], params["head.bias"])
    return nx.softmax_lastaxis(logits), tb


def predict(images: np.ndarray, sc: SubnetConfig, params: ModelParams, batch_size: int = 250) -> np.ndarray:
    """Probabilities for a whole array of images, in fixed-size chunks."""
    out = []
    with nx.no_grad():
        for i in range(0, len(images), batch_size):
            probs, _ = forward(images[i:i + batch_size], sc, params)
            out.append(probs.data)
    return np.concatenate(out, axis=0)
