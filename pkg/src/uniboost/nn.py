"""Parameter containers and transformer building blocks.

Initialization follows standard transformer practice: truncated normal
(std 0.02, clipped at two standard deviations) for weights, zeros for
biases and shifts, ones for layer-norm scales. Each parameter carries a
dotted name so checkpoints and optimizer groups can address it.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["Parameter", "Module", "ModuleList", "Linear", "Embedding",
           "LayerNorm", "MultiHeadSelfAttention", "FeedForward", "EncoderBlock",
           "trunc_normal", "init_rng"]


def init_rng(seed: int | str) -> np.random.Generator:
    """Generator seeded stably from an int or string label."""
    if isinstance(seed, str):
        seed = int.from_bytes(seed.encode("utf-8"), "big") % (2 ** 63)
    return np.random.default_rng(seed)


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...],
                 std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they land within two sigma."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def Parameter(values: np.ndarray, name: str = "") -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class Module:
    """Tree of parameters. Attribute assignment registers children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for key, p in self._params.items():
            yield (f"{prefix}{key}", p)
        for key, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{key}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = dict(self.named_parameters())
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in mine.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.values.shape:
                raise ValueError(f"{name}: shape {arr.shape} != parameter {p.values.shape}")
            p.values[...] = arr

    def rename_parameters(self, prefix: str = "") -> None:
        """Stamp dotted path names onto every parameter (for diagnostics)."""
        for name, p in self.named_parameters(prefix=prefix):
            p.name = name


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(self.items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Embedding(Module):
    def __init__(self, rng, rows: int, width: int):
        super().__init__()
        self.rows = rows
        self.width = width
        self.table = Parameter(trunc_normal(rng, (rows, width)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


class LayerNorm(Module):
    def __init__(self, width: int):
        super().__init__()
        self.scale = Parameter(np.ones(width))
        self.shift = Parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.scale, self.shift)


class MultiHeadSelfAttention(Module):
    """Self-attention over [B, T, D] with an optional boolean allow-mask."""

    def __init__(self, rng, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = Linear(rng, width, 3 * width)
        self.out = Linear(rng, width, width)

    def __call__(self, x: Tensor, allow: np.ndarray | None = None) -> Tensor:
        b, t, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv = self.qkv(x)
        qkv = T.reshape(qkv, (b, t, 3, h, hd))
        qkv = T.transpose(T.transpose(qkv, 1, 3), 1, 2)  # [B, 3, H, T, hd]
        q = T.reshape(T.slice_(qkv, (slice(None), slice(0, 1))), (b, h, t, hd))
        k = T.reshape(T.slice_(qkv, (slice(None), slice(1, 2))), (b, h, t, hd))
        v = T.reshape(T.slice_(qkv, (slice(None), slice(2, 3))), (b, h, t, hd))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(hd))
        if allow is not None:
            if allow.shape != (t, t):
                raise ValueError(f"attention mask shape {allow.shape} != ({t}, {t})")
            scores = T.masked_fill(scores, ~allow)
        attn = T.softmax(scores)
        mixed = T.matmul(attn, v)  # [B, H, T, hd]
        merged = T.reshape(T.transpose(mixed, 1, 2), (b, t, d))
        return self.out(merged)


class FeedForward(Module):
    """Two-layer MLP with GELU, hidden width 4x."""

    def __init__(self, rng, width: int):
        super().__init__()
        self.up = Linear(rng, width, 4 * width)
        self.down = Linear(rng, 4 * width, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class EncoderBlock(Module):
    """Pre-norm transformer block."""

    def __init__(self, rng, width: int, heads: int):
        super().__init__()
        self.norm1 = LayerNorm(width)
        self.attn = MultiHeadSelfAttention(rng, width, heads)
        self.norm2 = LayerNorm(width)
        self.ffn = FeedForward(rng, width)

    def __call__(self, x: Tensor, allow: np.ndarray | None = None) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x), allow))
        x = T.add(x, self.ffn(self.norm2(x)))
        return x
