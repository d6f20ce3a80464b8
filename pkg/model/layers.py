"""
Neural Layers
Parameter containers and the transformer building blocks shared by the
encoder, the tree decoder and the case-based reasoning module.
"""

from typing import Dict, List, Optional, Sequence

import numpy as np

from model.autodiff import (
    Tensor, parameter, relu, layer_norm, softmax, matmul, getitem, stack, zero_grads,
)
from utils.error_handler import DimensionError


class Module:
    """Base class: parameters are Tensor attributes with requires_grad, found recursively"""

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                params[prefix + name] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for idx, sub in enumerate(value):
                    params.update(sub.named_parameters(f"{prefix}{name}.{idx}."))
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        zero_grads(self.parameters())


def init_weight(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    return parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = init_weight(rng, in_dim, (in_dim, out_dim))
        self.bias = parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        return matmul(x, self.weight) + self.bias


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, scale: float = 1.0):
        self.table = parameter(rng.normal(0.0, scale / np.sqrt(dim), size=(count, dim)))

    def __call__(self, ids) -> Tensor:
        return getitem(self.table, np.asarray(ids, dtype=np.int64))

    @property
    def count(self) -> int:
        return self.table.shape[0]


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with learned query/key/value/output projections"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise DimensionError(f"hidden size {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = x.reshape(lead + (n, self.heads, self.head_dim))
        k = len(lead)
        return x.transpose(tuple(range(k)) + (k + 1, k, k + 2))

    def _merge_heads(self, x: Tensor) -> Tensor:
        lead = x.shape[:-3]
        k = len(lead)
        n = x.shape[-2]
        x = x.transpose(tuple(range(k)) + (k + 1, k, k + 2))
        return x.reshape(lead + (n, self.dim))

    def attention_weights(self, queries: Tensor, keys: Tensor) -> Tensor:
        q = self._split_heads(self.query(queries))
        k = self._split_heads(self.key(keys))
        scores = matmul(q, k.transpose(_swap_last(k.ndim))) * (1.0 / np.sqrt(self.head_dim))
        return softmax(scores, axis=-1)

    def __call__(self, queries: Tensor, keys: Tensor, values: Optional[Tensor] = None) -> Tensor:
        values = keys if values is None else values
        if queries.shape[-1] != self.dim or keys.shape[-1] != self.dim:
            raise DimensionError(f"attention expects dim {self.dim}, got {queries.shape} / {keys.shape}")
        weights = self.attention_weights(queries, keys)
        v = self._split_heads(self.value(values))
        return self.output(self._merge_heads(matmul(weights, v)))


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class FeedForward(Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator):
        self.inner = Linear(in_dim, hidden_dim, rng)
        self.outer = Linear(hidden_dim, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(relu(self.inner(x)))


class TransformerBlock(Module):
    """Post-norm block: x = LN(x + MHA(x)); x = LN(x + FF(x))"""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.attention = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.feedforward = FeedForward(dim, ff_dim, dim, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attention(x, x))
        return self.norm2(x + self.feedforward(x))


class TransformerStack(Module):
    def __init__(self, blocks: int, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(dim, heads, ff_dim, rng) for _ in range(blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def readout(self, tokens: Sequence[Tensor]) -> Tensor:
        """Run over a batch of short sequences given as per-position (N, d) tensors; read position 0"""
        x = stack(list(tokens), axis=1)
        return getitem(self(x), (slice(None), 0))
