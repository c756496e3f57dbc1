"""Differentiable building blocks: linear/MLP layers, multi-head attention,
pre-norm transformer blocks, a GRU cell, patch embedding, and the composite
losses used by the training loop.

Modules are thin parameter containers; ``named_parameters`` walks the
attribute tree and yields dot-separated paths, which double as checkpoint
keys and optimizer identities.
"""

from __future__ import annotations

from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": T.relu,
    "gelu": T.gelu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
}


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples with tails beyond two standard deviations redrawn."""
    out = rng.standard_normal(shape) * std
    while True:
        bad = np.abs(out) > 2.0 * std
        n_bad = int(bad.sum())
        if n_bad == 0:
            return out
        out[bad] = rng.standard_normal(n_bad) * std


class Module:
    """Base container; registers Parameters and sub-Modules on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif (isinstance(value, (list, tuple)) and value
                and all(isinstance(v, Module) for v in value)):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def frozen_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.trainable]

    def assign_names(self, prefix: str = "") -> None:
        """Stamp dot-separated path names onto every parameter."""
        for name, p in self.named_parameters(prefix):
            p.name = name


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 std: float = 0.02, bias: bool = True, trainable: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim), std), trainable)
        self.bias = Parameter(np.zeros(out_dim), trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight.value)
        if self.bias is not None:
            out = T.add(out, self.bias.value)
        return out


class MLP(Module):
    """Chained linear layers with an activation between (none after the last)."""

    def __init__(self, rng: np.random.Generator, widths: Sequence[int],
                 activation: str = "relu", std: float = 0.02, trainable: bool = True):
        super().__init__()
        if len(widths) < 2:
            raise ValueError(f"MLP needs at least two widths, got {list(widths)}")
        self.widths = tuple(widths)
        self.activation = activation
        self._act = ACTIVATIONS[activation]
        self.layers = [Linear(rng, widths[i], widths[i + 1], std, trainable=trainable)
                       for i in range(len(widths) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(
                f"mlp: input width {x.shape[-1]} does not match first layer "
                f"width {self.widths[0]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = self._act(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, trainable: bool = True, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = Parameter(np.ones(dim), trainable)
        self.shift = Parameter(np.zeros(dim), trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.scale.value, self.shift.value, self.eps)


class MultiHeadAttention(Module):
    """Self-attention over a (tokens, dim) sequence.

    The per-head attention weights of the most recent forward pass are kept
    on ``last_attn`` (heads, T, T) for the inspection/dump interface.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int,
                 std: float = 0.02, trainable: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"attention: heads {heads} must divide dim {dim}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim, std, trainable=trainable)
        self.wk = Linear(rng, dim, dim, std, trainable=trainable)
        self.wv = Linear(rng, dim, dim, std, trainable=trainable)
        self.wo = Linear(rng, dim, dim, std, trainable=trainable)
        self.last_attn: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"attention: input dim {x.shape[-1]} != block dim {self.dim}")
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        inv_scale = 1.0 / np.sqrt(self.head_dim)
        contexts = []
        attn_weights = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh, kh, vh = q[:, lo:hi], k[:, lo:hi], v[:, lo:hi]
            weights = T.softmax(T.mul(T.matmul(qh, T.transpose(kh)), inv_scale))
            attn_weights.append(weights.data)
            contexts.append(T.matmul(weights, vh))
        self.last_attn = np.stack(attn_weights)
        return self.wo(T.concat(contexts, axis=1))


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(LN(x)), then + mlp(LN(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int,
                 mlp_ratio: float = 4.0, std: float = 0.02, trainable: bool = True):
        super().__init__()
        self.dim = dim
        self.ln1 = LayerNorm(dim, trainable)
        self.attn = MultiHeadAttention(rng, dim, heads, std, trainable)
        self.ln2 = LayerNorm(dim, trainable)
        self.mlp = MLP(rng, (dim, int(dim * mlp_ratio), dim), "gelu", std, trainable)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.mlp(self.ln2(x)))


class GRUCell(Module):
    """Gated recurrent cell. Gates follow the original formulation:

        z = sigmoid(x Wz + h Uz + bz)        update (keep-old) gate
        r = sigmoid(x Wr + h Ur + br)        reset gate
        c = tanh(x Wc + (r * h) Uc + bc)     candidate state
        h' = z * h + (1 - z) * c
    """

    def __init__(self, rng: np.random.Generator, input_dim: int, hidden_dim: int,
                 std: float = 0.02, trainable: bool = True):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim

        def pair(label):
            return (Parameter(trunc_normal(rng, (input_dim, hidden_dim), std), trainable),
                    Parameter(trunc_normal(rng, (hidden_dim, hidden_dim), std), trainable),
                    Parameter(np.zeros(hidden_dim), trainable))

        self.wz, self.uz, self.bz = pair("z")
        self.wr, self.ur, self.br = pair("r")
        self.wc, self.uc, self.bc = pair("c")

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"gru: input width {x.shape[-1]} != {self.input_dim}")
        z = T.sigmoid(T.matmul(x, self.wz.value) + T.matmul(h, self.uz.value) + self.bz.value)
        r = T.sigmoid(T.matmul(x, self.wr.value) + T.matmul(h, self.ur.value) + self.br.value)
        c = T.tanh(T.matmul(x, self.wc.value) + T.matmul(T.mul(r, h), self.uc.value) + self.bc.value)
        return T.add(T.mul(z, h), T.mul(T.sub(1.0, z), c))

    def run(self, inputs: Sequence[Tensor], h0: Tensor | None = None) -> list[Tensor]:
        """All hidden states over the sequence; rows of each input are a batch."""
        inputs = list(inputs)
        if not inputs:
            raise ValueError("gru: empty input sequence")
        n = inputs[0].shape[0]
        h = Tensor(np.zeros((n, self.hidden_dim))) if h0 is None else h0
        states = []
        for x in inputs:
            h = self.step(x, h)
            states.append(h)
        return states


def gru_fuse_sequence(inputs: Sequence[Tensor], cell: GRUCell,
                      h0: Tensor | None = None) -> Tensor:
    """Final hidden state after folding the sequence through the cell."""
    return cell.run(inputs, h0)[-1]


class PatchEmbed(Module):
    """Non-overlapping patchify + linear projection of a (C, H, W) image."""

    def __init__(self, rng: np.random.Generator, patch_size: int, in_channels: int,
                 dim: int, std: float = 0.02, trainable: bool = True):
        super().__init__()
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.dim = dim
        self.proj = Linear(rng, in_channels * patch_size * patch_size, dim,
                           std, trainable=trainable)

    def __call__(self, image: Tensor) -> Tensor:
        c, h, w = image.shape
        p = self.patch_size
        if c != self.in_channels:
            raise ShapeError(f"patch_embed: got {c} channels, expected {self.in_channels}")
        if h != w or h % p != 0:
            raise ShapeError(
                f"patch_embed: image {h}x{w} must be square with side divisible by {p}")
        n = h // p
        # (C,H,W) -> (n, n, C, p, p) -> (n*n, C*p*p), one row per patch.
        patches = T.reshape(image, (c, n, p, n, p))
        patches = T.transpose(patches, (1, 3, 0, 2, 4))
        patches = T.reshape(patches, (n * n, c * p * p))
        return self.proj(patches)


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    """(N, C) row-major tokens -> (C, h, w) feature map."""
    if tokens.shape[0] != h * w:
        raise ShapeError(f"tokens_to_map: {tokens.shape[0]} tokens != {h}x{w}")
    return T.reshape(T.transpose(tokens), (tokens.shape[1], h, w))


def map_to_tokens(fmap: Tensor) -> Tensor:
    """(C, h, w) feature map -> (h*w, C) row-major tokens."""
    c, h, w = fmap.shape
    return T.transpose(T.reshape(fmap, (c, h * w)))


# -- composite losses -----------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    logp = T.log_softmax(logits)
    return T.mul(T.tensor_sum(T.mul(logp, onehot)), -1.0 / n)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable mean BCE: max(z,0) - z*y + log(1 + exp(-|z|))."""
    targets = np.asarray(targets, dtype=np.float64)
    stable = T.log(T.add(T.exp(T.mul(T.absolute(logits), -1.0)), 1.0))
    per_elem = T.add(T.sub(T.relu(logits), T.mul(logits, targets)), stable)
    return T.tensor_mean(per_elem)


def smooth_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Huber-style loss, summed over the last axis and averaged over rows.

    The |d| < 1 branch mask is treated as a constant; the branch boundary has
    measure zero so the gradient is exact almost everywhere.
    """
    target = np.asarray(target, dtype=np.float64)
    diff = T.sub(pred, target)
    adiff = T.absolute(diff)
    inner = (adiff.data < 1.0).astype(np.float64)
    quadratic = T.mul(T.mul(diff, diff), 0.5 * inner)
    linear = T.mul(T.sub(adiff, 0.5), 1.0 - inner)
    per_row = T.tensor_sum(T.add(quadratic, linear), axis=-1)
    return T.tensor_mean(per_row)
