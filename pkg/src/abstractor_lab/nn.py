"""Transformer building blocks: attention, feedforward, norms, embeddings, symbols.

Every layer accepts inputs with arbitrary leading batch axes, ``(..., m, d)``;
weights multiply from the right (``x @ W``), so a weight stored as
``(d_in, d_out)`` acts on row vectors.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ShapeError
from .rng import Rng
from .tensor import Parameter, Tensor

ATTENTION_ACTIVATIONS = ("softmax", "sigmoid", "tanh", "linear", "relu")


class Module:
    """Container that discovers parameters from its attributes, in assignment order."""

    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        found: dict[str, Parameter] = {}
        seen: set[int] = set()
        self._collect(prefix, found, seen)
        return found

    def _collect(self, prefix, found, seen):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    found[prefix + key] = value
            elif isinstance(value, Module):
                value._collect(f"{prefix}{key}.", found, seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{prefix}{key}.{i}.", found, seen)

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters; returns the names that were loaded."""
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        loaded = []
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                if strict:
                    raise ShapeError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
                continue
            p.data = np.ascontiguousarray(arr.astype(p.dtype))
            loaded.append(name)
        return loaded

    def astype(self, dtype) -> "Module":
        """Cast every parameter (and frozen tensor attribute) in place."""
        for module in self.modules():
            for key, value in vars(module).items():
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
        return self

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    @contextlib.contextmanager
    def substitute(self, name: str, replacement: Tensor):
        """Temporarily replace the parameter called ``name`` by another tensor."""
        *path, leaf = name.split(".")
        owner = self
        for part in path:
            owner = owner[int(part)] if isinstance(owner, (list, tuple)) else getattr(owner, part)
        # symmetric relation encoders alias one parameter under two attributes
        original = getattr(owner, leaf)
        aliases = [
            (m, k) for m in self.modules() for k, v in vars(m).items() if v is original
        ]
        for m, k in aliases:
            setattr(m, k, replacement)
        try:
            yield
        finally:
            for m, k in aliases:
                setattr(m, k, original)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, gain: float = 1.0):
        if d_in < 1 or d_out < 1:
            raise ConfigError(f"Linear dims must be positive, got {d_in}->{d_out}")
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(gain * glorot_uniform(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got shape {x.shape}")
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        if d < 1:
            raise ConfigError("LayerNorm width must be >= 1")
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """Position-wise affine -> activation -> affine."""

    def __init__(self, d_model: int, d_ff: int, rng: Rng, activation: str = "relu", d_out: int | None = None):
        if d_ff < 1:
            raise ConfigError(f"feedforward hidden width must be positive, got {d_ff}")
        if activation not in T.ELEMENTWISE_KINDS:
            raise ConfigError(f"unknown feedforward activation {activation!r}")
        self.activation = activation
        self.inner = Linear(d_model, d_ff, rng)
        self.outer = Linear(d_ff, d_out or d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(T.elementwise(self.inner(x), self.activation))


def feed_forward(x: Tensor, params: FeedForward) -> Tensor:
    return params(x)


class Embedding(Module):
    def __init__(self, vocab: int, d: int, rng: Rng):
        self.table = Parameter(rng.normal((vocab, d), scale=1.0 / math.sqrt(d)))

    def forward(self, idx) -> Tensor:
        return T.take_rows(self.table, idx)


def sinusoidal_bank(max_len: int, d: int) -> np.ndarray:
    """Interleaved sin/cos position codes; slot 2k is sin and 2k+1 is cos of ``p / 10000**(2k/d)``."""
    if d % 2:
        raise ConfigError(f"sinusoidal bank needs an even dimension, got {d}")
    pos = np.arange(max_len)[:, None]
    freq = 1.0 / 10000.0 ** (np.arange(0, d, 2) / d)
    bank = np.empty((max_len, d))
    bank[:, 0::2] = np.sin(pos * freq)
    bank[:, 1::2] = np.cos(pos * freq)
    return bank


def causal_mask(m: int) -> np.ndarray:
    """Boolean (m, m); entry (t, t') is True when position t may attend to t' (t' <= t)."""
    if m < 1:
        raise ConfigError("causal mask length must be >= 1")
    return np.tril(np.ones((m, m), dtype=bool))


SYMBOL_MODES = ("learned", "sinusoidal", "position_relative")


class SymbolBank(Module):
    """Input-independent symbol vectors.

    ``learned`` and ``sinusoidal`` banks hold one row per absolute position;
    the sinusoidal rows are frozen. A ``position_relative`` bank holds one
    learned row per offset ``j - i`` in ``[-(max_len-1), max_len-1]``.
    """

    def __init__(self, mode: str, max_len: int, d_s: int, rng: Rng):
        if mode not in SYMBOL_MODES:
            raise ConfigError(f"unknown symbol mode {mode!r}")
        self.mode, self.max_len, self.d_s = mode, max_len, d_s
        if mode == "learned":
            self.vectors = Parameter(rng.normal((max_len, d_s), scale=1.0 / math.sqrt(d_s)))
        elif mode == "sinusoidal":
            self.vectors = Tensor(sinusoidal_bank(max_len, d_s))
        else:
            self.vectors = Parameter(rng.normal((2 * max_len - 1, d_s), scale=1.0 / math.sqrt(d_s)))

    def absolute(self, m: int) -> Tensor:
        if self.mode == "position_relative":
            raise ConfigError("a position-relative bank has no absolute symbols")
        if m > self.max_len:
            raise CapacityError(f"sequence length {m} exceeds symbol bank of {self.max_len}")
        return self.vectors[:m]

    def offset_index(self, m: int) -> np.ndarray:
        """Row of the bank holding s_{j-i}, as an (m, m) array indexed [i, j]."""
        if m > self.max_len:
            raise CapacityError(f"offsets up to {m - 1} exceed bank range {self.max_len - 1}")
        i = np.arange(m)[:, None]
        j = np.arange(m)[None, :]
        return j - i + (self.max_len - 1)

    def relative(self, m: int) -> Tensor:
        """Symbols s_{j-i} as an (m, m, d_s) tensor indexed [i, j]."""
        if self.mode != "position_relative":
            raise ConfigError("relative symbols need a position_relative bank")
        return T.take_rows(self.vectors, self.offset_index(m))

    def forward(self, m: int) -> Tensor:
        return self.absolute(m)


# attention ----------------------------------------------------------------
def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., m, h*d) -> (..., h, m, d)."""
    *lead, m, width = x.shape
    return x.reshape(*lead, m, n_heads, width // n_heads).swapaxes(-3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, m, d) -> (..., m, h*d)."""
    *lead, h, m, d = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, m, h * d)


def attention_weights(scores: Tensor, mask=None, activation: str = "softmax") -> Tensor:
    """Normalize raw scores. Masked entries are -inf before softmax, or zeroed after an elementwise activation."""
    if activation == "softmax":
        return T.row_softmax(scores, mask)
    if activation not in T.ELEMENTWISE_KINDS:
        raise ConfigError(f"unknown attention activation {activation!r}; expected one of {ATTENTION_ACTIVATIONS}")
    weights = T.elementwise(scores, activation)
    if mask is not None:
        weights = weights * np.asarray(mask, dtype=weights.dtype)
    return weights


def scaled_dot_attention(
    Q: Tensor, K: Tensor, V: Tensor, mask=None, activation: str = "softmax", scale_scores: bool = True
) -> Tensor:
    """activation(Q K^T / sqrt(d_p)) V over the last two axes."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention shapes do not conform: Q{Q.shape} K{K.shape} V{V.shape}")
    scores = T.matmul(Q, K.swapaxes(-1, -2))
    if scale_scores:
        scores = scores * (1.0 / math.sqrt(Q.shape[-1]))
    return T.matmul(attention_weights(scores, mask, activation), V)


class MultiHeadAttention(Module):
    """Projection parameters for multi-head attention with independent Q/K/V sources.

    Each head projects to ``d_p``; the value projection uses the same width,
    and the concatenated heads are mapped to ``d_out``.
    """

    def __init__(
        self,
        d_query: int,
        d_key: int,
        d_value: int,
        n_heads: int,
        d_p: int,
        d_out: int,
        rng: Rng,
        activation: str = "softmax",
        scale_scores: bool = True,
    ):
        if n_heads < 1 or d_p < 1:
            raise ConfigError(f"need n_heads >= 1 and d_p >= 1, got {n_heads}, {d_p}")
        if activation not in ATTENTION_ACTIVATIONS:
            raise ConfigError(f"unknown attention activation {activation!r}")
        self.n_heads, self.d_p = n_heads, d_p
        self.activation = activation
        self.scale_scores = scale_scores
        self.query = Linear(d_query, n_heads * d_p, rng)
        self.key = Linear(d_key, n_heads * d_p, rng)
        self.value = Linear(d_value, n_heads * d_p, rng)
        self.output = Linear(n_heads * d_p, d_out, rng)

    def forward(self, query_src: Tensor, key_src: Tensor, value_src: Tensor, mask=None) -> Tensor:
        return multi_head_attention(query_src, key_src, value_src, self, mask, self.activation, self.scale_scores)


def multi_head_attention(
    query_src: Tensor,
    key_src: Tensor,
    value_src: Tensor,
    params: MultiHeadAttention,
    mask=None,
    activation: str = "softmax",
    scale_scores: bool = True,
) -> Tensor:
    """Per-head scaled dot attention on projected sources, heads concatenated then output-projected."""
    h = params.n_heads
    if params.query.d_out != h * params.d_p or params.output.d_in != h * params.d_p:
        raise ConfigError("attention projection widths disagree with n_heads * d_p")
    if key_src.shape[-2] != value_src.shape[-2]:
        raise ShapeError(f"key and value sources differ in length: {key_src.shape} vs {value_src.shape}")
    q = split_heads(params.query(query_src), h)
    k = split_heads(params.key(key_src), h)
    v = split_heads(params.value(value_src), h)
    heads = scaled_dot_attention(q, k, v, mask, activation, scale_scores)
    return params.output(merge_heads(heads))
