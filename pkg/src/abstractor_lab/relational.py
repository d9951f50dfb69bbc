"""Inner-product relations, relational cross-attention and CoRelNet.

Relational cross-attention (RCA) computes per head

    A_h = act(phi_h(X) psi_h(X)^T) (S W_v,h)

so the output depends on the inputs only through the relation matrices;
the values are symbols, never projections of X.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ShapeError
from .nn import Linear, Module, SymbolBank, attention_weights, merge_heads, split_heads
from .rng import Rng
from .tensor import Tensor

RELATION_ACTIVATIONS = ("softmax", "sigmoid", "tanh", "linear", "relu")


class RelationEncoders(Module):
    """d_r pairs of left/right linear maps into R^{d_p}.

    With ``symmetric=True`` the right map *is* the left map (one parameter,
    one gradient accumulator).
    """

    def __init__(self, d_in: int, d_p: int, d_r: int, rng: Rng, symmetric: bool = False, bias: bool = True):
        self.d_in, self.d_p, self.d_r = d_in, d_p, d_r
        self.symmetric = symmetric
        self.left = Linear(d_in, d_r * d_p, rng, bias=bias)
        self.right = self.left if symmetric else Linear(d_in, d_r * d_p, rng, bias=bias)

    def scores(self, X: Tensor, scale_scores: bool = True) -> Tensor:
        """Raw relation scores, shape (..., d_r, m, m)."""
        if X.shape[-1] != self.d_in:
            raise ConfigError(f"relation encoders expect width {self.d_in}, got {X.shape[-1]}")
        left = split_heads(self.left(X), self.d_r)
        right = left if self.symmetric else split_heads(self.right(X), self.d_r)
        s = T.matmul(left, right.swapaxes(-1, -2))
        if scale_scores:
            s = s * (1.0 / math.sqrt(self.d_p))
        return s


@dataclass
class RelationTensor:
    """Pairwise relations ``values[..., i, j, k]`` with the activation already applied."""

    values: Tensor
    activation_applied: str = "none"

    def head(self, k: int) -> np.ndarray:
        return self.values.data[..., k]


def relation_tensor(X: Tensor, enc: RelationEncoders, scale_scores: bool = True) -> RelationTensor:
    """values[i, j, k] = <W1^(k) x_i, W2^(k) x_j> (divided by sqrt(d_p) when scaling)."""
    X = T.as_tensor(X)
    scores = enc.scores(X, scale_scores)
    nd = scores.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
    return RelationTensor(T.transpose(scores, axes), "none")


def _diagonal_mask(m: int) -> np.ndarray:
    return ~np.eye(m, dtype=bool)


class RelationalCrossAttention(Module):
    """RCA parameters: relation encoders, per-head value maps W_o^(i), output map W_o."""

    def __init__(
        self,
        d_in: int,
        d_s: int,
        d_r: int,
        d_p: int,
        d_out: int,
        rng: Rng,
        activation: str = "softmax",
        symmetric: bool = False,
        scale_scores: bool = True,
        mask_diagonal: bool = False,
    ):
        if activation not in RELATION_ACTIVATIONS:
            raise ConfigError(f"unknown relation activation {activation!r}")
        self.d_r, self.d_p, self.d_s = d_r, d_p, d_s
        self.activation = activation
        self.scale_scores = scale_scores
        self.mask_diagonal = mask_diagonal
        self.encoders = RelationEncoders(d_in, d_p, d_r, rng, symmetric=symmetric)
        self.value = Linear(d_s, d_r * d_p, rng)
        self.output = Linear(d_r * d_p, d_out, rng)

    def relations(self, X: Tensor) -> Tensor:
        """Activated relation matrices, shape (..., d_r, m, m)."""
        scores = self.encoders.scores(X, self.scale_scores)
        mask = _diagonal_mask(X.shape[-2]) if self.mask_diagonal else None
        return attention_weights(scores, mask, self.activation)

    def forward(self, X: Tensor, S: Tensor) -> Tensor:
        return relational_cross_attention(X, S, self)


def relational_cross_attention(X: Tensor, S: Tensor, params: RelationalCrossAttention) -> Tensor:
    """Output W_o concat_i(act(R_i) S W_v,i); S supplies one symbol per object."""
    X, S = T.as_tensor(X), T.as_tensor(S)
    m = X.shape[-2]
    if S.shape[-2] < m:
        raise CapacityError(f"{S.shape[-2]} symbols cannot serve a sequence of {m} objects")
    if S.shape[-2] > m:
        S = S[..., :m, :]
    if S.shape[-1] != params.d_s:
        raise ShapeError(f"symbols have width {S.shape[-1]}, expected {params.d_s}")
    R = params.relations(X)
    V = split_heads(params.value(S), params.d_r)
    return params.output(merge_heads(T.matmul(R, V)))


def position_relative_rca(X: Tensor, bank: SymbolBank, params: RelationalCrossAttention) -> Tensor:
    """A_i = sum_j R_ij s_{j-i} per head, heads combined as in ordinary RCA."""
    X = T.as_tensor(X)
    m = X.shape[-2]
    rel = bank.relative(m)  # (m, m, d_s) indexed [i, j]
    R = params.relations(X)  # (..., h, m, m)
    h, d_p = params.d_r, params.d_p
    V = params.value(rel).reshape(m, m, h, d_p)
    V = T.transpose(V, (2, 0, 1, 3))  # (h, i, j, d_p)
    R5 = R.reshape(*R.shape, 1)
    A = T.tsum(R5 * V, axis=-2)  # (..., h, m, d_p)
    return params.output(merge_heads(A))


# CoRelNet -------------------------------------------------------------------
COREL_VARIANTS = ("symmetric", "asymmetric")


class CoRelNet(Module):
    """Similarity matrix A_ij = <x_i W_1, x_j W_2> (W_1 = W_2 when symmetric), optionally row-softmaxed."""

    def __init__(self, d: int, rng: Rng, variant: str = "symmetric", use_softmax: bool = True):
        if variant not in COREL_VARIANTS:
            raise ConfigError(f"unknown CoRelNet variant {variant!r}")
        self.variant = variant
        self.use_softmax = use_softmax
        self.left = Linear(d, d, rng, bias=False)
        self.right = self.left if variant == "symmetric" else Linear(d, d, rng, bias=False)

    def similarity(self, X: Tensor) -> Tensor:
        left = self.left(X)
        right = left if self.variant == "symmetric" else self.right(X)
        return T.matmul(left, right.swapaxes(-1, -2))

    def forward(self, X: Tensor) -> Tensor:
        A = self.similarity(X)
        return T.row_softmax(A) if self.use_softmax else A


def corelnet(X, variant: str, maps, use_softmax: bool = True) -> Tensor:
    """Functional CoRelNet. ``maps`` is W (symmetric) or (W_1, W_2), each d x d and applied as W x."""
    X = T.as_tensor(X)
    if variant == "symmetric":
        W1 = W2 = T.as_tensor(maps)
    elif variant == "asymmetric":
        W1, W2 = (T.as_tensor(w) for w in maps)
    else:
        raise ConfigError(f"unknown CoRelNet variant {variant!r}")
    left = T.matmul(X, W1.T)
    right = left if variant == "symmetric" else T.matmul(X, W2.T)
    A = T.matmul(left, right.T)
    return T.row_softmax(A) if use_softmax else A


# random-projection geometry -------------------------------------------------
def normalized_inner_products(x: np.ndarray, y: np.ndarray, sigma: float, trials: int, rng: Rng) -> np.ndarray:
    """<Phi x, Phi y> / (sigma^2 d) for ``trials`` draws of Phi with iid N(0, sigma^2) entries."""
    d = x.shape[0]
    out = np.empty(trials)
    for t in range(trials):
        phi = rng.normal((d, d), scale=sigma)
        out[t] = (phi @ x) @ (phi @ y) / (sigma**2 * d)
    return out


def inner_product_preservation_probe(
    d: int, sigma: float, trials: int, rng: Rng, x: np.ndarray | None = None, y: np.ndarray | None = None
) -> float:
    """Mean |<Phi x, Phi y>/(sigma^2 d) - <x, y>| / (|x| |y|) over random Gaussian maps Phi.

    Without explicit ``x``/``y`` a fresh pair of random unit vectors is drawn per trial.
    """
    if d < 2 or trials < 1:
        raise ConfigError("probe needs d >= 2 and trials >= 1")
    errors = np.empty(trials)
    for t in range(trials):
        if x is None or y is None:
            u = rng.normal(d)
            v = rng.normal(d)
            u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
        else:
            u, v = np.asarray(x, float), np.asarray(y, float)
        est = normalized_inner_products(u, v, sigma, 1, rng)[0]
        errors[t] = abs(est - u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(errors.mean())
