"""Abstractor, Encoder and Decoder stacks and the composite models built from a ModelSpec."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError
from .nn import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    SymbolBank,
    causal_mask,
    sinusoidal_bank,
)
from .relational import CoRelNet, RelationalCrossAttention, position_relative_rca
from .rng import Rng
from .tensor import Tensor

MODEL_KINDS = (
    "arch_a",
    "arch_b",
    "arch_c",
    "arch_d",
    "arch_e",
    "transformer",
    "ablation",
    "corelnet_sym",
    "corelnet_asym",
    "symbolic_mlp",
)
SEQ2SEQ_KINDS = ("arch_a", "arch_b", "arch_c", "arch_d", "arch_e", "transformer", "ablation")

START_TOKEN = 10
PAD_TOKEN = 11
HEAD_INIT_GAIN = 0.1


@dataclass
class AbstractorConfig:
    n_layers: int = 1
    d_r: int = 2
    d_p: int = 64
    d_s: int = 64
    d_ff: int = 64
    rel_activation: str = "softmax"
    symbol_mode: str = "learned"
    use_residual: bool = True
    use_layer_norm: bool = True
    symmetric: bool = False
    # extra self-attention sublayer after RCA (residual + norm)
    use_self_attention: bool = False
    scale_scores: bool = True
    mask_diagonal: bool = False
    # "relational" = RCA(Q<-X, K<-X, V<-A); "standard" = cross-attention Q<-A, K<-X, V<-X (ablation)
    interface: str = "relational"

    def validate(self) -> None:
        for name in ("n_layers", "d_r", "d_p", "d_s", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"abstractor {name} must be positive")
        if self.interface not in ("relational", "standard"):
            raise ConfigError(f"unknown abstractor interface {self.interface!r}")
        if self.symbol_mode == "sinusoidal" and self.d_s % 2:
            raise ConfigError("sinusoidal symbols need an even d_s")


@dataclass
class StackConfig:
    """Encoder or decoder stack hyperparameters."""

    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 64
    d_p: int | None = None  # per-head width; defaults to d_model
    pre_norm: bool = False

    @property
    def head_dim(self) -> int:
        return self.d_p or self.d_model

    def validate(self, name: str) -> None:
        if self.n_layers < 1:
            raise ConfigError(f"{name} needs at least one layer")
        for attr in ("n_heads", "d_model", "d_ff"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"{name} {attr} must be positive")
        if self.d_model % 2:
            raise ConfigError(f"{name} d_model must be even for sinusoidal positions")


@dataclass
class ModelSpec:
    kind: str
    d_input: int
    head: str = "seq2seq"  # or "binary"
    vocab_size: int = 12
    max_input_len: int = 10
    max_target_len: int = 10
    encoder: StackConfig | None = None
    decoder: StackConfig | None = None
    abstractor: AbstractorConfig | None = None
    abstractor2: AbstractorConfig | None = None
    # arch_b/arch_d/ablation: Abstractor reads encoder states ("encoder") or source embeddings ("embedding")
    abstractor_input: str = "encoder"
    context_order: tuple[str, ...] = ("encoder", "abstractor")
    embedder_dim: int | None = None
    corelnet_softmax: bool = True
    mlp_hidden: int = 64
    n_classes: int = 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["context_order"] = list(self.context_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key, sub in (("encoder", StackConfig), ("decoder", StackConfig), ("abstractor", AbstractorConfig), ("abstractor2", AbstractorConfig)):
            if d.get(key) is not None and not isinstance(d[key], sub):
                d[key] = strict_init(sub, d[key], f"model.{key}")
        if "context_order" in d:
            d["context_order"] = tuple(d["context_order"])
        return strict_init(cls, d, "model")

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.head not in ("seq2seq", "binary"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.kind in ("corelnet_sym", "corelnet_asym", "symbolic_mlp") and self.head != "binary":
            raise ConfigError(f"{self.kind} only supports the binary classification head")
        if self.head == "seq2seq" and self.kind not in SEQ2SEQ_KINDS:
            raise ConfigError(f"{self.kind} is not a sequence-to-sequence model")
        needs_encoder = self.kind in ("transformer", "arch_b", "arch_c", "arch_d", "ablation")
        needs_abstractor = self.kind in ("arch_a", "arch_b", "arch_c", "arch_d", "arch_e", "ablation")
        if self.head == "seq2seq" and self.decoder is None:
            raise ConfigError(f"{self.kind} requires a decoder config")
        if needs_encoder and self.encoder is None:
            raise ConfigError(f"{self.kind} requires an encoder config")
        if needs_abstractor and self.abstractor is None:
            raise ConfigError(f"{self.kind} requires an abstractor config")
        if self.kind == "arch_e" and self.abstractor2 is None:
            raise ConfigError("arch_e requires a second abstractor config (abstractor2)")
        if self.kind == "ablation" and self.abstractor.interface != "standard":
            raise ConfigError("ablation requires abstractor.interface = 'standard'")
        if self.kind != "ablation" and self.abstractor is not None and self.abstractor.interface != "relational":
            raise ConfigError(f"{self.kind} requires a relational abstractor interface")
        if self.encoder is not None:
            self.encoder.validate("encoder")
        if self.decoder is not None:
            self.decoder.validate("decoder")
        for ab in (self.abstractor, self.abstractor2):
            if ab is not None:
                ab.validate()
        if self.encoder is not None and self.decoder is not None and self.encoder.d_model != self.decoder.d_model:
            raise ConfigError(
                f"width mismatch between encoder and decoder: {self.encoder.d_model} != {self.decoder.d_model}"
            )
        if self.abstractor is not None and self.abstractor.interface == "standard" and self.encoder is None:
            raise ConfigError("standard (ablation) interface needs encoder states to attend to")
        if self.abstractor_input not in ("encoder", "embedding"):
            raise ConfigError(f"unknown abstractor_input {self.abstractor_input!r}")
        if sorted(self.context_order) != ["abstractor", "encoder"]:
            raise ConfigError("context_order must be a permutation of ('encoder', 'abstractor')")
        if self.head == "binary" and self.kind in SEQ2SEQ_KINDS and self.kind != "arch_a":
            raise ConfigError("binary head is available for arch_a, corelnet_* and symbolic_mlp")


def strict_init(cls, data: dict, where: str):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# stacks -------------------------------------------------------------------
class AbstractorLayer(Module):
    def __init__(self, d_in: int, cfg: AbstractorConfig, rng: Rng):
        self.cfg = cfg
        if cfg.interface == "relational":
            self.attention = RelationalCrossAttention(
                d_in,
                cfg.d_s,
                cfg.d_r,
                cfg.d_p,
                cfg.d_s,
                rng,
                activation=cfg.rel_activation,
                symmetric=cfg.symmetric,
                scale_scores=cfg.scale_scores,
                mask_diagonal=cfg.mask_diagonal,
            )
        else:
            self.attention = MultiHeadAttention(cfg.d_s, d_in, d_in, cfg.d_r, cfg.d_p, cfg.d_s, rng)
        self.norm = LayerNorm(cfg.d_s) if cfg.use_layer_norm else None
        if cfg.use_self_attention:
            self.self_attention = MultiHeadAttention(cfg.d_s, cfg.d_s, cfg.d_s, cfg.d_r, cfg.d_p, cfg.d_s, rng)
            self.self_norm = LayerNorm(cfg.d_s)
        self.ffn = FeedForward(cfg.d_s, cfg.d_ff, rng)


class Abstractor(Module):
    """Stack of relational cross-attention + feedforward layers producing abstract states."""

    def __init__(self, d_in: int, cfg: AbstractorConfig, max_len: int, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        self.d_in = d_in
        self.symbols = SymbolBank(cfg.symbol_mode, max_len, cfg.d_s, rng)
        self.layers = [AbstractorLayer(d_in, cfg, rng) for _ in range(cfg.n_layers)]

    def initial_states(self, m: int) -> Tensor:
        if self.cfg.symbol_mode == "position_relative":
            offset0 = self.symbols.max_len - 1
            return T.take_rows(self.symbols.vectors, np.full(m, offset0))
        return self.symbols.absolute(m)

    def forward(self, X: Tensor) -> Tensor:
        cfg = self.cfg
        m = X.shape[-2]
        if m > self.symbols.max_len:
            raise CapacityError(f"sequence of length {m} exceeds Abstractor capacity {self.symbols.max_len}")
        A_prev = self.initial_states(m)
        for depth, layer in enumerate(self.layers):
            if cfg.interface == "standard":
                query = A_prev if A_prev.ndim == X.ndim else T.broadcast_to(A_prev, (*X.shape[:-2], m, cfg.d_s))
                A = layer.attention(query, X, X)
            elif depth == 0 and cfg.symbol_mode == "position_relative":
                A = position_relative_rca(X, self.symbols, layer.attention)
            else:
                A = layer.attention(X, A_prev)
            if cfg.use_residual:
                A = A + A_prev
            if layer.norm is not None:
                A = layer.norm(A)
            if cfg.use_self_attention:
                A = layer.self_norm(A + layer.self_attention(A, A, A))
            A = layer.ffn(A)
            A_prev = A
        return A_prev


def abstractor_forward(X: Tensor, abstractor: Abstractor) -> Tensor:
    return abstractor(T.as_tensor(X))


class EncoderLayer(Module):
    def __init__(self, cfg: StackConfig, rng: Rng):
        d = cfg.d_model
        self.pre_norm = cfg.pre_norm
        self.self_attention = MultiHeadAttention(d, d, d, cfg.n_heads, cfg.head_dim, d, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.d_ff, rng)
        self.norm2 = LayerNorm(d)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        if self.pre_norm:
            h = self.norm1(x)
            x = x + self.self_attention(h, h, h, mask)
            return x + self.ffn(self.norm2(x))
        x = self.norm1(x + self.self_attention(x, x, x, mask))
        return self.norm2(x + self.ffn(x))


class Encoder(Module):
    """Standard Transformer encoder over already-embedded inputs."""

    def __init__(self, cfg: StackConfig, rng: Rng):
        cfg.validate("encoder")
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model) if cfg.pre_norm else None

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x) if self.final_norm is not None else x


class DecoderLayer(Module):
    def __init__(self, cfg: StackConfig, context_widths: list[int], rng: Rng):
        d = cfg.d_model
        self.pre_norm = cfg.pre_norm
        self.self_attention = MultiHeadAttention(d, d, d, cfg.n_heads, cfg.head_dim, d, rng)
        self.self_norm = LayerNorm(d)
        self.cross = [MultiHeadAttention(d, w, w, cfg.n_heads, cfg.head_dim, d, rng) for w in context_widths]
        self.cross_norms = [LayerNorm(d) for _ in context_widths]
        self.ffn = FeedForward(d, cfg.d_ff, rng)
        self.ffn_norm = LayerNorm(d)

    def forward(self, y: Tensor, contexts: list[Tensor], mask) -> Tensor:
        if self.pre_norm:
            h = self.self_norm(y)
            y = y + self.self_attention(h, h, h, mask)
            for attn, norm, ctx in zip(self.cross, self.cross_norms, contexts):
                y = y + attn(norm(y), ctx, ctx)
            return y + self.ffn(self.ffn_norm(y))
        y = self.self_norm(y + self.self_attention(y, y, y, mask))
        for attn, norm, ctx in zip(self.cross, self.cross_norms, contexts):
            y = norm(y + attn(y, ctx, ctx))
        return self.ffn_norm(y + self.ffn(y))


class MultiAttentionDecoder(Module):
    """Causal self-attention, then cross-attention to each context in order, then feedforward."""

    def __init__(self, cfg: StackConfig, context_widths: list[int], rng: Rng):
        cfg.validate("decoder")
        if not context_widths:
            raise ConfigError("multi-attention decoder needs at least one context")
        self.cfg = cfg
        self.n_contexts = len(context_widths)
        self.layers = [DecoderLayer(cfg, list(context_widths), rng) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model) if cfg.pre_norm else None

    def forward(self, y: Tensor, contexts: list[Tensor]) -> Tensor:
        if len(contexts) != self.n_contexts:
            raise ConfigError(f"decoder built for {self.n_contexts} contexts, got {len(contexts)}")
        mask = causal_mask(y.shape[-2])
        for layer in self.layers:
            y = layer(y, contexts, mask)
        return self.final_norm(y) if self.final_norm is not None else y


def multi_attention_decoder_forward(y: Tensor, contexts: list[Tensor], decoder: MultiAttentionDecoder) -> Tensor:
    if not contexts:
        raise ConfigError("multi-attention decoder needs at least one context")
    return decoder(T.as_tensor(y), [T.as_tensor(c) for c in contexts])


class PositionalAdder(Module):
    """x * sqrt(d) + sinusoidal position codes."""

    def __init__(self, max_len: int, d: int):
        self.d = d
        self.table = Tensor(sinusoidal_bank(max_len, d))

    def forward(self, x: Tensor) -> Tensor:
        m = x.shape[-2]
        if m > self.table.shape[0]:
            raise CapacityError(f"sequence of length {m} exceeds positional table {self.table.shape[0]}")
        return x * math.sqrt(self.d) + self.table[:m]


# composite models -----------------------------------------------------------
class Seq2SeqModel(Module):
    """Encoder / Abstractor branches feeding a (multi-attention) decoder over target tokens."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        self.spec = spec
        kind = spec.kind
        dec = spec.decoder
        src_width = spec.encoder.d_model if spec.encoder is not None else dec.d_model
        self.source_embed = Linear(spec.d_input, src_width, rng)
        self.source_positions = PositionalAdder(spec.max_input_len, src_width)
        self.encoder = Encoder(spec.encoder, rng) if kind in ("transformer", "arch_b", "arch_c", "arch_d", "ablation") else None
        self.abstractor = None
        self.abstractor2 = None
        self.abstractor_reads_encoder = False
        if spec.abstractor is not None and kind != "transformer":
            reads_encoder = kind in ("arch_b", "arch_d") and spec.abstractor_input == "encoder"
            self.abstractor_reads_encoder = reads_encoder or kind == "ablation"
            self.abstractor = Abstractor(src_width, spec.abstractor, spec.max_input_len, rng)
            if kind == "arch_e":
                self.abstractor2 = Abstractor(spec.abstractor.d_s, spec.abstractor2, spec.max_input_len, rng)
        self.context_names = self._context_names()
        widths = [self._context_width(n) for n in self.context_names]
        self.target_embed = Embedding(spec.vocab_size, dec.d_model, rng)
        self.target_positions = PositionalAdder(spec.max_target_len, dec.d_model)
        self.decoder = MultiAttentionDecoder(dec, widths, rng)
        # small gain keeps initial logits near uniform (loss ~ ln V)
        self.head = Linear(dec.d_model, spec.vocab_size, rng, gain=HEAD_INIT_GAIN)

    def _context_names(self) -> list[str]:
        kind = self.spec.kind
        if kind == "transformer":
            return ["encoder"]
        if kind in ("arch_c", "arch_d"):
            return list(self.spec.context_order)
        return ["abstractor"]

    def _context_width(self, name: str) -> int:
        if name == "encoder":
            return self.spec.encoder.d_model
        last = self.spec.abstractor2 if self.spec.kind == "arch_e" else self.spec.abstractor
        return last.d_s

    def encode(self, src) -> list[Tensor]:
        src = T.as_tensor(src)
        embedded = self.source_embed(src)
        states: dict[str, Tensor] = {}
        if self.encoder is not None:
            states["encoder"] = self.encoder(self.source_positions(embedded))
        if self.abstractor is not None:
            X = states["encoder"] if self.abstractor_reads_encoder else embedded
            A = self.abstractor(X)
            if self.abstractor2 is not None:
                A = self.abstractor2(A)
            states["abstractor"] = A
        return [states[n] for n in self.context_names]

    def decode(self, contexts: list[Tensor], target_in) -> Tensor:
        y = self.target_positions(self.target_embed(np.asarray(target_in)))
        return self.head(self.decoder(y, contexts))

    def forward(self, src, target_in) -> Tensor:
        return self.decode(self.encode(src), target_in)

    def greedy_decode(self, src, length: int | None = None) -> np.ndarray:
        """Autoregressive argmax decoding starting from the start token."""
        length = length or self.spec.max_target_len
        with T.no_grad():
            contexts = self.encode(src)
            n = contexts[0].shape[0]
            tokens = np.full((n, 1), START_TOKEN, dtype=np.int64)
            for _ in range(length):
                logits = self.decode(contexts, tokens).data[:, -1, :]
                nxt = logits.argmax(axis=-1)
                tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        return tokens[:, 1:]


class ClassifierModel(Module):
    """[dense embedder] -> {Abstractor | CoRelNet} -> flatten -> dense, or an MLP over symbolic bits."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        self.spec = spec
        kind = spec.kind
        width = spec.d_input
        self.embedder = None
        if spec.embedder_dim is not None and kind != "symbolic_mlp":
            self.embedder = Linear(spec.d_input, spec.embedder_dim, rng)
            width = spec.embedder_dim
        m = spec.max_input_len
        if kind == "arch_a":
            self.abstractor = Abstractor(width, spec.abstractor, m, rng)
            self.classifier = Linear(m * spec.abstractor.d_s, spec.n_classes, rng)
        elif kind in ("corelnet_sym", "corelnet_asym"):
            variant = "symmetric" if kind == "corelnet_sym" else "asymmetric"
            self.corelnet = CoRelNet(width, rng, variant=variant, use_softmax=spec.corelnet_softmax)
            self.classifier = Linear(m * m, spec.n_classes, rng)
        else:
            self.hidden = Linear(spec.d_input, spec.mlp_hidden, rng)
            self.classifier = Linear(spec.mlp_hidden, spec.n_classes, rng)

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        kind = self.spec.kind
        if kind == "symbolic_mlp":
            return self.classifier(T.relu(self.hidden(x)))
        if self.embedder is not None:
            x = self.embedder(x)
        n = x.shape[0]
        if kind == "arch_a":
            features = self.abstractor(x)
        else:
            features = self.corelnet(x)
        # row-major flatten
        return self.classifier(features.reshape(n, -1))


def assemble(spec: ModelSpec, rng: Rng) -> Module:
    """Build the model described by ``spec`` with seed-controlled initialization."""
    spec.validate()
    if spec.head == "seq2seq":
        return Seq2SeqModel(spec, rng)
    return ClassifierModel(spec, rng)


def parameter_inventory(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    model = assemble(spec, Rng(0))
    return {name: p.shape for name, p in model.named_parameters().items()}


def parameter_count(spec: ModelSpec) -> int:
    return int(sum(int(np.prod(s)) for s in parameter_inventory(spec).values()))


__all__ = [
    "AbstractorConfig",
    "StackConfig",
    "ModelSpec",
    "Abstractor",
    "Encoder",
    "MultiAttentionDecoder",
    "Seq2SeqModel",
    "ClassifierModel",
    "assemble",
    "abstractor_forward",
    "multi_attention_decoder_forward",
    "parameter_inventory",
    "parameter_count",
    "START_TOKEN",
    "PAD_TOKEN",
]
