"""Small model factories and gradient-check utilities shared by the tests."""

from __future__ import annotations

import numpy as np

from abstractor_lab import tensor as T
from abstractor_lab.architectures import AbstractorConfig, ModelSpec, StackConfig, assemble
from abstractor_lab.harness import decoder_inputs
from abstractor_lab.rng import Rng


def tiny_stack(n_layers=1, n_heads=2, d_model=8, d_ff=8):
    return StackConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_ff=d_ff)


def tiny_abstractor(**kw):
    base = dict(n_layers=1, d_r=2, d_p=4, d_s=8, d_ff=8)
    base.update(kw)
    return AbstractorConfig(**base)


def tiny_spec(kind: str, **kw) -> ModelSpec:
    """Smallest valid spec of each kind; d_model = d_s = 8 so every interface lines up."""
    seq = dict(d_input=5, max_input_len=4, max_target_len=4)
    if kind == "transformer":
        spec = ModelSpec(kind=kind, encoder=tiny_stack(), decoder=tiny_stack(), **seq)
    elif kind == "arch_a":
        spec = ModelSpec(kind=kind, decoder=tiny_stack(), abstractor=tiny_abstractor(), **seq)
    elif kind in ("arch_b", "arch_c", "arch_d"):
        spec = ModelSpec(kind=kind, encoder=tiny_stack(), decoder=tiny_stack(), abstractor=tiny_abstractor(), **seq)
    elif kind == "arch_e":
        spec = ModelSpec(kind=kind, decoder=tiny_stack(), abstractor=tiny_abstractor(), abstractor2=tiny_abstractor(), **seq)
    elif kind == "ablation":
        spec = ModelSpec(kind=kind, encoder=tiny_stack(), decoder=tiny_stack(), abstractor=tiny_abstractor(interface="standard"), **seq)
    elif kind in ("corelnet_sym", "corelnet_asym"):
        spec = ModelSpec(kind=kind, d_input=5, head="binary", max_input_len=3)
    elif kind == "symbolic_mlp":
        spec = ModelSpec(kind=kind, d_input=12, head="binary", max_input_len=1, mlp_hidden=8)
    else:
        raise ValueError(kind)
    for key, value in kw.items():
        setattr(spec, key, value)
    return spec


def sample_batch(spec: ModelSpec, n: int, rng: Rng):
    """Random inputs and targets matching ``spec``."""
    if spec.head == "seq2seq":
        m = spec.max_input_len
        x = rng.normal((n, m, spec.d_input)).astype(np.float32)
        y = np.stack([rng.permutation(m) for _ in range(n)])
        return x, y
    if spec.kind == "symbolic_mlp":
        x = (rng.random((n, spec.d_input)) < 0.5).astype(np.float32)
    else:
        x = rng.normal((n, spec.max_input_len, spec.d_input)).astype(np.float32)
    return x, rng.integers(0, 2, n)


def model_loss(model, spec: ModelSpec, x, y):
    if spec.head == "seq2seq":
        return T.cross_entropy(model(x, decoder_inputs(y)), y)
    return T.cross_entropy(model(x), y)


def worst_param_error(model, loss_fn, rng: Rng, coords_per_param: int = 3) -> tuple[float, str]:
    """Largest finite-difference relative error over a few coordinates of every parameter.

    The error floor is relative to the largest gradient entry of the whole model.
    """
    model.zero_grad()
    loss_fn().backward()
    scale = max(float(np.abs(p.grad).max()) for p in model.parameters() if p.grad is not None)
    model.zero_grad()
    worst, where = 0.0, ""
    for name, p in model.named_parameters().items():
        k = min(coords_per_param, p.size)
        coords = rng.choice(p.size, size=k, replace=False)

        def f(t, name=name):
            with model.substitute(name, t):
                return loss_fn()

        err = T.grad_check(f, p.data, coords=coords, scale=scale)
        if err > worst:
            worst, where = err, name
    return worst, where


def build(kind: str, seed: int = 0, **kw):
    spec = tiny_spec(kind, **kw)
    return spec, assemble(spec, Rng(seed))
